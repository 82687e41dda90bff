"""
System cost model: where speculation pays
=========================================

Per-step latency and energy for a large mixture-of-experts model served
from a stacked-memory device with an external-memory spillover tier.
Growing the batch inflates the KV footprint, squeezes the expert cache,
and shifts the balance between plain decoding and draft/verify steps.
"""

import warnings

from elasticmoe.expert_cache import expected_unique_experts, powerlaw_lru_hitrate
from elasticmoe.toymoe import MoEShape
from elasticmoe.hwmodel import (
    Arch,
    CommOverlapWarning,
    HwConfig,
    SdParams,
    build_workloads,
    expert_bytes_full,
    expert_bytes_msb,
    hb_headroom_bytes,
    step_cost,
)

warnings.simplefilter("ignore", CommOverlapWarning)

cfg = HwConfig()
shape = MoEShape(d_model=2048, d_ff=4096, n_experts=64, top_k=4, n_layers=16, vocab=32000)
seq_len, pool = 6144, 8
# Pool refresh traffic is left out of the latency table: its stall term
# spikes right at the phase-boundary batch sizes and buries the trend.
sd = SdParams(width=2, depth=3, verify_tokens=7.0, pool_size=pool,
              mean_accept=2.5, transfer_pieces_per_step=0.0)

full = expert_bytes_full(shape)
msb = expert_bytes_msb(shape)
n_items = shape.n_layers * shape.n_experts
print(f"expert weights: {full / 1e6:.1f} MB full, {msb / 1e6:.1f} MB draft slice")

print("\nbatch  cache-hit  ar us/tok  sd us/tok  advantage")
for b in (1, 2, 4, 6, 8, 10, 12, 14, 16):
    ar_cap = min(hb_headroom_bytes(cfg, shape, b, seq_len) / full, n_items)
    sd_cap = min(hb_headroom_bytes(cfg, shape, b, seq_len, pool_size=pool) / msb, n_items)
    ar_hit = powerlaw_lru_hitrate(n_items, 1.0, ar_cap)
    v_hit = powerlaw_lru_hitrate(n_items, 1.0, sd_cap)
    wl = build_workloads(
        cfg, Arch.OURS, shape, b, seq_len=seq_len,
        ar_hit_rate=ar_hit,
        ar_unique_experts=expected_unique_experts(b, shape.top_k, shape.n_experts),
        sd=sd,
        verify_msb_hit_rate=v_hit,
        verify_unique_experts=expected_unique_experts(
            round(b * sd.verify_tokens), shape.top_k, shape.n_experts
        ),
    )
    ar = step_cost(cfg, Arch.OURS, wl, "ar", b)
    spec = step_cost(cfg, Arch.OURS, wl, "sd", b, sd=sd)
    adv = ar.per_token_latency / spec.per_token_latency
    marker = "  <- speculation wins" if adv > 1 else ""
    print(f"{b:5d}  {ar_hit:9.3f}  {ar.per_token_latency * 1e6:9.1f}  "
          f"{spec.per_token_latency * 1e6:9.1f}  {adv:9.3f}{marker}")

# Energy per emitted token at one operating point, by component.
b = 8
wl = build_workloads(
    cfg, Arch.OURS, shape, b, seq_len=seq_len,
    ar_hit_rate=0.7,
    ar_unique_experts=expected_unique_experts(b, shape.top_k, shape.n_experts),
    sd=sd, verify_msb_hit_rate=0.6,
    verify_unique_experts=expected_unique_experts(
        round(b * sd.verify_tokens), shape.top_k, shape.n_experts
    ),
)
cost = step_cost(cfg, Arch.OURS, wl, "sd", b, sd=sd)
print(f"\nenergy at batch {b}: {cost.per_token_energy * 1e3:.3f} mJ/token")
for part, joules in sorted(cost.energy.items()):
    print(f"  {part:8s} {joules / cost.tokens * 1e3:8.4f} mJ/token")

# Baseline devices run the same decode step without the stacked tier;
# in-memory tiers split expert work between internal and host streams.
print("\narch        ar us/token")
for arch in (Arch.XPU, Arch.XPU_PIM, Arch.XPU_LOGIC_PIM, Arch.XPU_NMP, Arch.HB_XPU):
    hit = 0.7 if arch in (Arch.HB_XPU,) else 0.0
    wl = build_workloads(
        cfg, arch, shape, b, seq_len=seq_len, ar_hit_rate=hit,
        ar_unique_experts=expected_unique_experts(b, shape.top_k, shape.n_experts),
    )
    cost = step_cost(cfg, arch, wl, "ar", b)
    print(f"{arch.value:12s} {cost.per_token_latency * 1e6:9.1f}")
