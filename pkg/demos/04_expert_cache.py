"""
Expert cache behavior under skewed routing
==========================================

Expert weights are cached whole under LRU.  For power-law routing the
hit rate has a fast closed-form approximation, checked here against an
exact simulation; the same module also predicts how many distinct
experts a batch activates, which drives the cost model's traffic.
"""

import numpy as np

from elasticmoe.expert_cache import (
    AccessTrace,
    CacheConfig,
    expected_unique_experts,
    powerlaw_lru_hitrate,
    simulate_lru,
    zipf_popularity,
)

n_experts = 128
skew = 1.0
pop = zipf_popularity(n_experts, skew)
rng = np.random.default_rng(3)
seq = rng.choice(n_experts, size=60_000, p=pop)
trace = AccessTrace(entries=tuple((0, int(e), "full") for e in seq))

print("capacity  simulated  model")
for frac in (0.1, 0.2, 0.4, 0.6, 0.8):
    cap = int(frac * n_experts)
    sim = simulate_lru(trace, CacheConfig(capacity_bytes=cap, item_bytes={"full": 1}))
    model = powerlaw_lru_hitrate(n_experts, skew, float(cap))
    print(f"{cap:8d}  {sim.hit_rate:9.4f}  {model:.4f}")

# Batched decoding activates more distinct experts per step, eroding
# per-expert reuse: the uniform case has a closed form, skewed routing
# uses a seeded Monte Carlo estimate.
print("\nbatch  uniform  zipf(1.0)")
for batch in (1, 2, 4, 8, 16, 32):
    uni = expected_unique_experts(batch, 8, 64)
    zipf = expected_unique_experts(batch, 8, 64, popularity=zipf_popularity(64, 1.0))
    print(f"{batch:5d}  {uni:7.2f}  {zipf:.2f}")
