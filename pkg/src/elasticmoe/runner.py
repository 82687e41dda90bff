"""Experiment orchestration: config files, scenario sweeps, CSV/JSON output.

A scenario bundles a toy model, a routing trace, a hardware config, and a
list of decoding schemes.  Functional schemes actually run the toy model:
speculative sessions measure accept lengths and routing decisions, the
cache simulator turns those decisions into hit rates, and the hardware
model prices the resulting workloads.  Analytic schemes are parameterized
comparisons: their accept length and relative draft/verify costs come from
the config (defaults are illustrative), with only the cache-footprint
effect computed.

Everything is deterministic given the config file: seeds are explicit,
scenario evaluation is pure, and rows are sorted before emission so
sequential and concurrent sweeps produce byte-identical output.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import elastic_sd, expert_cache, hwmodel, toymoe
from .bitnest import ReconstructMode
from .hwmodel import Arch, GIB, HwConfig
from .toymoe import MoEShape, PrecisionMode


class ConfigError(Exception):
    """Bad config file: unparseable, unknown key, or invalid value."""


class RunnerError(Exception):
    """Scenario execution failed; message carries the scenario id."""


FUNCTIONAL_SCHEMES = ("ar_only", "elastic_sd", "random_pool_sd")
ANALYTIC_SCHEMES = ("eagle_sd", "slm_sd", "quant_sd")
ALL_SCHEMES = FUNCTIONAL_SCHEMES + ANALYTIC_SCHEMES

_RECONSTRUCT_NAMES = {
    "truncate": ReconstructMode.TRUNCATE,
    "lsb_augment": ReconstructMode.LSB_AUGMENT,
    "msb_round": ReconstructMode.MSB_ROUND,
}


@dataclass(frozen=True)
class TraceParams:
    """Synthetic routing-trace generator knobs."""

    n_tokens: int = 160
    zipf_exponent: float = 1.0
    correlation: float = 0.8
    seed: int = 7

    def __post_init__(self):
        if self.n_tokens < 1:
            raise ConfigError("trace.n_tokens must be >= 1")
        if self.zipf_exponent < 0:
            raise ConfigError("trace.zipf_exponent must be >= 0")
        if not 0 <= self.correlation <= 1:
            raise ConfigError("trace.correlation must be in [0, 1]")


@dataclass(frozen=True)
class SdSchemeParams:
    """Speculative-decoding knobs for the functional schemes."""

    width: int = 2
    depth: int = 3
    pool_capacity: int = 8
    hotness_decay_factor: float = 0.5
    draft_reconstruct: str = "lsb_augment"
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.depth < 0:
            raise ConfigError("sd.width must be >= 1 and sd.depth >= 0")
        if self.pool_capacity < 1:
            raise ConfigError("sd.pool_capacity must be >= 1")
        if not 0 <= self.hotness_decay_factor <= 1:
            raise ConfigError("sd.hotness_decay_factor must be in [0, 1]")
        if self.draft_reconstruct not in _RECONSTRUCT_NAMES:
            raise ConfigError(
                f"sd.draft_reconstruct must be one of {sorted(_RECONSTRUCT_NAMES)}"
            )


@dataclass(frozen=True)
class RunParams:
    """Decode-run shape shared by every scheme in the scenario."""

    prompt_len: int = 4
    n_new_tokens: int = 24
    seq_len: int = 64
    kv_coeff: float = 2.0
    model_seed: int = 0

    def __post_init__(self):
        if self.prompt_len < 1 or self.n_new_tokens < 1:
            raise ConfigError("run.prompt_len and run.n_new_tokens must be >= 1")
        if self.seq_len < 0 or self.kv_coeff < 0:
            raise ConfigError("run.seq_len and run.kv_coeff must be >= 0")


@dataclass(frozen=True)
class AnalyticParams:
    """Parameterized comparison scheme: costs relative to one AR step.

    Defaults are illustrative orderings, not measurements: the external
    drafter is cheap per call, the small standalone draft model costs
    more, and the re-quantized draft doubles the per-expert cache
    footprint.
    """

    mean_accept: float
    draft_cost_ratio: float
    verify_cost_ratio: float
    depth: int
    footprint_multiplier: float

    def __post_init__(self):
        if self.mean_accept < 0 or self.depth < 0:
            raise ConfigError("analytic mean_accept and depth must be >= 0")
        if self.draft_cost_ratio < 0 or self.verify_cost_ratio <= 0:
            raise ConfigError("analytic cost ratios must be positive")
        if self.footprint_multiplier < 1:
            raise ConfigError("analytic footprint_multiplier must be >= 1")


_ANALYTIC_DEFAULTS = {
    "eagle_sd": AnalyticParams(
        mean_accept=2.8, draft_cost_ratio=0.10, verify_cost_ratio=1.6,
        depth=4, footprint_multiplier=1.1,
    ),
    "slm_sd": AnalyticParams(
        mean_accept=2.2, draft_cost_ratio=0.25, verify_cost_ratio=1.6,
        depth=4, footprint_multiplier=1.3,
    ),
    "quant_sd": AnalyticParams(
        mean_accept=2.4, draft_cost_ratio=0.50, verify_cost_ratio=1.6,
        depth=4, footprint_multiplier=2.0,
    ),
}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    shape: MoEShape
    hw: HwConfig
    arch: Arch
    schemes: tuple[str, ...]
    batch_sizes: tuple[int, ...]
    trace: TraceParams
    sd: SdSchemeParams
    run: RunParams
    analytic: dict[str, AnalyticParams] = field(hash=False)

    def __post_init__(self):
        if not self.scenario_id:
            raise ConfigError("scenario_id must be a nonempty string")
        for s in self.schemes:
            if s not in ALL_SCHEMES:
                raise ConfigError(f"schemes: unknown scheme {s!r}")
        if not self.schemes:
            raise ConfigError("schemes must be nonempty")
        if not self.batch_sizes or any(b < 1 for b in self.batch_sizes):
            raise ConfigError("batch_sizes must be a nonempty list of ints >= 1")
        if self.sd.pool_capacity < self.shape.top_k:
            raise ConfigError(
                "sd.pool_capacity must be >= model.top_k "
                f"({self.sd.pool_capacity} < {self.shape.top_k})"
            )
        needs_ours = set(self.schemes) - {"ar_only"}
        if needs_ours and self.arch is not Arch.OURS:
            raise ConfigError(
                f"schemes {sorted(needs_ours)} require arch 'ours', got "
                f"{self.arch.value!r}"
            )


@dataclass(frozen=True)
class ResultRow:
    """One (scenario, scheme, batch) outcome; floats are rounded to 9
    significant digits before storage so CSV and JSON agree exactly."""

    scenario_id: str
    scheme: str
    arch: str
    batch: int
    mode: str
    accept_length_mean: Optional[float]
    ar_hit_rate: float
    verify_msb_hit_rate: Optional[float]
    per_token_latency_s: float
    per_token_energy_j: float
    energy_compute_j: float
    energy_hb_mem_j: float
    energy_ext_mem_j: float
    energy_comm_j: float
    energy_static_j: float
    speedup_vs_xpu: float


CSV_COLUMNS = [f.name for f in dataclasses.fields(ResultRow)]


def _round9(x: float) -> float:
    return float(format(float(x), ".9g"))


def _opt_round9(x: Optional[float]) -> Optional[float]:
    return None if x is None else _round9(x)


# ---------------------------------------------------------------------------
# Config ingestion


_HW_KEY_MAP = {
    "hb_banks": ("hb_banks", 1),
    "hb_bw_per_bank_gbps": ("hb_bw_per_bank", 1e9),
    "hb_capacity_gib": ("hb_capacity_bytes", GIB),
    "ext_bw_gbps": ("ext_bw", 1e9),
    "ext_capacity_gib": ("ext_capacity_bytes", GIB),
    "macs_per_pe_per_cycle": ("macs_per_pe_per_cycle", 1),
    "clock_ghz": ("clock_hz", 1e9),
    "aggr_link_bw_gbps": ("aggr_link_bw", 1e9),
    "streamline_bw_gbps": ("streamline_bw", 1e9),
    "hb_energy_pj_per_bit": ("hb_energy_per_bit", 1e-12),
    "ext_energy_pj_per_bit": ("ext_energy_per_bit", 1e-12),
    "comm_energy_pj_per_bit": ("comm_energy_per_bit", 1e-12),
    "compute_energy_pj_per_mac": ("compute_energy_per_mac", 1e-12),
    "static_power_w": ("static_power_w", 1),
    "hb_derate": ("hb_derate", 1),
    "ext_derate": ("ext_derate", 1),
    "xpu_compute_tmacs": ("xpu_compute_macs", 1e12),
    "pim_compute_tmacs": ("pim_compute_macs", 1e12),
    "pim_bw_multiplier": ("pim_bw_multiplier", 1),
    "logic_pim_bw_multiplier": ("logic_pim_bw_multiplier", 1),
    "logic_pim_compute_multiplier": ("logic_pim_compute_multiplier", 1),
    "nmp_channels": ("nmp_channels", 1),
    "total_channels": ("total_channels", 1),
    "nmp_compute_tmacs": ("nmp_compute_macs", 1e12),
    "nmp_internal_multiplier": ("nmp_internal_multiplier", 1),
}

_INT_HW_FIELDS = {"hb_banks", "macs_per_pe_per_cycle", "nmp_channels", "total_channels"}


def _check_keys(section: str, data: dict, allowed) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown key {sorted(unknown)[0]!r}")


def _sub(data: dict, key: str) -> dict:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{key} must be an object")
    return value


def _build_dataclass(section: str, cls, data: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    _check_keys(section, data, fields)
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _hw_from_dict(data: dict) -> HwConfig:
    _check_keys("hw", data, _HW_KEY_MAP)
    kwargs = {}
    for key, raw in data.items():
        fname, scale = _HW_KEY_MAP[key]
        if fname in _INT_HW_FIELDS:
            if not isinstance(raw, int) or isinstance(raw, bool):
                raise ConfigError(f"hw.{key} must be an integer")
            kwargs[fname] = raw
        else:
            if not isinstance(raw, (int, float)) or isinstance(raw, bool):
                raise ConfigError(f"hw.{key} must be a number")
            kwargs[fname] = float(raw) * scale
    try:
        return HwConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"hw: {exc}") from exc


def _hw_to_dict(hw: HwConfig) -> dict:
    out = {}
    for key, (fname, scale) in _HW_KEY_MAP.items():
        value = getattr(hw, fname)
        out[key] = value if fname in _INT_HW_FIELDS else value / scale
    return out


_SCENARIO_KEYS = (
    "scenario_id", "model", "hw", "arch", "schemes", "batch_sizes",
    "trace", "sd", "run", "analytic",
)

_MODEL_DEFAULTS = dict(
    d_model=64, d_ff=128, n_experts=16, top_k=2, n_layers=2, vocab=64
)


def scenario_from_dict(data: dict) -> ScenarioConfig:
    """Build one validated scenario; every omitted key gets its default."""
    if not isinstance(data, dict):
        raise ConfigError("scenario must be an object")
    _check_keys("scenario", data, _SCENARIO_KEYS)
    if "scenario_id" not in data or not isinstance(data["scenario_id"], str):
        raise ConfigError("scenario_id is required and must be a string")
    model_data = dict(_MODEL_DEFAULTS)
    _check_keys("model", _sub(data, "model"), _MODEL_DEFAULTS)
    model_data.update(_sub(data, "model"))
    try:
        shape = MoEShape(**model_data)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    arch_name = data.get("arch", "ours")
    try:
        arch = Arch(arch_name)
    except ValueError:
        raise ConfigError(
            f"arch: unknown architecture {arch_name!r}; expected one of "
            f"{[a.value for a in Arch]}"
        ) from None
    schemes = data.get("schemes", ["ar_only", "elastic_sd"])
    if not isinstance(schemes, list) or not all(isinstance(s, str) for s in schemes):
        raise ConfigError("schemes must be a list of strings")
    batches = data.get("batch_sizes", [1, 2, 4, 8])
    if not isinstance(batches, list) or not all(
        isinstance(b, int) and not isinstance(b, bool) for b in batches
    ):
        raise ConfigError("batch_sizes must be a list of integers")
    analytic = dict(_ANALYTIC_DEFAULTS)
    analytic_data = _sub(data, "analytic")
    _check_keys("analytic", analytic_data, ANALYTIC_SCHEMES)
    for name, params in analytic_data.items():
        if not isinstance(params, dict):
            raise ConfigError(f"analytic.{name} must be an object")
        merged = dataclasses.asdict(_ANALYTIC_DEFAULTS[name])
        _check_keys(f"analytic.{name}", params, merged)
        merged.update(params)
        analytic[name] = _build_dataclass(f"analytic.{name}", AnalyticParams, merged)
    return ScenarioConfig(
        scenario_id=data["scenario_id"],
        shape=shape,
        hw=_hw_from_dict(_sub(data, "hw")),
        arch=arch,
        schemes=tuple(schemes),
        batch_sizes=tuple(batches),
        trace=_build_dataclass("trace", TraceParams, _sub(data, "trace")),
        sd=_build_dataclass("sd", SdSchemeParams, _sub(data, "sd")),
        run=_build_dataclass("run", RunParams, _sub(data, "run")),
        analytic=analytic,
    )


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    """Fully explicit form: re-loading it reproduces the same scenario."""
    return {
        "scenario_id": cfg.scenario_id,
        "model": {k: getattr(cfg.shape, k) for k in _MODEL_DEFAULTS},
        "hw": _hw_to_dict(cfg.hw),
        "arch": cfg.arch.value,
        "schemes": list(cfg.schemes),
        "batch_sizes": list(cfg.batch_sizes),
        "trace": dataclasses.asdict(cfg.trace),
        "sd": dataclasses.asdict(cfg.sd),
        "run": dataclasses.asdict(cfg.run),
        "analytic": {k: dataclasses.asdict(v) for k, v in sorted(cfg.analytic.items())},
    }


def parse_config_text(text: str) -> list[ScenarioConfig]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if isinstance(data, dict) and "scenarios" in data:
        _check_keys("top level", data, ("scenarios",))
        raw_list = data["scenarios"]
        if not isinstance(raw_list, list) or not raw_list:
            raise ConfigError("scenarios must be a nonempty list")
    elif isinstance(data, dict):
        raw_list = [data]
    else:
        raise ConfigError("config root must be an object")
    configs = [scenario_from_dict(item) for item in raw_list]
    ids = [c.scenario_id for c in configs]
    if len(set(ids)) != len(ids):
        raise ConfigError("scenario_id values must be unique within a file")
    return configs


def example_config_path() -> str:
    """Filesystem path of the bundled example sweep config."""
    return str(resources.files("elasticmoe").joinpath("configs/example.json"))


def load_config(path: str) -> list[ScenarioConfig]:
    """Read and validate a JSON config file (one scenario object, or
    {"scenarios": [...]}); unknown keys anywhere are rejected."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def dump_config(configs: list[ScenarioConfig]) -> str:
    """Serialize scenarios in the fully explicit round-trippable form."""
    payload = {"scenarios": [scenario_to_dict(c) for c in configs]}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Scenario execution


@dataclass(frozen=True)
class _FunctionalStats:
    """Measurements from the toy runs, shared across batch sizes."""

    mean_accept: Optional[float]
    mean_verify_tokens: float
    mean_transfers: float
    ar_steps: list[list[elastic_sd.LayerDecision]]
    verify_steps: list[list[elastic_sd.LayerDecision]]
    ar_popularity: np.ndarray


def _make_prompt(cfg: ScenarioConfig) -> list[int]:
    rng = np.random.default_rng(cfg.trace.seed + 1_000_003)
    return [int(t) for t in rng.integers(0, cfg.shape.vocab, size=cfg.run.prompt_len)]


def _popularity_from_steps(
    steps: list[list[elastic_sd.LayerDecision]], n_experts: int
) -> np.ndarray:
    counts = np.zeros(n_experts, dtype=np.float64)
    for step in steps:
        for _, decision in step:
            for e in decision.selected:
                counts[e] += 1.0
    total = counts.sum()
    if total == 0:
        return np.full(n_experts, 1.0 / n_experts)
    return counts / total


def _run_functional(cfg: ScenarioConfig, scheme: str) -> _FunctionalStats:
    model = toymoe.gen_model(cfg.shape, seed=cfg.run.model_seed)
    layer_traces = [
        toymoe.gen_routing_trace(
            cfg.trace.n_tokens,
            cfg.shape.n_experts,
            cfg.shape.top_k,
            cfg.trace.zipf_exponent,
            cfg.trace.correlation,
            cfg.trace.seed + 17 * layer,
        )
        for layer in range(cfg.shape.n_layers)
    ]
    traces = toymoe.trace_scores(layer_traces)
    prompt = _make_prompt(cfg)
    _, ar_decisions = toymoe.greedy_decode(
        model, prompt, cfg.run.n_new_tokens, PrecisionMode.INT8_FULL,
        score_traces=traces,
    )
    ar_steps = [
        [(layer, d) for layer, d in enumerate(step)] for step in ar_decisions
    ]
    popularity = _popularity_from_steps(ar_steps, cfg.shape.n_experts)
    if scheme == "ar_only":
        return _FunctionalStats(
            mean_accept=None,
            mean_verify_tokens=1.0,
            mean_transfers=0.0,
            ar_steps=ar_steps,
            verify_steps=[],
            ar_popularity=popularity,
        )
    sd_config = elastic_sd.SdConfig(
        width=cfg.sd.width,
        depth=cfg.sd.depth,
        pool_capacity=cfg.sd.pool_capacity,
        hotness_decay=cfg.sd.hotness_decay_factor,
        draft_reconstruct=_RECONSTRUCT_NAMES[cfg.sd.draft_reconstruct],
        pool_strategy="random" if scheme == "random_pool_sd" else "hotness",
        seed=cfg.sd.seed,
    )
    session = elastic_sd.SdSession(model, sd_config, prompt, score_traces=traces)
    accepts: list[int] = []
    verify_tokens: list[int] = []
    transfers: list[int] = []
    verify_steps: list[list[elastic_sd.LayerDecision]] = []
    emitted = 0
    while emitted < cfg.run.n_new_tokens:
        step = session.step()
        accepts.append(step.accept_length)
        verify_tokens.append(step.verify_token_count)
        transfers.append(len(step.transfers))
        verify_steps.append(list(step.verify_decisions))
        emitted += len(step.emitted)
    return _FunctionalStats(
        mean_accept=float(np.mean(accepts)),
        mean_verify_tokens=float(np.mean(verify_tokens)),
        mean_transfers=float(np.mean(transfers)),
        ar_steps=ar_steps,
        verify_steps=verify_steps,
        ar_popularity=popularity,
    )


def _lru_hit_rate(
    steps: list[list[elastic_sd.LayerDecision]],
    slice_kind: str,
    full_item_bytes: float,
    capacity_bytes: float,
) -> float:
    """Weighted LRU hit rate of the decision stream; a capacity below one
    item means nothing is cacheable."""
    item_bytes = {"full": full_item_bytes, "msb": full_item_bytes / 2}
    if not steps or capacity_bytes < item_bytes[slice_kind]:
        return 0.0
    records = [
        (i, [(layer, e) for layer, d in step for e in d.selected])
        for i, step in enumerate(steps)
    ]
    trace = expert_cache.decisions_to_trace(records, slice_kind)
    config = expert_cache.CacheConfig(
        capacity_bytes=capacity_bytes, item_bytes=item_bytes
    )
    return expert_cache.simulate_lru(trace, config).hit_rate


def _unique_experts(
    draws: int, shape: MoEShape, popularity: np.ndarray, seed: int
) -> float:
    draws = max(1, int(round(draws)))
    return expert_cache.expected_unique_experts(
        draws, shape.top_k, shape.n_experts, popularity=popularity, seed=seed
    )


def _energy_fields(cost: hwmodel.StepCost) -> dict[str, float]:
    per_token = {k: v / cost.tokens for k, v in cost.energy.items()}
    return {
        "energy_compute_j": per_token["compute"],
        "energy_hb_mem_j": per_token["hb_mem"],
        "energy_ext_mem_j": per_token["ext_mem"],
        "energy_comm_j": per_token["comm"],
        "energy_static_j": per_token["static"],
    }


def _xpu_per_token_latency(
    cfg: ScenarioConfig, batch: int, ar_unique: float
) -> float:
    wl = hwmodel.build_workloads(
        cfg.hw,
        Arch.XPU,
        cfg.shape,
        batch,
        seq_len=cfg.run.seq_len,
        ar_hit_rate=0.0,
        ar_unique_experts=ar_unique,
        kv_coeff=cfg.run.kv_coeff,
    )
    return hwmodel.step_cost(cfg.hw, Arch.XPU, wl, "ar", batch).per_token_latency


def _row(
    cfg: ScenarioConfig,
    scheme: str,
    batch: int,
    mode: str,
    chosen: hwmodel.StepCost,
    accept: Optional[float],
    ar_hit: float,
    verify_hit: Optional[float],
    xpu_per_token: float,
) -> ResultRow:
    fields = _energy_fields(chosen)
    return ResultRow(
        scenario_id=cfg.scenario_id,
        scheme=scheme,
        arch=cfg.arch.value,
        batch=batch,
        mode=mode,
        accept_length_mean=_opt_round9(accept),
        ar_hit_rate=_round9(ar_hit),
        verify_msb_hit_rate=_opt_round9(verify_hit),
        per_token_latency_s=_round9(chosen.per_token_latency),
        per_token_energy_j=_round9(chosen.per_token_energy),
        energy_compute_j=_round9(fields["energy_compute_j"]),
        energy_hb_mem_j=_round9(fields["energy_hb_mem_j"]),
        energy_ext_mem_j=_round9(fields["energy_ext_mem_j"]),
        energy_comm_j=_round9(fields["energy_comm_j"]),
        energy_static_j=_round9(fields["energy_static_j"]),
        speedup_vs_xpu=_round9(xpu_per_token / chosen.per_token_latency),
    )


def _functional_rows(cfg: ScenarioConfig, scheme: str) -> list[ResultRow]:
    stats = _run_functional(cfg, scheme)
    full_item = hwmodel.expert_bytes_full(cfg.shape)
    rows = []
    for batch in cfg.batch_sizes:
        ar_capacity = hwmodel.hb_headroom_bytes(
            cfg.hw, cfg.shape, batch, cfg.run.seq_len, cfg.run.kv_coeff, 0
        ) if cfg.arch in (Arch.OURS, Arch.HB_XPU) else 0.0
        ar_hit = _lru_hit_rate(stats.ar_steps, "full", full_item, ar_capacity)
        ar_unique = _unique_experts(
            batch, cfg.shape, stats.ar_popularity, cfg.trace.seed
        )
        if scheme == "ar_only":
            wl = hwmodel.build_workloads(
                cfg.hw, cfg.arch, cfg.shape, batch,
                seq_len=cfg.run.seq_len,
                ar_hit_rate=ar_hit,
                ar_unique_experts=ar_unique,
                kv_coeff=cfg.run.kv_coeff,
            )
            cost = hwmodel.step_cost(cfg.hw, cfg.arch, wl, "ar", batch)
            rows.append(
                _row(
                    cfg, scheme, batch, "ar", cost, None, ar_hit, None,
                    _xpu_per_token_latency(cfg, batch, ar_unique),
                )
            )
            continue
        verify_capacity = hwmodel.hb_headroom_bytes(
            cfg.hw, cfg.shape, batch, cfg.run.seq_len, cfg.run.kv_coeff,
            cfg.sd.pool_capacity,
        )
        verify_hit = _lru_hit_rate(
            stats.verify_steps, "msb", full_item, verify_capacity
        )
        verify_pop = _popularity_from_steps(stats.verify_steps, cfg.shape.n_experts)
        verify_unique = _unique_experts(
            batch * stats.mean_verify_tokens, cfg.shape, verify_pop, cfg.trace.seed + 1
        )
        sd_params = hwmodel.SdParams(
            width=cfg.sd.width,
            depth=cfg.sd.depth,
            verify_tokens=stats.mean_verify_tokens,
            pool_size=cfg.sd.pool_capacity,
            mean_accept=stats.mean_accept,
            transfer_pieces_per_step=stats.mean_transfers,
        )
        wl = hwmodel.build_workloads(
            cfg.hw, cfg.arch, cfg.shape, batch,
            seq_len=cfg.run.seq_len,
            ar_hit_rate=ar_hit,
            ar_unique_experts=ar_unique,
            sd=sd_params,
            verify_msb_hit_rate=verify_hit,
            verify_unique_experts=verify_unique,
            kv_coeff=cfg.run.kv_coeff,
        )
        ar_cost = hwmodel.step_cost(cfg.hw, cfg.arch, wl, "ar", batch)
        sd_cost = hwmodel.step_cost(cfg.hw, cfg.arch, wl, "sd", batch, sd=sd_params)
        mode, chosen = hwmodel.mode_select(ar_cost, sd_cost)
        rows.append(
            _row(
                cfg, scheme, batch, mode, chosen, stats.mean_accept,
                ar_hit, verify_hit,
                _xpu_per_token_latency(cfg, batch, ar_unique),
            )
        )
    return rows


def _analytic_rows(cfg: ScenarioConfig, scheme: str) -> list[ResultRow]:
    """Parameterized scheme: AR workloads priced at a footprint-adjusted
    hit rate, then scaled by the configured draft/verify cost ratios."""
    params = cfg.analytic[scheme]
    stats = _run_functional(cfg, "ar_only")
    full_item = hwmodel.expert_bytes_full(cfg.shape) * params.footprint_multiplier
    rows = []
    for batch in cfg.batch_sizes:
        capacity = hwmodel.hb_headroom_bytes(
            cfg.hw, cfg.shape, batch, cfg.run.seq_len, cfg.run.kv_coeff, 0
        )
        ar_hit = _lru_hit_rate(stats.ar_steps, "full", full_item, capacity)
        ar_unique = _unique_experts(
            batch, cfg.shape, stats.ar_popularity, cfg.trace.seed
        )
        wl = hwmodel.build_workloads(
            cfg.hw, cfg.arch, cfg.shape, batch,
            seq_len=cfg.run.seq_len,
            ar_hit_rate=ar_hit,
            ar_unique_experts=ar_unique,
            kv_coeff=cfg.run.kv_coeff,
        )
        ar_cost = hwmodel.step_cost(cfg.hw, cfg.arch, wl, "ar", batch)
        scale = params.depth * params.draft_cost_ratio + params.verify_cost_ratio
        sd_cost = hwmodel.StepCost(
            latency=ar_cost.latency * scale,
            tokens=batch * (1.0 + params.mean_accept),
            energy={k: v * scale for k, v in ar_cost.energy.items()},
        )
        mode, chosen = hwmodel.mode_select(ar_cost, sd_cost)
        rows.append(
            _row(
                cfg, scheme, batch, mode, chosen, params.mean_accept,
                ar_hit, None,
                _xpu_per_token_latency(cfg, batch, ar_unique),
            )
        )
    return rows


def run_scenario(cfg: ScenarioConfig) -> list[ResultRow]:
    """All rows for one scenario, ordered by (scheme, batch) as configured."""
    rows = []
    try:
        for scheme in cfg.schemes:
            if scheme in FUNCTIONAL_SCHEMES:
                rows.extend(_functional_rows(cfg, scheme))
            else:
                rows.extend(_analytic_rows(cfg, scheme))
    except (ValueError, KeyError) as exc:
        raise RunnerError(f"scenario {cfg.scenario_id!r}: {exc}") from exc
    return rows


def run_scenarios(
    configs: list[ScenarioConfig], max_workers: Optional[int] = None
) -> list[ResultRow]:
    """Evaluate scenarios (concurrently when max_workers > 1) and return
    rows sorted by scenario id so output never depends on schedule."""
    if max_workers is not None and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            per_scenario = list(pool.map(run_scenario, configs))
    else:
        per_scenario = [run_scenario(c) for c in configs]
    order = sorted(range(len(configs)), key=lambda i: configs[i].scenario_id)
    rows: list[ResultRow] = []
    for i in order:
        rows.extend(per_scenario[i])
    return rows


# ---------------------------------------------------------------------------
# Emission


def _row_to_record(row: ResultRow) -> dict:
    return dataclasses.asdict(row)


def render_csv(rows: list[ResultRow]) -> str:
    if not rows:
        raise RunnerError("no result rows to emit")
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        record = _row_to_record(row)
        line = []
        for col in CSV_COLUMNS:
            value = record[col]
            if value is None:
                line.append("")
            elif isinstance(value, float):
                line.append(format(value, ".9g"))
            else:
                line.append(str(value))
        writer.writerow(line)
    return out.getvalue()


def render_json(rows: list[ResultRow]) -> str:
    if not rows:
        raise RunnerError("no result rows to emit")
    return json.dumps([_row_to_record(r) for r in rows], indent=2) + "\n"


def emit(rows: list[ResultRow], fmt: str, path: str) -> None:
    """Write rows to path as csv or json; empty results are an error."""
    if fmt == "csv":
        text = render_csv(rows)
    elif fmt == "json":
        text = render_json(rows)
    else:
        raise RunnerError(f"unknown output format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def rows_from_json(text: str) -> list[ResultRow]:
    data = json.loads(text)
    return [ResultRow(**item) for item in data]


# ---------------------------------------------------------------------------
# Ablation suites


ABLATION_SUITES = ("hotness_vs_random", "bit_axis", "cache_capacity")


def _ablation_configs(which: str) -> list[ScenarioConfig]:
    base = {
        "model": {"n_experts": 16, "top_k": 2},
        "hw": {"hb_capacity_gib": 0.001},
        "batch_sizes": [1],
        "trace": {"correlation": 0.9, "zipf_exponent": 1.0, "n_tokens": 160},
        "run": {"n_new_tokens": 30},
        "sd": {"pool_capacity": 6},
    }
    if which == "hotness_vs_random":
        configs = []
        for seed in range(6):
            d = json.loads(json.dumps(base))
            d["scenario_id"] = f"hotness_vs_random/seed{seed}"
            d["schemes"] = ["elastic_sd", "random_pool_sd"]
            d["trace"]["seed"] = 100 + seed
            d["sd"]["seed"] = seed
            configs.append(scenario_from_dict(d))
        return configs
    if which == "bit_axis":
        configs = []
        for axis in ("truncate", "lsb_augment", "msb_round"):
            for seed in range(4):
                d = json.loads(json.dumps(base))
                d["scenario_id"] = f"bit_axis/{axis}/seed{seed}"
                d["schemes"] = ["elastic_sd"]
                d["trace"]["seed"] = 200 + seed
                d["sd"]["seed"] = seed
                d["sd"]["draft_reconstruct"] = axis
                d["sd"]["pool_capacity"] = 16
                configs.append(scenario_from_dict(d))
        return configs
    if which == "cache_capacity":
        configs = []
        for i, gib in enumerate((0.0003, 0.0005, 0.001, 0.002, 0.004)):
            d = json.loads(json.dumps(base))
            d["scenario_id"] = f"cache_capacity/{i}_{gib:g}gib"
            d["schemes"] = ["ar_only", "elastic_sd"]
            d["hw"]["hb_capacity_gib"] = gib
            # Flat, weakly sticky routing so the working set exceeds the
            # smallest capacities and the sweep actually bites.
            d["trace"]["zipf_exponent"] = 0.5
            d["trace"]["correlation"] = 0.3
            d["run"]["n_new_tokens"] = 60
            configs.append(scenario_from_dict(d))
        return configs
    raise ConfigError(
        f"unknown ablation suite {which!r}; expected one of {list(ABLATION_SUITES)}"
    )


def ablation_suite(which: str, max_workers: Optional[int] = None) -> list[ResultRow]:
    """Run one bundled paired-comparison suite and return its rows."""
    return run_scenarios(_ablation_configs(which), max_workers=max_workers)
