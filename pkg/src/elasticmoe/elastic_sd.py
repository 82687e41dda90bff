"""Elastic self-speculative decoding over the toy MoE model.

A width-w, depth-d token tree is drafted with the 4-bit MSB weight
surrogate while routing is confined to a per-layer expert pool; the full
INT8 model then verifies the top-scoring tree nodes and accepts the longest
root path that matches its own greedy choices, emitting one bonus token.
Expert hotness (accumulated unrestricted routing counts with decay) picks
the next pool before each verification so the MSB pieces it needs can be
fetched while verification runs.

Greedy verification makes the emitted stream equal the full-precision
model's greedy autoregressive stream token for token, whatever the draft
quality; drafting only changes how many tokens each step yields.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .bitnest import ReconstructMode
from .toymoe import (
    DecodeState,
    MoEModel,
    PrecisionMode,
    RoutingDecision,
    greedy_token,
    init_state,
    log_softmax,
    step,
)

LayerDecision = tuple[int, RoutingDecision]


@dataclass(frozen=True)
class TreeNode:
    parent: int
    token: int
    score: float
    depth: int


@dataclass(frozen=True)
class DraftTree:
    """Candidate token tree; nodes[0] is the root (last accepted token).

    chain holds the node indices of the draft model's own greedy path,
    one per depth, always retained through expansion and verification.
    """

    nodes: tuple[TreeNode, ...]
    width: int
    depth: int
    chain: tuple[int, ...]

    def __post_init__(self):
        for i, n in enumerate(self.nodes):
            if i == 0:
                if n.parent != -1 or n.depth != 0:
                    raise ValueError("node 0 must be the depth-0 root")
                continue
            if not 0 <= n.parent < i:
                raise ValueError(f"node {i} parent {n.parent} out of order")
            if n.depth != self.nodes[n.parent].depth + 1:
                raise ValueError(f"node {i} depth inconsistent with parent")
            if n.depth > self.depth:
                raise ValueError(f"node {i} deeper than tree depth {self.depth}")


@dataclass(frozen=True)
class HotnessAccumulator:
    """Per (layer, expert) selection counts; decays at each pool refresh."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.float64, copy=True)
        if c.ndim != 2:
            raise ValueError("counts must be (n_layers, n_experts)")
        if np.any(c < 0):
            raise ValueError("counts must be nonnegative")
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)


@dataclass(frozen=True)
class ExpertPool:
    """Per-layer expert id sets, each of size min(capacity, n_experts)."""

    experts: tuple[frozenset[int], ...]
    capacity: int


def new_accumulator(n_layers: int, n_experts: int) -> HotnessAccumulator:
    return HotnessAccumulator(counts=np.zeros((n_layers, n_experts)))


def accumulate_hotness(
    acc: HotnessAccumulator, decisions: Iterable[LayerDecision]
) -> HotnessAccumulator:
    """Add one count per selected expert per decision; order-independent."""
    counts = np.array(acc.counts, copy=True)
    n_layers, n_experts = counts.shape
    for layer, dec in decisions:
        if not 0 <= layer < n_layers:
            raise ValueError(f"layer {layer} out of range")
        for e in dec.selected:
            if not 0 <= e < n_experts:
                raise ValueError(f"expert {e} out of range")
            counts[layer, e] += 1.0
    return HotnessAccumulator(counts=counts)


def decay_hotness(acc: HotnessAccumulator, factor: float) -> HotnessAccumulator:
    if not 0.0 <= factor <= 1.0:
        raise ValueError("decay factor must be in [0, 1]")
    return HotnessAccumulator(counts=acc.counts * factor)


def select_pool(
    acc: HotnessAccumulator, capacity: int, top_k: int = 1
) -> ExpertPool:
    """Per layer, the capacity highest-count experts; ties to lower id."""
    if capacity < top_k:
        raise ValueError(f"pool capacity {capacity} below top_k {top_k}")
    n_layers, n_experts = acc.counts.shape
    size = min(capacity, n_experts)
    pools = []
    for layer in range(n_layers):
        order = sorted(range(n_experts), key=lambda e: (-acc.counts[layer, e], e))
        pools.append(frozenset(order[:size]))
    return ExpertPool(experts=tuple(pools), capacity=capacity)


def random_pool(
    n_layers: int, n_experts: int, capacity: int, rng: np.random.Generator, top_k: int = 1
) -> ExpertPool:
    """Uniformly random per-layer pools; the paired baseline to hotness."""
    if capacity < top_k:
        raise ValueError(f"pool capacity {capacity} below top_k {top_k}")
    size = min(capacity, n_experts)
    pools = tuple(
        frozenset(rng.choice(n_experts, size=size, replace=False).tolist())
        for _ in range(n_layers)
    )
    return ExpertPool(experts=pools, capacity=capacity)


def pool_update_plan(
    next_pool: ExpertPool, cached: Iterable[tuple[int, int]]
) -> list[tuple[int, int]]:
    """(layer, expert) MSB pieces needed by the next pool and not resident."""
    cached_set = set(cached)
    plan = []
    for layer, experts in enumerate(next_pool.experts):
        for e in sorted(experts):
            if (layer, e) not in cached_set:
                plan.append((layer, e))
    return plan


def sd_speedup(
    accept_len: float, lat_ar: float, d: int, lat_draft: float, lat_verify: float
) -> float:
    """Per-step speedup: (1 + accept) * lat_ar / (d * lat_draft + lat_verify)."""
    if lat_ar <= 0 or lat_verify <= 0:
        raise ValueError("latencies must be positive")
    if d < 0:
        raise ValueError("d must be >= 0")
    if d > 0 and lat_draft <= 0:
        raise ValueError("lat_draft must be positive when d > 0")
    if accept_len < 0:
        raise ValueError("accept_len must be >= 0")
    draft_term = d * lat_draft if d > 0 else 0.0
    return (1.0 + accept_len) * lat_ar / (draft_term + lat_verify)


def _overrides(score_traces, pos: int):
    if score_traces is None:
        return None
    return score_traces[pos % len(score_traces)]


@dataclass(frozen=True)
class DraftResult:
    tree: DraftTree
    pre_states: tuple[DecodeState, ...]
    decisions: tuple[LayerDecision, ...]
    original_decisions: tuple[LayerDecision, ...]
    step_calls: int


def draft_phase(
    model: MoEModel,
    root_token: int,
    root_state: DecodeState,
    pool: ExpertPool,
    w: int,
    d: int,
    draft_mode: PrecisionMode = PrecisionMode.MSB4_DRAFT,
    draft_reconstruct: ReconstructMode = ReconstructMode.LSB_AUGMENT,
    score_traces=None,
    start_pos: int = 0,
) -> DraftResult:
    """Expand a width-w depth-d tree with throttled draft-precision steps.

    Node scores are cumulative log-probabilities; each depth keeps the
    top-w candidates, always retaining the draft-greedy chain node.
    pre_states[i] is the decode state before node i's token is processed.
    """
    if w < 1 or d < 0:
        raise ValueError("need w >= 1 and d >= 0")
    nodes = [TreeNode(parent=-1, token=int(root_token), score=0.0, depth=0)]
    pre_states = [root_state]
    decisions: list[LayerDecision] = []
    originals: list[LayerDecision] = []
    frontier = [0]
    chain = []
    chain_node = 0
    calls = 0
    for depth in range(1, d + 1):
        candidates = []
        chain_key = None
        for idx in frontier:
            out = step(
                model,
                pre_states[idx],
                nodes[idx].token,
                draft_mode,
                permitted=pool.experts,
                score_overrides=_overrides(score_traces, start_pos + nodes[idx].depth),
                draft_reconstruct=draft_reconstruct,
            )
            calls += 1
            for layer, dec in enumerate(out.decisions):
                decisions.append((layer, dec))
            for layer, dec in enumerate(out.original_decisions):
                originals.append((layer, dec))
            lp = log_softmax(out.logits)
            order = np.argsort(-lp, kind="stable")[:w]
            for tok in order.tolist():
                candidates.append(
                    (nodes[idx].score + float(lp[tok]), idx, tok, out.state)
                )
            if idx == chain_node:
                chain_key = (idx, int(np.argmax(lp)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        kept = candidates[:w]
        if chain_key is not None and not any(
            (c[1], c[2]) == chain_key for c in kept
        ):
            forced = next(c for c in candidates if (c[1], c[2]) == chain_key)
            kept = kept[:-1] + [forced]
        frontier = []
        for score, parent, tok, state in kept:
            nodes.append(TreeNode(parent=parent, token=tok, score=score, depth=depth))
            pre_states.append(state)
            frontier.append(len(nodes) - 1)
            if chain_key is not None and (parent, tok) == chain_key:
                chain_node = len(nodes) - 1
        chain.append(chain_node)
    tree = DraftTree(nodes=tuple(nodes), width=w, depth=d, chain=tuple(chain))
    return DraftResult(
        tree=tree,
        pre_states=tuple(pre_states),
        decisions=tuple(decisions),
        original_decisions=tuple(originals),
        step_calls=calls,
    )


@dataclass(frozen=True)
class SdStepResult:
    accept_length: int
    bonus_token: int
    verify_token_count: int
    emitted: tuple[int, ...]
    draft_decisions: tuple[LayerDecision, ...]
    draft_original_decisions: tuple[LayerDecision, ...]
    verify_decisions: tuple[LayerDecision, ...]
    pool: Optional[ExpertPool]
    next_pool: Optional[ExpertPool]
    transfers: tuple[tuple[int, int], ...]
    tree: DraftTree
    draft_step_calls: int
    final_state: DecodeState = field(repr=False, compare=False, default=None)


def verify_phase(
    model: MoEModel,
    tree: DraftTree,
    root_state: DecodeState,
    verify_count: Optional[int] = None,
    score_traces=None,
    start_pos: int = 0,
) -> SdStepResult:
    """Verify the top-scoring tree nodes with the full-precision model.

    The verify set is the verify_count highest cumulative-score non-root
    nodes (ties to the earlier node), plus the draft-greedy chain.  Scores
    never increase along a path, so the set is closed under parents.
    Acceptance walks from the root, following at each node the unique child
    whose token equals the target's greedy token; the greedy token after the
    last accepted node is emitted as the bonus.  Routing is unrestricted.
    """
    n_nodes = len(tree.nodes)
    if verify_count is None:
        verify_count = max(n_nodes - 1, 0)
    if verify_count < 0:
        raise ValueError("verify_count must be >= 0")
    ranked = sorted(
        range(1, n_nodes), key=lambda i: (-tree.nodes[i].score, i)
    )
    selected = set(ranked[:verify_count]) | set(tree.chain)
    order = sorted(selected)
    decisions: list[LayerDecision] = []

    def run(state, token, pos):
        out = step(
            model,
            state,
            token,
            PrecisionMode.INT8_FULL,
            permitted=None,
            score_overrides=_overrides(score_traces, pos),
        )
        for layer, dec in enumerate(out.decisions):
            decisions.append((layer, dec))
        return out

    root = tree.nodes[0]
    out0 = run(root_state, root.token, start_pos)
    post_state = {0: out0.state}
    logits = {0: out0.logits}
    for idx in order:
        node = tree.nodes[idx]
        parent_state = post_state[node.parent]
        out = run(parent_state, node.token, start_pos + node.depth)
        post_state[idx] = out.state
        logits[idx] = out.logits
    children: dict[int, list[int]] = {}
    for idx in order:
        children.setdefault(tree.nodes[idx].parent, []).append(idx)
    cur = 0
    accepted: list[int] = []
    while True:
        want = greedy_token(logits[cur])
        nxt = None
        for c in children.get(cur, []):
            if tree.nodes[c].token == want:
                nxt = c
                break
        if nxt is None:
            break
        accepted.append(nxt)
        cur = nxt
    bonus = greedy_token(logits[cur])
    emitted = tuple(tree.nodes[i].token for i in accepted) + (bonus,)
    return SdStepResult(
        accept_length=len(accepted),
        bonus_token=bonus,
        verify_token_count=1 + len(order),
        emitted=emitted,
        draft_decisions=(),
        draft_original_decisions=(),
        verify_decisions=tuple(decisions),
        pool=None,
        next_pool=None,
        transfers=(),
        tree=tree,
        draft_step_calls=0,
        final_state=post_state[cur],
    )


@dataclass
class SdConfig:
    width: int = 2
    depth: int = 3
    verify_count: Optional[int] = None
    pool_capacity: int = 8
    hotness_decay: float = 0.5
    draft_reconstruct: ReconstructMode = ReconstructMode.LSB_AUGMENT
    draft_mode: PrecisionMode = PrecisionMode.MSB4_DRAFT
    pool_strategy: str = "hotness"
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.depth < 0:
            raise ValueError("need width >= 1 and depth >= 0")
        if self.pool_strategy not in ("hotness", "random"):
            raise ValueError(f"unknown pool strategy {self.pool_strategy!r}")
        if not 0.0 <= self.hotness_decay <= 1.0:
            raise ValueError("hotness_decay must be in [0, 1]")

    def resolved_verify_count(self) -> int:
        if self.verify_count is not None:
            return self.verify_count
        return self.width * self.depth


@dataclass(frozen=True)
class SdRunResult:
    tokens: tuple[int, ...]
    accept_lengths: tuple[int, ...]
    steps: tuple[SdStepResult, ...]

    @property
    def mean_accept_length(self) -> float:
        if not self.accept_lengths:
            return 0.0
        return float(np.mean(self.accept_lengths))


class SdSession:
    """One decoding session: prompt ingestion, then draft/verify steps."""

    def __init__(
        self,
        model: MoEModel,
        config: SdConfig,
        prompt: Sequence[int],
        score_traces=None,
    ):
        if len(prompt) == 0:
            raise ValueError("prompt must be nonempty")
        if config.pool_capacity < model.shape.top_k:
            raise ValueError(
                f"pool capacity {config.pool_capacity} below top_k "
                f"{model.shape.top_k}"
            )
        self.model = model
        self.config = config
        self.score_traces = score_traces
        self.rng = np.random.default_rng(config.seed)
        shape = model.shape
        self.hotness = new_accumulator(shape.n_layers, shape.n_experts)
        state = init_state(model)
        pos = 0
        prompt_decisions: list[LayerDecision] = []
        for tok in prompt[:-1]:
            out = step(
                model,
                state,
                tok,
                PrecisionMode.INT8_FULL,
                score_overrides=_overrides(score_traces, pos),
            )
            state = out.state
            for layer, dec in enumerate(out.decisions):
                prompt_decisions.append((layer, dec))
            pos += 1
        self.hotness = accumulate_hotness(self.hotness, prompt_decisions)
        self.root_state = state
        self.root_token = int(prompt[-1])
        self.pos = pos
        self.pool = self._pick_pool()
        self.cached = {
            (layer, e)
            for layer, experts in enumerate(self.pool.experts)
            for e in experts
        }

    def _pick_pool(self) -> ExpertPool:
        shape = self.model.shape
        if self.config.pool_strategy == "random":
            return random_pool(
                shape.n_layers,
                shape.n_experts,
                self.config.pool_capacity,
                self.rng,
                shape.top_k,
            )
        return select_pool(self.hotness, self.config.pool_capacity, shape.top_k)

    def step(self) -> SdStepResult:
        cfg = self.config
        draft = draft_phase(
            self.model,
            self.root_token,
            self.root_state,
            self.pool,
            cfg.width,
            cfg.depth,
            draft_mode=cfg.draft_mode,
            draft_reconstruct=cfg.draft_reconstruct,
            score_traces=self.score_traces,
            start_pos=self.pos,
        )
        self.hotness = decay_hotness(self.hotness, cfg.hotness_decay)
        self.hotness = accumulate_hotness(self.hotness, draft.original_decisions)
        next_pool = self._pick_pool()
        verify = verify_phase(
            self.model,
            draft.tree,
            self.root_state,
            cfg.resolved_verify_count(),
            score_traces=self.score_traces,
            start_pos=self.pos,
        )
        self.hotness = accumulate_hotness(self.hotness, verify.verify_decisions)
        transfers = pool_update_plan(next_pool, self.cached)
        result = SdStepResult(
            accept_length=verify.accept_length,
            bonus_token=verify.bonus_token,
            verify_token_count=verify.verify_token_count,
            emitted=verify.emitted,
            draft_decisions=draft.decisions,
            draft_original_decisions=draft.original_decisions,
            verify_decisions=verify.verify_decisions,
            pool=self.pool,
            next_pool=next_pool,
            transfers=tuple(transfers),
            tree=draft.tree,
            draft_step_calls=draft.step_calls,
            final_state=verify.final_state,
        )
        self.root_state = verify.final_state
        self.root_token = verify.bonus_token
        self.pos += verify.accept_length + 1
        self.pool = next_pool
        self.cached = {
            (layer, e)
            for layer, experts in enumerate(next_pool.experts)
            for e in experts
        }
        return result

    def run(self, n_tokens: int) -> SdRunResult:
        """Emit at least n_tokens, truncated to exactly n_tokens."""
        tokens: list[int] = []
        accepts: list[int] = []
        steps: list[SdStepResult] = []
        while len(tokens) < n_tokens:
            res = self.step()
            tokens.extend(res.emitted)
            accepts.append(res.accept_length)
            steps.append(res)
        return SdRunResult(
            tokens=tuple(tokens[:n_tokens]),
            accept_lengths=tuple(accepts),
            steps=tuple(steps),
        )
