"""Iterative parallel decoding with region-hold restoration.

Each step predicts every masked image position, reveals the most confident
ones on a cosine schedule, and then writes the source token back into every
position whose localization score is below ``lam``. Held positions count as
revealed and stay locked for the rest of the edit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .codec import InstructionTokens, MaskedGrid, TokenGrid, canonical_json
from .consolidation import LocalizationMap, adaptive_filter, hold_set, localization_score
from .errors import UsageError, ValidationError
from .masking import reveal_schedule
from .transformer import AttentionTrace, ModelWeights, encode_condition, forward

FREEZE = "freeze"
RUNNING = "running"


@dataclass
class SamplerConfig:
    steps: int = 16
    gamma: float = 1.0
    lam: float = 0.0
    temperature: float = 1.0
    seed: int = 0
    layers: list[str] | None = None
    keywords: list[str] | None = None
    policy: str = FREEZE
    filter_passes: int | None = None
    lock_held: bool = True

    def __post_init__(self):
        if not isinstance(self.steps, int) or self.steps < 1:
            raise UsageError(f"steps must be >= 1, got {self.steps}")
        for name in ("gamma", "lam", "temperature"):
            v = getattr(self, name)
            if not v >= 0:
                raise UsageError(f"{name} must be >= 0, got {v}")
        if self.policy not in (FREEZE, RUNNING):
            raise UsageError(f"unknown localization policy {self.policy!r}")
        if self.filter_passes is not None and self.filter_passes < 0:
            raise UsageError("filter_passes must be >= 0")

    def temperature_at(self, k: int) -> float:
        """Linear decay from ``temperature`` at step 0 toward 0."""
        return self.temperature * (1.0 - k / self.steps)


@dataclass
class SamplerState:
    grid: MaskedGrid
    source: TokenGrid
    k: int = 0
    held: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rng: np.random.Generator = None
    trace_sum: AttentionTrace | None = None
    trace_count: int = 0
    localization: LocalizationMap | None = None
    cond_cache: list | None = None

    @property
    def masked(self) -> np.ndarray:
        return self.grid.masked

    @property
    def revealed(self) -> np.ndarray:
        return np.flatnonzero(self.grid.tokens != self.grid.mask_id)


@dataclass
class StepRecord:
    k: int
    revealed: int
    held: int
    masked: int
    elapsed_ms: float


@dataclass
class Diagnostics:
    per_step: list[StepRecord]
    scores: np.ndarray
    hold: np.ndarray
    elapsed_ms: float
    localization: LocalizationMap | None = None
    trace: AttentionTrace | None = None

    def to_json(self, timing: bool = True) -> str:
        steps = []
        for r in self.per_step:
            item = {"k": r.k, "revealed": r.revealed, "held": r.held, "masked": r.masked}
            if timing:
                item["elapsed_ms"] = r.elapsed_ms
            steps.append(item)
        obj = {
            "per_step": steps,
            "s_L": [float(x) for x in self.scores],
            "hold_set": [int(i) for i in self.hold],
        }
        if timing:
            obj["elapsed_ms"] = self.elapsed_ms
        return canonical_json(obj)


def confidence(probs: np.ndarray, sampled: np.ndarray, temperature: float, rng: np.random.Generator | None = None,
               gumbel: np.ndarray | None = None) -> np.ndarray:
    """``log p(sampled) + temperature * G`` with ``G`` standard Gumbel.

    Pass ``gumbel`` to supply the noise directly instead of drawing from ``rng``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    sampled = np.asarray(sampled, dtype=np.int64)
    if probs.ndim != 2 or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValidationError("confidence needs row-normalized probabilities")
    with np.errstate(divide="ignore"):
        logp = np.log(probs[np.arange(len(sampled)), sampled])
    if temperature == 0:
        return logp
    if gumbel is None:
        gumbel = rng.gumbel(size=len(sampled))
    return logp + temperature * gumbel


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sample(probs: np.ndarray, logits: np.ndarray, temperature: float, uniforms: np.ndarray) -> np.ndarray:
    if temperature == 0:
        return np.argmax(logits, axis=1)
    p = _softmax(logits / temperature)
    cdf = np.cumsum(p, axis=1)
    idx = (cdf < uniforms[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


def _accumulate(state: SamplerState, trace: AttentionTrace) -> AttentionTrace:
    if state.trace_sum is None:
        state.trace_sum = AttentionTrace(trace.h, trace.w, list(trace.labels), [m.copy() for m in trace.matrices],
                                         [r.copy() for r in trace.row_totals])
    else:
        for i, m in enumerate(trace.matrices):
            state.trace_sum.matrices[i] += m
            state.trace_sum.row_totals[i] += trace.row_totals[i]
    state.trace_count += 1
    c = state.trace_count
    return AttentionTrace(trace.h, trace.w, list(trace.labels), [m / c for m in state.trace_sum.matrices],
                          [r / c for r in state.trace_sum.row_totals])


def _localize(trace: AttentionTrace, instruction: InstructionTokens, cfg: SamplerConfig) -> LocalizationMap:
    lmap = localization_score(trace, cfg.layers, instruction.keyword_indices)
    if cfg.filter_passes is not None:
        lmap = adaptive_filter(lmap, cfg.filter_passes)
    return lmap


def init_state(source: TokenGrid, weights: ModelWeights, cfg: SamplerConfig) -> SamplerState:
    if not isinstance(source, TokenGrid):
        raise ValidationError("source must be a token grid without MASK tokens")
    cache = encode_condition(weights, source) if cfg.gamma > 0 else None
    return SamplerState(
        grid=MaskedGrid.full(source.h, source.w, source.codebook_size),
        source=source,
        rng=np.random.default_rng(cfg.seed),
        cond_cache=cache,
    )


def step(state: SamplerState, instruction: InstructionTokens, weights: ModelWeights, cfg: SamplerConfig) -> StepRecord:
    """Advance ``state`` by one decoding step in place."""
    if state.k >= cfg.steps:
        raise UsageError(f"all {cfg.steps} steps already taken")
    t0 = time.perf_counter()
    k, n = state.k, state.grid.n
    mask_id = state.grid.mask_id
    # noise is drawn for every position each step so its stream does not depend on the hold set
    uniforms = state.rng.random(n)
    gumbel = state.rng.gumbel(size=n)
    tau = cfg.temperature_at(k)
    tokens = state.grid.tokens.copy()
    if not cfg.lock_held and state.held.size:
        # unlocked holds go back into the masked pool before every prediction
        tokens[state.held] = mask_id
    masked = np.flatnonzero(tokens == mask_id)
    grid_in = MaskedGrid(state.grid.h, state.grid.w, tokens, state.grid.codebook_size)
    revealed_now = 0

    need_forward = masked.size > 0 or cfg.policy == RUNNING or state.localization is None
    if need_forward:
        t = 1.0 - k / cfg.steps
        res = forward(weights, grid_in, instruction, state.source, t, cfg.gamma, capture=True,
                      cond_cache=state.cond_cache)
        if cfg.policy == RUNNING:
            state.localization = _localize(_accumulate(state, res.trace), instruction, cfg)
        elif state.localization is None:
            state.trace_sum, state.trace_count = res.trace, 1
            state.localization = _localize(res.trace, instruction, cfg)

    hold = hold_set(state.localization, cfg.lam)
    if cfg.lock_held:
        hold = np.union1d(state.held, hold)
    state.held = hold
    is_held = np.zeros(n, dtype=bool)
    is_held[hold] = True

    candidates = masked[~is_held[masked]]
    if candidates.size:
        logits = res.logits.data[candidates]
        probs = _softmax(logits)
        sampled = _sample(probs, logits, tau, uniforms[candidates])
        conf = confidence(probs, sampled, tau, gumbel=gumbel[candidates])
        keep_masked = min(reveal_schedule(k + 1, cfg.steps, n), candidates.size)
        n_reveal = candidates.size - keep_masked
        # stable sort on descending confidence; ties go to the lower position
        order = np.argsort(-conf, kind="stable")[:n_reveal]
        tokens[candidates[order]] = sampled[order]
        revealed_now = int(n_reveal)
    tokens[hold] = state.source.tokens[hold]
    state.grid = MaskedGrid(state.grid.h, state.grid.w, tokens, state.grid.codebook_size)
    state.k += 1
    return StepRecord(k, revealed_now, int(hold.size), int(np.count_nonzero(tokens == mask_id)),
                      (time.perf_counter() - t0) * 1e3)


def edit(source: TokenGrid, instruction: InstructionTokens, cfg: SamplerConfig, weights: ModelWeights,
         keep_trace: bool = False) -> tuple[TokenGrid, Diagnostics]:
    """Run all ``cfg.steps`` steps from a fully masked grid conditioned on ``source``."""
    t0 = time.perf_counter()
    if (source.codebook_size != weights.config.codebook_size):
        raise ValidationError(f"source grid uses K={source.codebook_size}, model expects {weights.config.codebook_size}")
    state = init_state(source, weights, cfg)
    records = [step(state, instruction, weights, cfg) for _ in range(cfg.steps)]
    edited = state.grid.to_grid()
    diag = Diagnostics(
        per_step=records,
        scores=state.localization.scores.copy(),
        hold=state.held.copy(),
        elapsed_ms=(time.perf_counter() - t0) * 1e3,
        localization=state.localization,
        trace=state.trace_sum if keep_trace else None,
    )
    return edited, diag


def vanilla_edit(source: TokenGrid, instruction: InstructionTokens, cfg: SamplerConfig, weights: ModelWeights):
    """Decoding with region hold switched off (``lam = 0``)."""
    from dataclasses import replace

    return edit(source, instruction, replace(cfg, lam=0.0), weights)
