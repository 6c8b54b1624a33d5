"""Mask-rate sampling, mask application, the reconstruction loss, and the reveal schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .codec import InstructionTokens, MaskedGrid, TokenGrid
from .errors import DomainError, UsageError, ValidationError
from .tensor import GradTape
from .transformer import ModelWeights, forward

DEFAULT_R_MIN = 0.2


@dataclass
class MaskPlan:
    rate: float
    positions: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_count(rate: float, n: int) -> int:
    return _round_half_up(rate * n)


def sample_mask_rate(rng: np.random.Generator, r_min: float = DEFAULT_R_MIN) -> float:
    """Draw from the arccos law (density 2 / (pi sqrt(1 - r^2))) truncated below at ``r_min``.

    Inverse transform ``r = cos(pi u / 2)``, redrawn until ``r >= r_min``.
    """
    if not 0.0 <= r_min < 1.0:
        raise DomainError(f"r_min must lie in [0, 1), got {r_min}")
    while True:
        r = math.cos(math.pi * rng.random() / 2.0)
        if r >= r_min and r > 0.0:
            return r


def sample_mask_rates(rng: np.random.Generator, n: int, r_min: float = DEFAULT_R_MIN) -> np.ndarray:
    """Vectorized :func:`sample_mask_rate`; same law, independent stream layout."""
    if not 0.0 <= r_min < 1.0:
        raise DomainError(f"r_min must lie in [0, 1), got {r_min}")
    out = np.empty(0)
    while out.size < n:
        r = np.cos(np.pi * rng.random(n) / 2.0)
        out = np.concatenate([out, r[(r >= r_min) & (r > 0.0)]])
    return out[:n]


def apply_mask(grid: TokenGrid, rate: float, rng: np.random.Generator) -> tuple[MaskedGrid, MaskPlan]:
    """Replace ``round(rate * N)`` uniformly chosen positions with MASK."""
    if not 0.0 < rate <= 1.0:
        raise DomainError(f"mask rate must lie in (0, 1], got {rate}")
    count = mask_count(rate, grid.n)
    if count == 0:
        raise UsageError(f"mask rate {rate} masks no tokens of a {grid.h}x{grid.w} grid")
    positions = np.sort(rng.choice(grid.n, size=count, replace=False))
    tokens = grid.tokens.copy()
    tokens[positions] = grid.mask_id
    return MaskedGrid(grid.h, grid.w, tokens, grid.codebook_size), MaskPlan(rate, positions)


@dataclass
class TrainingSample:
    """One training pair. ``target=None`` means the identity pretext (target is the source)."""

    source: TokenGrid
    instruction: InstructionTokens
    target: TokenGrid | None = None

    def __post_init__(self):
        if self.target is not None and (self.target.h, self.target.w) != (self.source.h, self.source.w):
            raise ValidationError("source and target grids differ in shape")


def masked_loss(weights: ModelWeights, sample: TrainingSample, plan: MaskPlan, gamma: float = 1.0,
                tape: GradTape | None = None):
    """Loss for a fixed mask plan; conditions on the source grid, predicts the target."""
    target = sample.target if sample.target is not None else sample.source
    tokens = target.tokens.copy()
    tokens[plan.positions] = target.mask_id
    masked = MaskedGrid(target.h, target.w, tokens, target.codebook_size)
    res = forward(weights, masked, sample.instruction, sample.source, plan.rate, gamma, tape=tape)
    rows = T.take_rows(res.logits, plan.positions, tape)
    return T.cross_entropy(rows, target.tokens[plan.positions], tape)


def training_loss(weights: ModelWeights, sample: TrainingSample, rng: np.random.Generator,
                  r_min: float = DEFAULT_R_MIN, gamma: float = 1.0):
    """Masked-token cross-entropy and its gradients.

    Draws a mask rate and mask set from ``rng``; the image stream runs at
    timestep equal to the mask rate. Returns ``(loss, grads, plan)``.
    """
    target = sample.target if sample.target is not None else sample.source
    while True:
        rate = sample_mask_rate(rng, r_min)
        if mask_count(rate, target.n) > 0:
            break
    _, plan = apply_mask(target, rate, rng)
    tape = GradTape()
    weights.watch(tape)
    loss = masked_loss(weights, sample, plan, gamma, tape)
    return loss.item(), T.backward(tape, loss), plan


def reveal_schedule(k: int, total: int, n: int) -> int:
    """Tokens still masked after step ``k`` of ``total``: ``floor(n cos(pi/2 k/total))``."""
    if total < 1:
        raise DomainError(f"step count must be >= 1, got {total}")
    if not 0 <= k <= total:
        raise DomainError(f"step {k} outside [0, {total}]")
    if k == total:
        return 0
    return int(math.floor(n * math.cos(math.pi / 2.0 * k / total)))


@dataclass
class StepLog:
    step: int
    loss: float
    rate: float
    masked: int


def train(weights: ModelWeights, samples: list[TrainingSample], steps: int, lr: float,
          rng: np.random.Generator, r_min: float = DEFAULT_R_MIN) -> list[StepLog]:
    """Plain gradient descent, cycling through ``samples``. Updates ``weights`` in place."""
    if not samples:
        raise UsageError("no training samples")
    if steps < 0 or not lr > 0:
        raise UsageError("steps must be >= 0 and lr > 0")
    log = []
    for i in range(steps):
        loss, grads, plan = training_loss(weights, samples[i % len(samples)], rng, r_min)
        if not math.isfinite(loss):
            raise ValidationError(f"loss diverged at step {i}; lower the learning rate")
        for name, g in grads.items():
            weights.tensors[name].data -= lr * g
        log.append(StepLog(i, loss, plan.rate, int(plan.positions.size)))
    return log
