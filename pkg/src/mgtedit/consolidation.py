"""Multi-layer attention consolidation and hold-set thresholding.

The per-token localization score averages normalized instruction-to-image
attention rows over a layer set and a set of instruction positions:

    s[n] = 1 / (|layers| |tokens|) * sum_{l, m} W_l[m, n]

where each row of ``W_l`` is renormalized over the image columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .codec import encode_pgm, canonical_json
from .errors import UsageError, ValidationError
from .transformer import AttentionTrace


@dataclass
class LocalizationMap:
    scores: np.ndarray
    h: int
    w: int
    filtered: bool = False
    layers: list[str] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    degenerate: bool = False

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (self.h * self.w,):
            raise ValidationError(f"{self.scores.size} scores for a {self.h}x{self.w} grid")
        if np.any(self.scores < 0):
            raise ValidationError("localization scores must be nonnegative")

    @property
    def grid(self) -> np.ndarray:
        return self.scores.reshape(self.h, self.w)


def normalize_cross_attention(trace: AttentionTrace) -> list[np.ndarray]:
    """Rescale every captured instruction row to sum to 1 over the image columns."""
    if len(trace) == 0:
        raise ValidationError("attention trace is empty")
    out = []
    for label, mat in zip(trace.labels, trace.matrices):
        sums = mat.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise ValidationError(f"layer {label}: an instruction row has no attention on image tokens")
        out.append(mat / sums)
    return out


def default_layer_set(labels: list[str]) -> list[str]:
    """Trailing quarter (at least one) of the single-modal layers, else of all layers."""
    sm = [lb for lb in labels if lb.startswith("sm")] or list(labels)
    if not sm:
        raise ValidationError("no captured layers")
    return sm[-max(1, len(sm) // 4) :]


def localization_score(trace: AttentionTrace, layers=None, tokens=None) -> LocalizationMap:
    """Average of normalized instruction-to-image rows over ``layers`` x ``tokens``.

    ``layers`` are trace labels (default :func:`default_layer_set`); ``tokens``
    are instruction positions (default: all).
    """
    if layers is None:
        layers = default_layer_set(trace.labels)
    layers = list(layers)
    if not layers:
        raise UsageError("layer set is empty")
    missing = [lb for lb in layers if lb not in trace.labels]
    if missing:
        raise ValidationError(f"layers {missing} were not captured (have {trace.labels})")
    m = trace.matrices[0].shape[0]
    tokens = list(range(m)) if tokens is None else [int(t) for t in tokens]
    if not tokens:
        raise UsageError("instruction token set is empty")
    if min(tokens) < 0 or max(tokens) >= m:
        raise ValidationError(f"instruction index outside [0, {m})")
    normed = normalize_cross_attention(trace)
    total = np.zeros(trace.h * trace.w)
    for lb in layers:
        total += normed[trace.labels.index(lb)][tokens].sum(axis=0)
    scores = total / (len(layers) * len(tokens))
    return LocalizationMap(scores, trace.h, trace.w, layers=layers, tokens=tokens)


def minmax(scores: np.ndarray) -> tuple[np.ndarray, bool]:
    """Rescale to [0, 1]; a constant input gives zeros and ``degenerate=True``."""
    lo, hi = scores.min(), scores.max()
    if hi - lo <= 0:
        return np.zeros_like(scores), True
    return (scores - lo) / (hi - lo), False


def box_smooth(grid: np.ndarray) -> np.ndarray:
    """3x3 mean with edge-replicate padding."""
    h, w = grid.shape
    p = np.pad(grid, 1, mode="edge")
    acc = np.zeros((h, w))
    for di in range(3):
        for dj in range(3):
            acc += p[di : di + h, dj : dj + w]
    return acc / 9.0


def adaptive_filter(lmap: LocalizationMap, passes: int = 1) -> LocalizationMap:
    """``passes`` rounds of box smoothing, each followed by min-max renormalization.

    ``passes=0`` only renormalizes.
    """
    if passes < 0:
        raise UsageError(f"passes must be >= 0, got {passes}")
    g = lmap.grid.copy()
    g, degenerate = minmax(g) if passes == 0 else (g, False)
    for _ in range(passes):
        g, degenerate = minmax(box_smooth(g))
        if degenerate:
            break
    return replace(lmap, scores=g.ravel(), filtered=True, degenerate=degenerate)


def hold_set(lmap: LocalizationMap, lam: float) -> np.ndarray:
    """Positions with score strictly below ``lam``."""
    if not lam >= 0:
        raise UsageError(f"lambda must be >= 0, got {lam}")
    return np.flatnonzero(lmap.scores < lam)


def total_variation(grid: np.ndarray) -> float:
    """Sum of absolute differences between 4-neighbours."""
    return float(np.abs(np.diff(grid, axis=0)).sum() + np.abs(np.diff(grid, axis=1)).sum())


def map_to_pgm(scores: np.ndarray, h: int, w: int) -> bytes:
    """8-bit grayscale of the min-max renormalized map, values round(255 s)."""
    s, _ = minmax(np.asarray(scores, dtype=np.float64))
    return encode_pgm(np.floor(255.0 * s + 0.5).astype(np.uint8).reshape(h, w))


def map_sidecar(lmap: LocalizationMap, **extra) -> str:
    obj = {
        "h": lmap.h,
        "w": lmap.w,
        "filtered": lmap.filtered,
        "layers": list(lmap.layers),
        "tokens": list(lmap.tokens),
        "scores": lmap.scores.tolist(),
    }
    obj.update(extra)
    return canonical_json(obj)
