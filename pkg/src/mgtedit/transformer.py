"""Toy masked generative transformer with attention injection.

Three token streams share one attention per block:

* image tokens (the grid being generated, MASK allowed), timestep ``t``;
* instruction tokens, timestep ``t``;
* condition tokens copied from the source grid, timestep 0, same 2-D rotary
  positions and the same parameters as the image stream.

Image and instruction queries see every key. Condition keys carry an additive
pre-softmax bias of ``log(gamma)``; ``gamma == 0`` drops the condition stream
from the computation outright. Condition queries only see condition keys, so
the condition stream does not depend on ``t`` or on the image being decoded
and can be encoded once per edit (:func:`encode_condition`).

Multi-modal blocks keep separate parameters for the image and instruction
streams; single-modal blocks share one parameter set across all streams. With
``ModelConfig.sm_text`` off, instruction tokens skip single-modal blocks.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .codec import InstructionTokens, MaskedGrid, TokenGrid, canonical_json, read_text, write_text
from .errors import DomainError, ShapeError, ValidationError
from .tensor import GradTape, Tensor

ATTN_CHUNK = 16
_UNDERFLOW = 1e-250


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    mm_blocks: int = 4
    sm_blocks: int = 8
    codebook_size: int = 16
    vocab_size: int = 64
    patch: int = 4
    max_text: int = 32
    mlp_ratio: int = 4
    time_features: int = 16
    sm_text: bool = True
    rope_base: float = 100.0

    def __post_init__(self):
        for name in ("d", "heads", "mm_blocks", "sm_blocks", "codebook_size", "vocab_size", "patch", "max_text",
                     "mlp_ratio", "time_features"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ValidationError(f"config field {name} must be an integer, got {v!r}")
        if self.heads < 1 or self.d % (2 * self.heads):
            raise ValidationError(f"d={self.d} must be divisible by 2*heads={2 * self.heads}")
        if self.head_dim % 4:
            raise ValidationError(f"head width {self.head_dim} must be divisible by 4 for 2-D rotary pairs")
        if self.mm_blocks < 1 or self.sm_blocks < 1:
            raise ValidationError("need at least one multi-modal and one single-modal block")
        if self.codebook_size < 2 or self.vocab_size < 1 or self.max_text < 1:
            raise ValidationError("codebook_size >= 2, vocab_size >= 1 and max_text >= 1 required")
        if self.time_features < 2 or self.time_features % 2:
            raise ValidationError("time_features must be a positive even integer")
        if self.mlp_ratio < 1 or self.patch < 1:
            raise ValidationError("mlp_ratio and patch must be positive")
        if not self.rope_base > 1:
            raise ValidationError("rope_base must exceed 1")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    @property
    def n_layers(self) -> int:
        return self.mm_blocks + self.sm_blocks

    @classmethod
    def from_dict(cls, obj) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        if not isinstance(obj, dict) or set(obj) != known:
            got = sorted(obj) if isinstance(obj, dict) else obj
            raise ValidationError(f"model config: expected keys {sorted(known)}, got {got}")
        return cls(**obj)


# --------------------------------------------------------------------------
# Parameters

_STREAM_PARAMS = ("norm1", "wq", "wk", "wv", "wo", "norm2", "w1", "w2", "mod_w", "mod_b")


def stream_prefixes(cfg: ModelConfig) -> list[str]:
    out = []
    for b in range(cfg.mm_blocks):
        out += [f"mm{b}.img", f"mm{b}.txt"]
    out += [f"sm{b}" for b in range(cfg.sm_blocks)]
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical, ordered tensor names and shapes for ``cfg``."""
    d, f, hidden = cfg.d, cfg.time_features, cfg.mlp_ratio * cfg.d
    shapes = {"tok_emb": (cfg.codebook_size + 1, d), "word_emb": (cfg.vocab_size, d)}
    per_stream = {
        "norm1": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "norm2": (d,), "w1": (d, hidden), "w2": (hidden, d), "mod_w": (f, 4 * d), "mod_b": (4 * d,),
    }
    for prefix in stream_prefixes(cfg):
        for name in _STREAM_PARAMS:
            shapes[f"{prefix}.{name}"] = per_stream[name]
    shapes.update({"final_norm": (d,), "out_w": (d, cfg.codebook_size), "out_b": (cfg.codebook_size,)})
    return shapes


@dataclass
class ModelWeights:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self.audit()

    def audit(self) -> None:
        expected = param_shapes(self.config)
        missing = [n for n in expected if n not in self.tensors]
        unknown = [n for n in self.tensors if n not in expected]
        if missing or unknown:
            raise ValidationError(f"weights: missing tensors {missing[:5]}, unknown tensors {unknown[:5]}")
        for name, shape in expected.items():
            got = self.tensors[name].shape
            if got != shape:
                raise ValidationError(f"weights: tensor {name} has shape {got}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name].data)):
                raise ValidationError(f"weights: tensor {name} has non-finite values")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def watch(self, tape: GradTape) -> None:
        for name, t in self.tensors.items():
            tape.watch(t, name)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {n: Tensor(t.data.copy()) for n, t in self.tensors.items()})

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_weights(cfg: ModelConfig, rng: np.random.Generator) -> ModelWeights:
    """Random toy initialisation. The output head starts small so logits are near uniform."""
    d, hidden = cfg.d, cfg.mlp_ratio * cfg.d
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("norm1", "norm2", "final_norm"):
            arr = np.ones(shape)
        elif leaf in ("mod_b", "out_b"):
            arr = np.zeros(shape)
        elif leaf in ("tok_emb", "word_emb"):
            arr = rng.standard_normal(shape)
        elif leaf in ("wq", "wk", "wv", "w1"):
            arr = rng.standard_normal(shape) / math.sqrt(d)
        elif leaf == "wo":
            arr = 0.5 * rng.standard_normal(shape) / math.sqrt(d)
        elif leaf == "w2":
            arr = 0.5 * rng.standard_normal(shape) / math.sqrt(hidden)
        elif leaf in ("mod_w", "out_w"):
            arr = 0.02 * rng.standard_normal(shape)
        else:  # pragma: no cover - param_shapes and this table must agree
            raise AssertionError(name)
        tensors[name] = Tensor(arr)
    return ModelWeights(cfg, tensors)


def weights_to_json(weights: ModelWeights) -> str:
    tensors = {
        name: {"shape": list(weights.tensors[name].shape), "data": weights.tensors[name].data.ravel().tolist()}
        for name in param_shapes(weights.config)
    }
    return canonical_json({"config": asdict(weights.config), "tensors": tensors})


def weights_from_json(text: str) -> ModelWeights:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"weights: invalid JSON ({exc.msg} at offset {exc.pos})") from None
    if not isinstance(obj, dict) or set(obj) != {"config", "tensors"}:
        raise ValidationError("weights: expected keys ['config', 'tensors']")
    cfg = ModelConfig.from_dict(obj["config"])
    raw = obj["tensors"]
    if not isinstance(raw, dict):
        raise ValidationError("weights: tensors must be an object")
    tensors = {}
    for name, entry in raw.items():
        if not isinstance(entry, dict) or set(entry) != {"shape", "data"}:
            raise ValidationError(f"weights: tensor {name} must have exactly 'shape' and 'data'")
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.ndim != 1 or data.size != int(np.prod(shape, dtype=np.int64)):
            raise ValidationError(f"weights: tensor {name} has {data.size} values for shape {list(shape)}")
        tensors[name] = Tensor(data.reshape(shape))
    return ModelWeights(cfg, tensors)


def save_weights(weights: ModelWeights, path) -> None:
    write_text(path, weights_to_json(weights))


def load_weights(path) -> ModelWeights:
    return weights_from_json(read_text(path))


# --------------------------------------------------------------------------
# Positions and timestep


def rope_positions(h: int, w: int) -> np.ndarray:
    """(row, col) of every image token, row-major. Shared by image and condition tokens."""
    if h < 1 or w < 1:
        raise ShapeError(f"grid must be at least 1x1, got {h}x{w}")
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1)


def text_positions(h: int, w: int, m: int) -> np.ndarray:
    """Instruction tokens sit on the diagonal past the grid, one step apart."""
    p = max(h, w) + np.arange(m)
    return np.stack([p, p], axis=1)


def rope_tables(positions: np.ndarray, width: int, base: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin of shape (n, width): first half rotates by row, second by column."""
    if width % 4:
        raise ShapeError(f"rotary width {width} must be divisible by 4")
    quarter = width // 4
    freqs = base ** (-np.arange(quarter) / quarter)
    pos = np.asarray(positions, dtype=np.float64)
    ang = np.concatenate([pos[:, :1] * freqs, pos[:, 1:2] * freqs], axis=1)
    ang = np.repeat(ang, 2, axis=1)
    return np.cos(ang), np.sin(ang)


def apply_rope(x: Tensor, positions, base: float = 100.0, tape: GradTape | None = None) -> Tensor:
    """Axis-split 2-D rotary encoding on the last axis of ``x`` (..., n, width)."""
    positions = np.asarray(positions)
    if x.shape[-2] != len(positions):
        raise ShapeError(f"{len(positions)} positions for {x.shape[-2]} rows")
    cos, sin = rope_tables(positions, x.shape[-1], base)
    return T.rope_rotate(x, cos, sin, tape=tape)


def timestep_features(t: float, n: int) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"timestep must lie in [0, 1], got {t}")
    half = n // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = 1000.0 * t * freqs
    return np.concatenate([np.cos(arg), np.sin(arg)])


def timestep_embed(weights: ModelWeights, t: float, tape: GradTape | None = None) -> dict[str, Tensor]:
    """Per-stream modulation vectors [shift1, scale1, shift2, scale2], shape (1, 4d)."""
    feats = Tensor(timestep_features(t, weights.config.time_features)[None, :])
    out = {}
    for prefix in stream_prefixes(weights.config):
        m = T.matmul(feats, weights[f"{prefix}.mod_w"], tape)
        out[prefix] = T.add(m, weights[f"{prefix}.mod_b"], tape)
    return out


# --------------------------------------------------------------------------
# Attention bias


def attention_bias_matrix(gamma: float, n_image: int, n_text: int, n_cond: int) -> np.ndarray:
    """Additive pre-softmax bias over the sequence [image; text; cond].

    ``log(gamma)`` at every (image-or-text query, condition key) entry and 0
    elsewhere; ``gamma == 0`` gives ``-inf`` there.
    """
    if not gamma >= 0:
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    n = n_image + n_text + n_cond
    bias = np.zeros((n, n))
    value = math.log(gamma) if gamma > 0 else -math.inf
    bias[: n_image + n_text, n_image + n_text :] = value
    return bias


@dataclass
class AttentionTrace:
    """Instruction-to-image attention per layer, head-averaged.

    ``matrices[l]`` is (M, N): each row is one instruction query's
    post-softmax weight on the N image keys. ``row_totals[l]`` is that row's
    mass over all keys (1 up to rounding).
    """

    h: int
    w: int
    labels: list[str] = field(default_factory=list)
    matrices: list[np.ndarray] = field(default_factory=list)
    row_totals: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


@dataclass
class ForwardResult:
    logits: Tensor
    trace: AttentionTrace | None


# --------------------------------------------------------------------------
# Attention kernels


def _score_chunks(qa, ka, va, dh):
    """exp(qa @ ka) @ va in row chunks; returns normalized outputs and row sums."""
    n_heads, nq = qa.shape[:2]
    nk = ka.shape[2]
    acc = np.empty((n_heads, nq, dh + 1))
    # reused buffer: fresh allocations of this size cost a page-fault storm per chunk
    sbuf = np.empty((ATTN_CHUNK, nk))
    for hd in range(n_heads):
        kh, vh = ka[hd], va[hd]
        for lo in range(0, nq, ATTN_CHUNK):
            hi = min(lo + ATTN_CHUNK, nq)
            s = sbuf[: hi - lo]
            np.matmul(qa[hd, lo:hi], kh, out=s)
            np.exp(s, out=s)
            np.matmul(s, vh, out=acc[hd, lo:hi])
    den = acc[..., dh].copy()
    return acc[..., :dh] / acc[..., dh:], den


def _fused_attention(q, k, v, cond_k, cond_v, log_gamma, capture_start):
    """Untaped attention, processed in row chunks to stay cache-resident.

    The stabilizing shift is the Cauchy-Schwarz bound |q_i| max_j |k_j| (plus
    any positive bias) rather than the exact row max, and both the shift and
    the condition bias are folded into the score matmul as extra columns. The
    row sums come out of the value matmul through a ones column. Rows whose
    sum underflows are redone with the exact max.

    Returns (out, captured) where ``captured`` is the head-summed normalized
    weight of rows ``capture_start:`` (None if there are none).
    """
    n_heads, nq, dh = q.shape
    if cond_k is not None:
        k = np.concatenate([k, cond_k], axis=1)
        v = np.concatenate([v, cond_v], axis=1)
    nk = k.shape[1]
    cond_start = nk - (0 if cond_k is None else cond_k.shape[1])
    bias = np.zeros(nk)
    biased = cond_k is not None and bool(log_gamma)
    if biased:
        bias[cond_start:] = log_gamma
    qs = q * (1.0 / math.sqrt(dh))
    shift = max(log_gamma, 0.0) if biased else 0.0
    bound = np.sqrt((qs * qs).sum(-1)) * np.sqrt((k * k).sum(-1)).max(-1, keepdims=True) + shift
    q_cols = [qs, -bound[..., None]]
    k_rows = [np.swapaxes(k, 1, 2), np.ones((n_heads, 1, nk))]
    if biased:
        # no bias row at all when log(gamma) == 0, so gamma = 1 runs exactly the unbiased arithmetic
        q_cols.append(np.ones((n_heads, nq, 1)))
        k_rows.append(np.broadcast_to(bias, (n_heads, 1, nk)))
    qa = np.concatenate(q_cols, axis=-1)
    ka = np.concatenate(k_rows, axis=1)
    va = np.concatenate([v, np.ones((n_heads, nk, 1))], axis=-1)
    # underflowed rows divide 0 by 0 here and are recomputed below
    with np.errstate(invalid="ignore", divide="ignore"):
        out, den = _score_chunks(qa, ka, va, dh)

    def weights_rows(hd, rows):
        e = np.exp(qa[hd, rows] @ ka[hd])
        return e / den[hd, rows, None]

    for hd, row in zip(*np.nonzero(den < _UNDERFLOW)):
        exact = qs[hd, row] @ ka[hd, :dh] + bias
        e = np.exp(exact - exact.max())
        # patch the underflowed row with the exact-max result
        den[hd, row] = e.sum()
        qa[hd, row, dh] = -exact.max()
        out[hd, row] = (e @ v[hd]) / den[hd, row]

    captured = None
    if capture_start < nq:
        rows = np.arange(capture_start, nq)
        captured = sum(weights_rows(hd, rows) for hd in range(n_heads))
    return out, captured


def _taped_attention(q, k, v, cond_k, cond_v, log_gamma, capture_start, tape):
    dh = q.shape[-1]
    if cond_k is not None:
        k = T.concat([k, cond_k], axis=1, tape=tape)
        v = T.concat([v, cond_v], axis=1, tape=tape)
    scores = T.scale(T.matmul(q, T.transpose(k, tape), tape), 1.0 / math.sqrt(dh), tape)
    if cond_k is not None and log_gamma:
        bias = np.zeros(k.shape[1])
        bias[k.shape[1] - cond_k.shape[1] :] = log_gamma
        scores = T.add_const(scores, bias, tape)
    p = T.softmax_rows(scores, tape)
    out = T.matmul(p, v, tape)
    captured = p.data[:, capture_start:, :].sum(axis=0) if capture_start < q.shape[1] else None
    return out, captured


def _attention(q, k, v, cond, log_gamma, capture_start, tape):
    cond_k, cond_v = cond if cond is not None else (None, None)
    if tape is None:
        o, cap = _fused_attention(
            q.data, k.data, v.data,
            None if cond_k is None else cond_k.data, None if cond_v is None else cond_v.data,
            log_gamma, capture_start,
        )
        return Tensor(o), cap
    return _taped_attention(q, k, v, cond_k, cond_v, log_gamma, capture_start, tape)


# --------------------------------------------------------------------------
# Blocks


@dataclass
class _Stream:
    x: Tensor
    prefix: str
    mod: Tensor
    cos: np.ndarray
    sin: np.ndarray


def _modnorm(x, gain, mod, which, d, tape):
    shift = T.narrow(mod, 1, 2 * which * d, (2 * which + 1) * d, tape)
    scl = T.narrow(mod, 1, (2 * which + 1) * d, (2 * which + 2) * d, tape)
    hn = T.rms_norm(x, gain, tape=tape)
    return T.add(T.mul(hn, T.add_const(scl, 1.0, tape), tape), shift, tape)


def _heads(x, n_heads, tape):
    n, d = x.shape
    return T.permute(T.reshape(x, (n, n_heads, d // n_heads), tape), (1, 0, 2), tape)


def _merge(x, tape):
    n_heads, n, dh = x.shape
    return T.reshape(T.permute(x, (1, 0, 2), tape), (n, n_heads * dh), tape)


def _qkv(weights, s: _Stream, tape):
    cfg = weights.config
    p = s.prefix
    hn = _modnorm(s.x, weights[f"{p}.norm1"], s.mod, 0, cfg.d, tape)
    q = _heads(T.matmul(hn, weights[f"{p}.wq"], tape), cfg.heads, tape)
    k = _heads(T.matmul(hn, weights[f"{p}.wk"], tape), cfg.heads, tape)
    v = _heads(T.matmul(hn, weights[f"{p}.wv"], tape), cfg.heads, tape)
    q = T.rope_rotate(q, s.cos, s.sin, tape)
    k = T.rope_rotate(k, s.cos, s.sin, tape)
    return q, k, v


def _finish(weights, s: _Stream, attn_out, tape):
    cfg = weights.config
    p = s.prefix
    x = T.add(s.x, T.matmul(_merge(attn_out, tape), weights[f"{p}.wo"], tape), tape)
    hn = _modnorm(x, weights[f"{p}.norm2"], s.mod, 1, cfg.d, tape)
    hid = T.silu(T.matmul(hn, weights[f"{p}.w1"], tape), tape)
    return T.add(x, T.matmul(hid, weights[f"{p}.w2"], tape), tape)


def _block(weights, streams: list[_Stream], cond_kv, log_gamma, capture_text, tape):
    """One attention + MLP block over streams whose queries see all their keys.

    ``cond_kv`` are extra (bias-carrying) keys/values. ``capture_text``: the
    last stream is the instruction stream and its attention is returned.
    """
    qkv = [_qkv(weights, s, tape) for s in streams]
    sizes = [s.x.shape[0] for s in streams]
    if len(streams) == 1:
        q, k, v = qkv[0]
    else:
        q = T.concat([a[0] for a in qkv], axis=1, tape=tape)
        k = T.concat([a[1] for a in qkv], axis=1, tape=tape)
        v = T.concat([a[2] for a in qkv], axis=1, tape=tape)
    total = sum(sizes)
    capture_start = total - sizes[-1] if capture_text else total
    out, captured = _attention(q, k, v, cond_kv, log_gamma, capture_start, tape)
    new = []
    start = 0
    for s, n in zip(streams, sizes):
        part = out if len(streams) == 1 else T.narrow(out, 1, start, start + n, tape)
        new.append(_finish(weights, s, part, tape))
        start += n
    return new, (k, v), captured


def encode_condition(weights: ModelWeights, cond: TokenGrid, tape: GradTape | None = None):
    """Run the condition stream (timestep 0) and return per-block rotated keys and values."""
    cfg = weights.config
    _check_cond(cfg, cond)
    cos, sin = rope_tables(rope_positions(cond.h, cond.w), cfg.head_dim, cfg.rope_base)
    mod0 = timestep_embed(weights, 0.0, tape)
    x = T.take_rows(weights["tok_emb"], cond.tokens, tape)
    cache = []
    for prefix in [f"mm{b}.img" for b in range(cfg.mm_blocks)] + [f"sm{b}" for b in range(cfg.sm_blocks)]:
        (x_new,), kv, _ = _block(weights, [_Stream(x, prefix, mod0[prefix], cos, sin)], None, 0.0, False, tape)
        cache.append(kv)
        x = x_new
    return cache


def _check_cond(cfg: ModelConfig, cond):
    if cond.codebook_size != cfg.codebook_size:
        raise ValidationError(f"condition grid uses K={cond.codebook_size}, model expects {cfg.codebook_size}")
    if np.any(np.asarray(cond.tokens) >= cfg.codebook_size):
        raise ValidationError("condition grid contains MASK tokens")


def forward(
    weights: ModelWeights,
    masked,
    instr: InstructionTokens,
    cond: TokenGrid | None,
    t: float,
    gamma: float = 1.0,
    capture: bool = False,
    tape: GradTape | None = None,
    cond_cache=None,
) -> ForwardResult:
    """Codebook logits (N, K) for every image position, plus the attention trace.

    ``masked`` may contain MASK ids. ``cond=None`` runs without a condition
    stream; ``gamma == 0`` takes the same path. ``cond_cache`` reuses the
    output of :func:`encode_condition` for ``cond``.
    """
    cfg = weights.config
    if not isinstance(masked, (TokenGrid, MaskedGrid)):
        raise ValidationError("masked input must be a token grid")
    if masked.codebook_size != cfg.codebook_size:
        raise ValidationError(f"grid uses K={masked.codebook_size}, model expects {cfg.codebook_size}")
    if not gamma >= 0:
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"timestep must lie in [0, 1], got {t}")
    m = instr.m
    if m > cfg.max_text:
        raise ValidationError(f"instruction has {m} tokens, model allows {cfg.max_text}")
    if instr.ids.max() >= cfg.vocab_size or instr.ids.min() < 0:
        raise ValidationError(f"instruction id outside vocabulary of size {cfg.vocab_size}")
    if cond is not None:
        if (cond.h, cond.w) != (masked.h, masked.w):
            raise ShapeError(f"condition grid is {cond.h}x{cond.w}, image grid is {masked.h}x{masked.w}")
        _check_cond(cfg, cond)

    use_cond = cond is not None and gamma > 0
    return _forward(weights, masked, instr, cond if use_cond else None, t, math.log(gamma) if use_cond else None,
                    capture, tape, cond_cache)


def _forward(weights, masked, instr, cond, t, log_gamma, capture, tape, cond_cache) -> ForwardResult:
    """Forward after validation. ``log_gamma=None`` leaves out the condition bias entirely."""
    cfg = weights.config
    m = instr.m
    use_cond = cond is not None
    if use_cond and cond_cache is None:
        cond_cache = encode_condition(weights, cond, tape)

    h, w = masked.h, masked.w
    img_cos, img_sin = rope_tables(rope_positions(h, w), cfg.head_dim, cfg.rope_base)
    txt_cos, txt_sin = rope_tables(text_positions(h, w, m), cfg.head_dim, cfg.rope_base)
    mod = timestep_embed(weights, t, tape)
    x_img = T.take_rows(weights["tok_emb"], masked.tokens, tape)
    x_txt = T.take_rows(weights["word_emb"], instr.ids, tape)
    n = h * w
    trace = AttentionTrace(h, w) if capture else None

    def record(label, captured):
        if trace is not None and captured is not None:
            avg = captured / cfg.heads
            trace.labels.append(label)
            trace.matrices.append(np.ascontiguousarray(avg[:, :n]))
            trace.row_totals.append(avg.sum(axis=1))

    for b in range(cfg.mm_blocks):
        streams = [
            _Stream(x_img, f"mm{b}.img", mod[f"mm{b}.img"], img_cos, img_sin),
            _Stream(x_txt, f"mm{b}.txt", mod[f"mm{b}.txt"], txt_cos, txt_sin),
        ]
        kv = cond_cache[b] if use_cond else None
        (x_img, x_txt), _, captured = _block(weights, streams, kv, log_gamma, capture, tape)
        record(f"mm{b}", captured)
    for b in range(cfg.sm_blocks):
        p = f"sm{b}"
        streams = [_Stream(x_img, p, mod[p], img_cos, img_sin)]
        if cfg.sm_text:
            streams.append(_Stream(x_txt, p, mod[p], txt_cos, txt_sin))
        kv = cond_cache[cfg.mm_blocks + b] if use_cond else None
        new, _, captured = _block(weights, streams, kv, log_gamma, capture and cfg.sm_text, tape)
        if cfg.sm_text:
            x_img, x_txt = new
            record(p, captured)
        else:
            (x_img,) = new

    hn = T.rms_norm(x_img, weights["final_norm"], tape=tape)
    logits = T.add(T.matmul(hn, weights["out_w"], tape), weights["out_b"], tape)
    return ForwardResult(logits, trace)
