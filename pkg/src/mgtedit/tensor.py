"""Dense float64 tensors with an explicit reverse-mode operation record.

Every primitive takes an optional ``tape``. Without one it is a plain numpy
computation; with one, the output and a closure computing parent gradients
are appended to the tape so :func:`backward` can replay them in reverse.
There is no global autograd state.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, TokenIndexError, UsageError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "matmul",
    "add",
    "mul",
    "scale",
    "add_const",
    "transpose",
    "reshape",
    "permute",
    "concat",
    "narrow",
    "take_rows",
    "softmax_rows",
    "rms_norm",
    "silu",
    "rope_rotate",
    "cross_entropy",
    "tsum",
]


class Tensor:
    """Row-major float64 array. ``data`` is a contiguous numpy array."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class GradTape:
    """Ordered record of primitive ops for one forward/backward pass.

    Not thread-safe; concurrent passes need separate tapes.
    """

    def __init__(self):
        self._nodes = []
        self._params = {}
        self._live = set()

    def watch(self, tensor: Tensor, name: str | None = None) -> Tensor:
        key = id(tensor)
        self._params[key] = (name if name is not None else f"param{len(self._params)}", tensor)
        self._live.add(key)
        return tensor

    def tracks(self, tensor: Tensor) -> bool:
        return id(tensor) in self._live

    def _record(self, out, parents, grad_fn):
        if any(id(p) in self._live for p in parents):
            self._nodes.append((out, parents, grad_fn))
            self._live.add(id(out))
        return out

    def __len__(self):
        return len(self._nodes)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse accumulation from a scalar ``loss``.

    Returns one gradient array per watched parameter, keyed by the name given
    to :meth:`GradTape.watch`. Parameters the loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.tracks(loss) or id(loss) in tape._params:
        raise UsageError("loss was not produced under this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, grad_fn in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, grad_fn(g)):
            if pg is None or id(parent) not in tape._live:
                continue
            pg = _unbroadcast(pg, parent.data.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return {
        name: np.array(grads.get(key, np.zeros_like(t.data)), dtype=np.float64).reshape(t.shape)
        for key, (name, t) in tape._params.items()
    }


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    if tape is None:
        return out
    ad, bd = a.data, b.data
    return tape._record(out, (a, b), lambda g: (g @ _swap(bd), _swap(ad) @ g))


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _broadcast_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    if tape is None:
        return out
    return tape._record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _broadcast_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    if tape is None:
        return out
    ad, bd = a.data, b.data
    return tape._record(out, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float, tape: GradTape | None = None) -> Tensor:
    out = Tensor(a.data * c)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c, tape: GradTape | None = None) -> Tensor:
    """``a + c`` where ``c`` is a constant array (no gradient flows into it)."""
    c = np.asarray(c, dtype=np.float64)
    try:
        np.broadcast_shapes(a.shape, c.shape)
    except ValueError:
        raise ShapeError(f"add_const: cannot broadcast {a.shape} with {c.shape}") from None
    out = Tensor(a.data + c)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g,))


def transpose(a: Tensor, tape: GradTape | None = None) -> Tensor:
    """Swap the last two axes."""
    out = Tensor(_swap(a.data))
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (_swap(g),))


def reshape(a: Tensor, shape, tape: GradTape | None = None) -> Tensor:
    old = a.shape
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g.reshape(old),))


def permute(a: Tensor, axes, tape: GradTape | None = None) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    if tape is None:
        return out
    inverse = tuple(np.argsort(axes))
    return tape._record(out, (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis: int = 0, tape: GradTape | None = None) -> Tensor:
    tensors = list(tensors)
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    if tape is None:
        return out
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return tape._record(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def narrow(a: Tensor, axis: int, start: int, stop: int, tape: GradTape | None = None) -> Tensor:
    """Slice ``[start, stop)`` along ``axis``."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index])
    if tape is None:
        return out
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return tape._record(out, (a,), grad_fn)


def take_rows(table: Tensor, idx, tape: GradTape | None = None) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table``."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise TokenIndexError(f"row index out of range [0, {n})")
    out = Tensor(table.data[idx])
    if tape is None:
        return out
    shape = table.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return tape._record(out, (table,), grad_fn)


def softmax_rows(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)
    if tape is None:
        return out
    return tape._record(out, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6, tape: GradTape | None = None) -> Tensor:
    """Scale each row to unit root-mean-square, then multiply by ``gain``."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"rms_norm: gain shape {gain.shape} does not match last dim of {x.shape}")
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    out = Tensor(xhat * gain.data)
    if tape is None:
        return out
    gd = gain.data
    d = xd.shape[-1]

    def grad_fn(g):
        gx = g * gd
        dx = inv * (gx - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d)
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        return dx, dgain

    return tape._record(out, (x, gain), grad_fn)


def silu(x: Tensor, tape: GradTape | None = None) -> Tensor:
    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    out = Tensor(xd * sig)
    if tape is None:
        return out
    return tape._record(out, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))


def _rotate_pairs(x: np.ndarray) -> np.ndarray:
    # (x0, x1) -> (-x1, x0) on consecutive pairs of the last axis
    pairs = x.reshape(*x.shape[:-1], -1, 2)
    out = np.empty_like(pairs)
    out[..., 0] = -pairs[..., 1]
    out[..., 1] = pairs[..., 0]
    return out.reshape(x.shape)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray, tape: GradTape | None = None) -> Tensor:
    """Rotate consecutive pairs of the last axis by precomputed angles.

    ``cos``/``sin`` broadcast against ``x`` and hold each pair's angle twice.
    """
    if x.shape[-1] % 2:
        raise ShapeError(f"rope_rotate: last dim {x.shape[-1]} is odd")
    xd = x.data
    out = Tensor(xd * cos + _rotate_pairs(xd) * sin)
    if tape is None:
        return out
    # rotation transpose is the negated rotation
    return tape._record(out, (x,), lambda g: (g * cos - _rotate_pairs(g * sin),))


def cross_entropy(logits: Tensor, targets, tape: GradTape | None = None) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, K] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {targets.shape[0] if targets.ndim else 0} targets for {n} rows")
    if n == 0:
        raise ShapeError("cross_entropy: no rows")
    if targets.min() < 0 or targets.max() >= k:
        raise TokenIndexError(f"cross_entropy: target outside [0, {k})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(n)
    out = Tensor(np.mean(lse - z[rows, targets]))
    if tape is None:
        return out

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return tape._record(out, (logits,), grad_fn)


def tsum(x: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor(x.data.sum())
    if tape is None:
        return out
    shape = x.shape
    return tape._record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
