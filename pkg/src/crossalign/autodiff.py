"""Dense tensor arithmetic with reverse-mode differentiation on an explicit tape.

The engine is numpy-backed. Every differentiable operation appends one record
to the active :class:`Tape`; records are created in evaluation order, so the
tape is topologically sorted by construction and :func:`backward` is a single
reverse sweep that visits each node exactly once.

Precision is a process-wide switch: float32 by default (training speed),
float64 for verification runs with tight tolerances. Set it before building
tensors; see :func:`set_float64`.

Every public operation checks its output for NaN/Inf and raises
:class:`~crossalign.errors.NonFiniteError` on violation, so non-finite values
cannot propagate silently.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateVectorError,
    DimensionError,
    NonFiniteError,
    NormalizationError,
    RankError,
)

_FLOAT64 = False

KL_LOG_FLOOR = 1e-8  # clamp below this before any log inside KL
NORM_EPS = 1e-12  # below this a vector counts as having zero direction


def set_float64(enabled: bool) -> None:
    """Switch the process-wide value dtype. Call before creating tensors."""
    global _FLOAT64
    _FLOAT64 = bool(enabled)


def float64_enabled() -> bool:
    return _FLOAT64


def default_dtype() -> np.dtype:
    return np.dtype(np.float64 if _FLOAT64 else np.float32)


@contextmanager
def precision(float64: bool):
    """Temporarily switch precision (used by verification tests)."""
    prev = _FLOAT64
    set_float64(float64)
    try:
        yield
    finally:
        set_float64(prev)


class _Record:
    """One primitive operation: parent node ids plus the saved-activation vjp."""

    __slots__ = ("parents", "vjp")

    def __init__(self, parents: tuple, vjp: Callable | None):
        self.parents = parents
        self.vjp = vjp


_TAPE_STACK: list["Tape | None"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def paused():
    """Run a block without recording onto any tape (results are detached)."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _emit(self, parents: tuple, vjp: Callable | None) -> int:
        self._records.append(_Record(parents, vjp))
        return len(self._records) - 1

    def watch(self, tensor: "Tensor") -> "Tensor":
        """Register ``tensor`` as a tracked leaf (idempotent on this tape)."""
        if tensor.tape is self and tensor.node is not None:
            return tensor
        tensor.tape = self
        tensor.node = self._emit((), None)
        return tensor


class Tensor:
    """A dense n-dimensional real array, optionally attached to a tape.

    ``node`` is the tensor's id on ``tape``; both are None for constants and
    for values produced while no tape is active.
    """

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node: int | None = None, tape: Tape | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tracked = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _node_of(t: Tensor, tape: Tape | None) -> int | None:
    # A node id is only meaningful on the tape that assigned it.
    if tape is not None and t.tape is tape:
        return t.node
    return None


def _make(op: str, out_data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(out_data, op)
    tape = active_tape()
    if tape is None:
        return Tensor(out_data)
    ids = tuple(_node_of(p, tape) for p in parents)
    if all(i is None for i in ids):
        return Tensor(out_data)
    node = tape._emit(ids, vjp)
    return Tensor(out_data, node, tape)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over axes that were added or broadcast to reach its shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _reduce_to(g * b_data, a.shape), _reduce_to(g * a_data, b.shape)

    return _make("mul", out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = _reduce_to(g / b_data, a.shape)
        gb = _reduce_to(-g * a_data / (b_data * b_data), b.shape)
        return ga, gb

    return _make("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (-g,)

    return _make("neg", -a.data, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = _reduce_to(np.matmul(g, np.swapaxes(b_data, -1, -2)), a.shape)
        gb = _reduce_to(np.matmul(np.swapaxes(a_data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make("exp", out, (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    a_data = a.data

    def vjp(g):
        return (g / a_data,)

    return _make("log", out, (a,), vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        # subgradient 0 at exactly 0 keeps hinge-style compositions finite
        return (np.where(out > 0, g * 0.5 / np.where(out > 0, out, 1.0), 0.0),)

    return _make("sqrt", out, (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    mask = a.data > 0  # subgradient 0 at the kink

    def vjp(g):
        return (g * mask,)

    return _make("relu", out, (a,), vjp)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def vjp(g):
        return (g * sign,)

    return _make("abs", out, (a,), vjp)


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, floor)
    mask = a.data > floor

    def vjp(g):
        return (g * mask,)

    return _make("clamp_min", out, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _make("clip", out, (a,), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(ax % len(in_shape) for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _make("reshape", a.data.reshape(shape), (a,), vjp)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make("swapaxes", np.swapaxes(a.data, ax1, ax2).copy(), (a,), vjp)


def getitem(a, idx) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; selected regions never alias."""
    a = as_tensor(a)
    in_shape = a.shape

    def vjp(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make("getitem", a.data[idx].copy(), (a,), vjp)


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    in_shape = a.shape

    def vjp(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make("take_rows", a.data[idx].copy(), (a,), vjp)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.shape[axis] for p in parts]
    offsets = np.cumsum(extents)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", out, tuple(parts), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape

    def vjp(g):
        return (_reduce_to(g, in_shape),)

    return _make("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", out, (a,), vjp)


# ---------------------------------------------------------------------------
# composite kernels


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis vector to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: feature width {x.shape} vs gain {gain.shape}, bias {bias.shape}"
        )
    m = mean(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit norm; zero vectors map to zero."""
    x = as_tensor(x)
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    norm = sqrt(sq)
    keep = (norm.data > NORM_EPS).astype(default_dtype())
    # degenerate rows divide by 1 and are zeroed by the mask
    safe = add(mul(norm, keep), 1.0 - keep)
    return div(mul(x, keep), safe)


def kl_divergence(p, q, axis: int = -1, reduce: bool = True) -> Tensor:
    """KL(p || q) along ``axis``; both inputs must be distributions there.

    ``reduce=False`` returns the per-element contributions p * (ln p - ln q),
    which sum to the reduced value. Arguments to the logs are clamped below
    at ``KL_LOG_FLOOR`` so 32-bit softmax underflow cannot produce -inf.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence: shapes differ {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if (t.data < 0).any():
            raise NormalizationError(f"kl_divergence: {name} has negative entries")
        sums = t.data.sum(axis=axis)
        if not np.allclose(sums, 1.0, atol=1e-4, rtol=0):
            raise NormalizationError(
                f"kl_divergence: {name} sums to {sums.min():.6f}..{sums.max():.6f} along axis {axis}"
            )
    contrib = mul(p, sub(log(clamp_min(p, KL_LOG_FLOOR)), log(clamp_min(q, KL_LOG_FLOOR))))
    if reduce:
        return tsum(contrib, axis=axis)
    return contrib


def cosine_similarity(a, b) -> Tensor:
    """Cosine of two 1-D vectors, clamped to [-1, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: expected equal 1-D shapes, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateVectorError(f"cosine_similarity: zero-norm input (|a|={na:.3g}, |b|={nb:.3g})")
    dot = tsum(mul(a, b))
    denom = mul(sqrt(tsum(mul(a, a))), sqrt(tsum(mul(b, b))))
    return clip(div(dot, denom), -1.0, 1.0)


def cosine_matrix(a, b) -> Tensor:
    """All-pairs cosine similarities: rows of ``a`` against rows of ``b``.

    Raises :class:`DegenerateVectorError` if any row has (near-)zero norm;
    unlike :func:`l2_normalize` there is no meaningful zero fallback here.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_matrix: expected [P,d] and [Q,d], got {a.shape} and {b.shape}")
    for name, t in (("a", a), ("b", b)):
        norms = np.linalg.norm(t.data, axis=1)
        if (norms <= NORM_EPS).any():
            raise DegenerateVectorError(f"cosine_matrix: zero-norm row in {name}")
    an = l2_normalize(a, axis=-1)
    bn = l2_normalize(b, axis=-1)
    return clip(matmul(an, swapaxes(bn, -1, -2)), -1.0, 1.0)


def gelu(x) -> Tensor:
    """tanh-approximation GELU; smooth, so finite-difference checks stay tight."""
    x = as_tensor(x)
    c = float(np.sqrt(2.0 / np.pi))
    inner = mul(add(x, mul(mul(mul(x, x), x), 0.044715)), c)
    return mul(mul(x, add(tanh(inner), 1.0)), 0.5)


def l2_distance(a, b) -> Tensor:
    """Euclidean distance along the last axis (plain, unsquared)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l2_distance: shapes differ {a.shape} vs {b.shape}")
    d = sub(a, b)
    return sqrt(tsum(mul(d, d), axis=-1))


# ---------------------------------------------------------------------------
# backward


class Gradients:
    """Result of a backward pass; lookups for untouched tensors return zeros."""

    def __init__(self, tape: Tape, adjoints: list):
        self._tape = tape
        self._adjoints = adjoints

    def wrt(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is self._tape and tensor.node is not None:
            adj = self._adjoints[tensor.node]
            if adj is not None:
                return adj
        return np.zeros_like(tensor.data)


def backward(tape: Tape, root: Tensor) -> Gradients:
    """Reverse sweep from ``root`` (a scalar on ``tape``) to all tracked leaves."""
    if root.data.ndim != 0:
        raise RankError(f"backward: root must be a scalar, got shape {root.shape}")
    if root.tape is not tape or root.node is None:
        raise RankError("backward: root is not recorded on this tape")
    adjoints: list = [None] * len(tape)
    adjoints[root.node] = np.ones_like(root.data)
    for nid in range(root.node, -1, -1):
        g = adjoints[nid]
        if g is None:
            continue
        record = tape._records[nid]
        if record.vjp is None:
            continue  # leaf: keep the accumulated adjoint
        parent_grads = record.vjp(g)
        for pid, pg in zip(record.parents, parent_grads):
            if pid is None or pg is None:
                continue
            if adjoints[pid] is None:
                adjoints[pid] = pg.copy() if pg.base is not None else pg
            else:
                adjoints[pid] = adjoints[pid] + pg
    return Gradients(tape, adjoints)
