"""Reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. Recording order is already a topological order,
so :meth:`Tape.backward` is a single reverse sweep.

    >>> x = Tensor(np.array(3.0), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> tape.backward(y)
    >>> float(x.grad)
    6.0
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import sparse

_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Records operations for one backward pass.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records. A tape is not thread-safe, but separate tapes in separate
    threads are independent.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append((out, inputs, backward))

    def backward(self, output: Tensor, seed=None) -> None:
        """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ValueError(f"seed shape {seed.shape} does not match output {output.shape}")
        if output.is_leaf:
            if output.requires_grad:
                _accumulate_leaf(output, seed)
            return
        pending: dict[int, np.ndarray] = {id(output): seed}
        for out, inputs, fn in reversed(self.nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    _accumulate_leaf(t, gi)
                else:
                    key = id(t)
                    pending[key] = pending[key] + gi if key in pending else gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, t.shape)
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    out.is_leaf = False
    if needs and _ACTIVE:
        _ACTIVE[-1].record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    """Square root; the derivative at 0 is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _result(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


# ---------------------------------------------------------------------------
# shape and contraction
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _segment_sum(values: np.ndarray, ids: np.ndarray, num: int) -> np.ndarray:
    p = len(ids)
    op = sparse.csr_matrix((np.ones(p), (ids, np.arange(p))), shape=(num, p))
    return np.asarray(op @ values.reshape(p, -1)).reshape((num,) + values.shape[1:])


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    row_gather = isinstance(key, np.ndarray) and key.ndim == 1 and key.dtype.kind in "iu"
    basic = all(
        isinstance(k, (slice, int, type(None), type(Ellipsis)))
        for k in (key if isinstance(key, tuple) else (key,))
    )

    def backward(g):
        if row_gather:
            return (_segment_sum(g, key, a.shape[0]),)
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(a.data[key], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    return _result(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# pooling over observed cells
# ---------------------------------------------------------------------------


def segment_mean(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Mean of the rows of ``a`` grouped by ``segment_ids``.

    Empty segments produce a zero row and receive no gradient.
    """
    a = as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (a.shape[0],):
        raise ValueError(f"segment ids {ids.shape} do not match rows of {a.shape}")
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    out = _segment_sum(a.data, ids, num_segments)
    scale = inv.reshape((-1,) + (1,) * (a.ndim - 1))
    out *= scale

    def backward(g):
        return ((g * scale)[ids],)

    return _result(out, (a,), backward)


def _masked_mean_dense(a: Tensor, mask: np.ndarray, axis) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if a.shape[: mask.ndim] != mask.shape:
        raise ValueError(f"mask {mask.shape} does not match tensor {a.shape}")
    w = mask.astype(np.float64).reshape(mask.shape + (1,) * (a.ndim - mask.ndim))
    counts = w.sum(axis=axis)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    out = (a.data * w).sum(axis=axis) * inv

    def backward(g):
        return (np.expand_dims(g * inv, axis) * w,)

    return _result(out, (a,), backward)


def masked_row_mean(a, mask) -> Tensor:
    """(m, n, d) -> (m, d): per row, average over the columns where ``mask`` is true."""
    return _masked_mean_dense(as_tensor(a), mask, axis=1)


def masked_col_mean(a, mask) -> Tensor:
    """(m, n, d) -> (n, d): per column, average over the rows where ``mask`` is true."""
    return _masked_mean_dense(as_tensor(a), mask, axis=0)


def masked_global_mean(a, mask) -> Tensor:
    """(m, n, d) -> (d,): average over every cell where ``mask`` is true."""
    return _masked_mean_dense(as_tensor(a), mask, axis=(0, 1))


def mean_subtract_normalize(a) -> Tensor:
    """Subtract the per-channel mean taken over the leading (cell) axis."""
    a = as_tensor(a)
    mu = a.data.mean(axis=0, keepdims=True)
    return _result(a.data - mu, (a,), lambda g: (g - g.mean(axis=0, keepdims=True),))


def bce(scores, labels, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy; scores are clamped to [eps, 1 - eps]."""
    s = as_tensor(scores)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != s.shape:
        raise ValueError(f"labels {y.shape} do not match scores {s.shape}")
    p = np.clip(s.data, eps, 1.0 - eps)
    n = max(p.size, 1)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / n
    inside = (s.data > eps) & (s.data < 1.0 - eps)

    def backward(g):
        d = (-y / p + (1.0 - y) / (1.0 - p)) / n
        return (g * np.where(inside, d, 0.0),)

    return _result(np.asarray(out), (s,), backward)


# ---------------------------------------------------------------------------
# checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the given tensors to a scalar tensor. Relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``. Inputs must sit away from kinks (e.g. ReLU
    at zero); there the result is meaningless.
    """
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        y = f(*inputs)
    tape.backward(y)
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = float(f(*inputs).data)
            flat[k] = orig - step
            fm = float(f(*inputs).data)
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[k]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
