"""Minimal reverse-mode differentiation over dense float64 numpy arrays.

Every primitive builds its output ``Tensor`` together with a closure that maps
the upstream gradient to gradients of its inputs.  ``backward`` walks the
recorded graph in reverse topological order and accumulates into leaves.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite value in leaf tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(ComputationRecord.trace(self), self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by primitive '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    factor = np.where(pos, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data > lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- structural

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def _scatter_matrix(index: np.ndarray, n: int) -> np.ndarray:
    """(n, len(index)) one-hot matrix: row r sums the positions whose index is r."""
    m = np.zeros((n, len(index)))
    m[index, np.arange(len(index))] = 1.0
    return m


def _scatter(x: np.ndarray, index: np.ndarray, n: int, ax: int) -> np.ndarray:
    moved = np.moveaxis(x, ax, -1)
    return np.moveaxis(moved @ _scatter_matrix(index, n).T, -1, ax)


def take(a: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather ``a`` along ``axis`` at integer positions ``index`` (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)
    ax = axis % a.ndim
    return _make(np.take(a.data, index, axis=ax), (a,),
                 lambda g: (_scatter(g, index, a.shape[ax], ax),), "take")


def segment_sum(a: Tensor, segments: np.ndarray, n_segments: int, axis: int = 0) -> Tensor:
    """Sum slices of ``a`` along ``axis`` into ``n_segments`` buckets."""
    segments = np.asarray(segments, dtype=np.intp)
    ax = axis % a.ndim
    if a.shape[ax] != len(segments):
        raise ShapeError(f"segment_sum: axis length {a.shape[ax]} vs {len(segments)} segment ids")
    return _make(_scatter(a.data, segments, n_segments, ax), (a,),
                 lambda g: (np.take(g, segments, axis=ax),), "segment_sum")


def segment_softmax(scores: Tensor, segments: np.ndarray, n_segments: int, axis: int = 0) -> Tensor:
    """Normalized exponential of ``scores`` within each segment along ``axis``.

    ``exp(s_j) / sum_{u in seg(j)} exp(s_u)``.  The per-segment maximum is
    subtracted first; it cancels in the ratio.
    """
    segments = np.asarray(segments, dtype=np.intp)
    ax = axis % scores.ndim
    x = np.moveaxis(scores.data, ax, 0)
    seg_max = np.full((n_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(seg_max, segments, x)
    e = np.exp(x - seg_max[segments])
    denom = _scatter(e, segments, n_segments, 0)
    out = e / denom[segments]

    def bw(g):
        gm = np.moveaxis(g, ax, 0)
        dot = _scatter(gm * out, segments, n_segments, 0)
        return (np.moveaxis(out * (gm - dot[segments]), 0, ax),)

    return _make(np.moveaxis(out, 0, ax), (scores,), bw, "segment_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # shared weight: fold the batch axes into one 2-D product
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), bw2, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Cross-correlation along the last axis with zero 'same' padding.

    ``x``: (N, C_in, L), ``w``: (C_out, C_in, k), ``b``: (C_out,).
    Output: (N, C_out, L).
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    n, c_in, length = x.shape
    k = w.shape[2]
    left = (k - 1) // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (left, k - 1 - left)))
    # cols[n, c, j, l] = padded[n, c, l + j]
    cols = np.stack([padded[:, :, j:j + length] for j in range(k)], axis=2)
    out = np.einsum("oij,nijl->nol", w.data, cols, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None]

    def bw(g):
        gw = np.einsum("nol,nijl->oij", g, cols, optimize=True)
        gcols = np.einsum("oij,nol->nijl", w.data, g, optimize=True)
        gpad = np.zeros_like(padded)
        for j in range(k):
            gpad[:, :, j:j + length] += gcols[:, :, j, :]
        gx = gpad[:, :, left:left + length]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv1d")


# ---------------------------------------------------------------- layers with modes

def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


class RunningStats:
    """Mutable running mean/variance used by batch normalization."""

    def __init__(self, width: int):
        self.mean = np.zeros(width)
        self.var = np.ones(width)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize over every axis but the last (the feature axis)."""
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = mean(x, axes, keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axes, keepdims=True)
        n = int(np.prod([x.shape[a] for a in axes]))
        unbiased = var.data.reshape(-1) * n / max(n - 1, 1)
        stats.mean = (1 - momentum) * stats.mean + momentum * mu.data.reshape(-1)
        stats.var = (1 - momentum) * stats.var + momentum * unbiased
        xhat = centered * power(var + eps, -0.5)
    else:
        xhat = (x - stats.mean) * (1.0 / np.sqrt(stats.var + eps))
    return xhat * gamma + beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, -1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, -1, keepdims=True)
    return centered * power(var + eps, -0.5) * gamma + beta


def primitive_set() -> dict[str, Callable]:
    """Catalog of the differentiable primitives exposed by this engine."""
    return {
        "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div,
        "scale": scale, "power": power, "exp": exp, "log": log, "sigmoid": sigmoid,
        "sum": sum_, "mean": mean, "concat": concat, "reshape": reshape,
        "transpose": transpose, "getitem": getitem, "take": take,
        "segment_sum": segment_sum, "segment_softmax": segment_softmax,
        "softmax": softmax, "leaky_relu": leaky_relu, "relu": relu,
        "clamp_min": clamp_min, "conv1d": conv1d, "batch_norm": batch_norm,
        "layer_norm": layer_norm, "dropout": dropout,
    }


# ---------------------------------------------------------------- backward pass

class ComputationRecord:
    """Topologically ordered primitive applications leading to one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationRecord":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def entries(self) -> list[tuple[str, list[int], int]]:
        """(op, input ids, output id) for every application, in order."""
        return [(n.op, [id(p) for p in n._parents], id(n)) for n in self.nodes if n._parents]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(record: ComputationRecord, output: Tensor) -> None:
    if output.data.size != 1:
        raise BackwardError(f"backward needs a scalar output, got shape {output.shape}")
    if not record.nodes or record.nodes[-1] is not output:
        raise BackwardError("record does not end at this output; run the forward pass first")
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_difference_check(function: Callable[[Tensor], Tensor], point: np.ndarray,
                            step: float = 1e-5,
                            analytic: np.ndarray | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``analytic`` overrides the gradient from ``backward`` (used to test the
    checker itself against a deliberately wrong gradient).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=DTYPE)
    if analytic is None:
        x = Tensor(point.copy(), requires_grad=True)
        out = function(x)
        out.backward()
        analytic = np.zeros_like(point) if x.grad is None else x.grad
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar(function, point)
        flat[i] = orig - step
        fm = _scalar(function, point)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    return relative_error(analytic, numeric)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, c = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(c)), 1e-12)
    return float(np.max(np.abs(a - c) / denom))


def _scalar(function, point) -> float:
    with no_grad():
        try:
            val = function(Tensor(point.copy()))
        except NonFiniteError as exc:
            raise NonFiniteError(f"function is non-finite at perturbed point: {exc}") from None
    v = float(np.asarray(val.data).reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError("function is non-finite at perturbed point")
    return v


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
