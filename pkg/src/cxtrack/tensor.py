"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every trainable computation in the tracker flows through the primitives in
this module, so one backward sweep over a recorded graph yields exact
gradients for all of them. Everything is 64-bit: the point of this library
is verifiability (finite-difference checks at 1e-6), not throughput.

Usage::

    w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    with Graph() as g:
        loss = (linear(x, w) * linear(x, w)).sum()
    g.backward(loss)
    w.grad            # ndarray, same shape as w

Outside an active ``Graph`` nothing is recorded and ops run as plain numpy.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "checked_mode",
    "concat",
    "gather_rows",
    "softmax_rows",
    "layer_norm",
    "linear",
    "dropout",
    "grad_check",
]

ArrayLike = Union["Tensor", np.ndarray, float, int, list, tuple]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_state = threading.local()


def _graphs() -> list:
    if not hasattr(_state, "graphs"):
        _state.graphs = []
    return _state.graphs


def _is_checked() -> bool:
    return getattr(_state, "checked", True)


class checked_mode:
    """Context manager toggling NaN/Inf rejection at tensor construction.

    On by default. Training turns it off for speed; tests leave it on so a
    numerical blow-up fails at the op that produced it.
    """

    def __init__(self, enabled: bool):
        self.enabled = bool(enabled)

    def __enter__(self):
        self.prev = _is_checked()
        _state.checked = self.enabled
        return self

    def __exit__(self, *exc):
        _state.checked = self.prev
        return False


class Tensor:
    """Immutable-by-convention float64 array plus an optional gradient buffer.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` is filled in
    by ``Graph.backward`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if _is_checked() and arr.size and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values rejected in checked mode")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        grad = "grad" if self.requires_grad else "nograd"
        return f"Tensor(shape={self.data.shape}, {grad})"

    # -- operator sugar ------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    # -- method forms of the reductions/elementwise ops -----------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int, keepdims=False):
        return amax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _scalar_error(t):
    raise ShapeError(f"expected scalar tensor, got shape {t.data.shape}")


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded primitive application: op tag, inputs, output, pullback."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Tape of primitive applications in execution order.

    Execution order is a topological order by construction, so the backward
    pass visits each node exactly once, in reverse. A graph belongs to one
    evaluation; never share one between threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _graphs().append(self)
        return self

    def __exit__(self, *exc):
        stack = _graphs()
        if not stack or stack[-1] is not self:
            raise RuntimeError("graph context exited out of order")
        stack.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and sweep the tape in reverse.

        Grads of every tensor touched by this graph are reset first, so
        repeated calls produce bitwise-identical results.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        for node in self.nodes:
            node.output.grad = None
            for t in node.inputs:
                t.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward_fn(g)


def _record(op: str, inputs: Sequence[Tensor], output: Tensor,
            backward_fn: Callable[[np.ndarray], None]) -> None:
    stack = _graphs()
    if stack and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        stack[-1].nodes.append(Node(op, inputs, output, backward_fn))


def _accum(t: Tensor, g: np.ndarray) -> None:
    # grads are accumulated out of place and never mutated, so storing the
    # incoming array directly (even a readonly broadcast view) is safe
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    _record("add", (a, b), out, bw)
    return out


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    _record("sub", (a, b), out, bw)
    return out


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    _record("mul", (a, b), out, bw)
    return out


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    _record("div", (a, b), out, bw)
    return out


def neg(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def bw(g):
        _accum(a, -g)

    _record("neg", (a,), out, bw)
    return out


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    _record("matmul", (a, b), out, bw)
    return out


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def transpose(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    out = Tensor(a.data.T)

    def bw(g):
        _accum(a, g.T)

    _record("transpose", (a,), out, bw)
    return out


def reshape(a: ArrayLike, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    _record("reshape", (a,), out, bw)
    return out


def concat(parts: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    _record("concat", ts, out, bw)
    return out


def gather_rows(a: ArrayLike, idx) -> Tensor:
    """Select rows by integer index; duplicate indices accumulate in backward."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index array")
    out = Tensor(a.data[idx])

    def bw(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    _record("gather_rows", (a,), out, bw)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: ArrayLike, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    _record("sum", (a,), out, bw)
    return out


def tmean(a: ArrayLike, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.data.shape))

    _record("mean", (a,), out, bw)
    return out


def amax(a: ArrayLike, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; gradient routes to the first argmax on ties."""
    a = _as_tensor(a)
    arg = np.argmax(a.data, axis=axis)
    out = Tensor(np.max(a.data, axis=axis, keepdims=keepdims))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(arg, axis), g, axis)
        _accum(a, buf)

    _record("amax", (a,), out, bw)
    return out


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    pos = a.data > 0

    def bw(g):
        _accum(a, g * pos)

    _record("relu", (a,), out, bw)
    return out


def exp(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bw(g):
        _accum(a, g * out.data)

    _record("exp", (a,), out, bw)
    return out


def log(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def bw(g):
        _accum(a, g / a.data)

    _record("log", (a,), out, bw)
    return out


def sqrt(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def bw(g):
        _accum(a, g * 0.5 / out.data)

    _record("sqrt", (a,), out, bw)
    return out


def sigmoid(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    # stable two-sided form, never exponentiates a positive argument
    d = a.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(y)

    def bw(g):
        _accum(a, g * out.data * (1.0 - out.data))

    _record("sigmoid", (a,), out, bw)
    return out


def clamp(a: ArrayLike, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes only where the value was not clipped."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside)

    _record("clamp", (a,), out, bw)
    return out


def huber(a: ArrayLike, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: quadratic inside |x| <= delta, linear outside."""
    a = _as_tensor(a)
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    absa = np.abs(a.data)
    quad = absa <= delta
    out = Tensor(np.where(quad, 0.5 * a.data * a.data, delta * (absa - 0.5 * delta)))

    def bw(g):
        _accum(a, g * np.where(quad, a.data, delta * np.sign(a.data)))

    _record("huber", (a,), out, bw)
    return out


# ---------------------------------------------------------------------------
# model-facing composite ops
# ---------------------------------------------------------------------------

def softmax_rows(x: ArrayLike) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by per-row max subtraction.

    The subtracted max is treated as a constant: softmax is shift-invariant,
    so this changes no derivative while keeping exp() in range.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    if x.data.shape[1] < 1:
        raise ShapeError("softmax_rows needs at least one column")
    shift = Tensor(x.data.max(axis=1, keepdims=True))
    e = exp(sub(x, shift))
    s = tsum(e, axis=1, keepdims=True)
    return div(e, s)


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError("layer_norm expects a 2-D tensor")
    c = x.data.shape[1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError(f"layer_norm affine shape must be ({c},)")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = tmean(x, axis=1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def linear(x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """Affine map x @ w (+ b)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def dropout(x: ArrayLike, p: float, training: bool = True, rng=None) -> Tensor:
    """Inverted dropout: zero each element w.p. p, scale survivors by 1/(1-p).

    Inference mode and p=0 return the input unchanged (bitwise identity).
    The mask is drawn from ``rng`` (Generator or int seed), so a fixed seed
    reproduces the exact same pattern.
    """
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng for determinism")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = rng.random(x.data.shape) >= p
    scale = 1.0 / (1.0 - p)
    out = Tensor(x.data * keep * scale)

    def bw(g):
        _accum(x, g * keep * scale)

    _record("dropout", (x,), out, bw)
    return out


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x0: ArrayLike, h: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference grads.

    ``f`` must map a tensor to a scalar tensor and be deterministic (seed any
    internal randomness). Relative error uses an absolute floor of 1e-8 so
    near-zero gradients do not blow the ratio up.
    """
    base = np.array(_as_tensor(x0).data, copy=True)
    x = Tensor(base, requires_grad=True)
    with Graph() as g:
        y = f(x)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    g.backward(y)
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base)).item()
        flat[i] = orig - h
        fm = f(Tensor(base)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
