"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a :class:`TapeNode` on its output when
at least one input requires a gradient. :func:`backward` replays the recorded
nodes in reverse creation order, which is a valid topological order because a
node can only reference tensors that existed before it.

Precision is a process-wide setting (``float32`` for training, ``float64`` for
gradient checks); use :func:`precision` to switch temporarily.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import BackwardError, DivisionGuardError, ShapeError

__all__ = [
    "Tensor",
    "TapeNode",
    "backward",
    "no_grad",
    "precision",
    "get_dtype",
    "set_precision",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "linear",
    "conv2d",
    "relu",
    "concat",
    "sum",
    "mean",
    "sq_norm",
    "l2_normalize",
    "softmax",
    "log_softmax",
    "exp",
    "log",
    "softplus",
    "clamp_max",
    "reshape",
    "take",
    "pick",
    "rowdot",
]

_DTYPES = {32: np.float32, 64: np.float64}
_dtype = np.float32
_grad_enabled = True
_seq = itertools.count()


def get_dtype():
    return _dtype


def set_precision(bits: int) -> None:
    global _dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _DTYPES[bits]


@contextmanager
def precision(bits: int):
    """Temporarily switch the default floating precision."""
    previous = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(32 if previous is np.float32 else 64)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class TapeNode:
    """One recorded op: its kind, its inputs and the rule mapping output grad to input grads."""

    __slots__ = ("op", "parents", "backward_fn", "seq")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_seq)

    @property
    def consumed(self) -> bool:
        return self.backward_fn is None


class Tensor:
    """Row-major array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or _dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(op: str, out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- backward


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor needing it.

    The tape is released afterwards; a second call on the same graph raises,
    as does a call while any reachable leaf still holds a gradient from an
    earlier pass (reset it with :func:`zero_grad`).
    """
    if loss.data.size != 1:
        raise BackwardError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    leaves: list[Tensor] = []
    stack = [loss]
    seen = {id(loss)}
    while stack:
        t = stack.pop()
        if t.node is None:
            leaves.append(t)
            continue
        if t.node.consumed:
            raise BackwardError(
                f"tape through op '{t.node.op}' was already backpropagated; rebuild the graph"
            )
        nodes[id(t)] = t
        for p in t.node.parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    stale = [t.name or repr(t) for t in leaves if t.grad is not None]
    if stale:
        raise BackwardError(f"gradients were not reset before backward: {stale[:5]}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = sorted(nodes.values(), key=lambda t: t.node.seq, reverse=True)
    for t in order:
        g = grads.pop(id(t), None)
        node = t.node
        if g is None:
            node.backward_fn = None
            continue
        t.grad = g
        parent_grads = node.backward_fn(g)
        node.backward_fn = None
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in leaves:
        g = grads.pop(id(t), None)
        if g is not None:
            t.grad = np.array(g, dtype=t.data.dtype).reshape(t.shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _record("softplus", out.astype(d.dtype), (x,), lambda g: (g * sig,))


def clamp_max(x: Tensor, limit: float) -> Tensor:
    """min(x, limit); clamped entries pass no gradient."""
    keep = x.data <= limit
    out = np.where(keep, x.data, limit).astype(x.dtype)
    return _record("clamp_max", out, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="expected (n,k) @ (k,m)")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias for x of shape (n, in) and weight of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape, detail="expected (n,in) and (out,in)")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("linear", weight.shape, bias.shape, detail="bias must be (out,)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _record("linear", out, parents, bw)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * ho : stride, : stride * wo : stride]
    # (n, ho, wo, c, k, k) -> rows are output positions
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (batch, channels, height, width) and ``weight`` is
    (out_channels, channels, k, k). No dilation, no groups.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="expected NCHW input and OCkk weight")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c or kh != kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="channel or kernel mismatch")
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias must be (out_channels,)")
    if stride < 1 or pad < 0 or int(stride) != stride or int(pad) != pad:
        raise ValueError("conv2d: stride must be a positive integer and pad a non-negative integer")
    k = kh
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return _record("conv2d", out, parents, bw)


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for d, (s, r) in enumerate(zip(t.shape, ref)) if d != ax):
            raise ShapeError("concat", ref, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def take(x: Tensor, index) -> Tensor:
    """Rows of ``x`` selected by an integer index array (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or (index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0])):
        raise ShapeError("take", x.shape, index.shape, detail="index out of range")

    def bw(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _record("take", x.data[index], (x,), bw)


def pick(x: Tensor, index) -> Tensor:
    """x[r, index[r]] for each row r of a 2-D tensor."""
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError("pick", x.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ShapeError("pick", x.shape, index.shape, detail="column index out of range")
    rows = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[rows, index] = g
        return (out,)

    return _record("pick", x.data[rows, index], (x,), bw)


# ---------------------------------------------------------------- reductions


def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _record("sum", np.asarray(out), (x,), lambda g: (_expand(g, x.shape, axis, keepdims),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        return (_expand(g, x.shape, axis, keepdims) / count,)

    return _record("mean", np.asarray(out, dtype=x.dtype), (x,), bw)


def sq_norm(x: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    """Squared Euclidean norm along ``axis`` (all entries if ``axis`` is None)."""
    out = np.square(x.data).sum(axis=axis, keepdims=keepdims)

    def bw(g):
        return (2.0 * x.data * _expand(g, x.shape, axis, keepdims),)

    return _record("sq_norm", np.asarray(out), (x,), bw)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner products of two (n, d) tensors."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError("rowdot", a.shape, b.shape)
    return sum(mul(a, b), axis=1)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / sqrt(sum(x^2) + eps) along ``axis``."""
    sq = np.square(x.data).sum(axis=axis, keepdims=True)
    if eps == 0 and np.any(sq == 0):
        raise DivisionGuardError("l2_normalize: zero-norm vector with eps=0")
    r = np.sqrt(sq + eps)
    out = x.data / r

    def bw(g):
        dot = (g * x.data).sum(axis=axis, keepdims=True)
        return (g / r - x.data * dot / (r * r * r),)

    return _record("l2_normalize", out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)
