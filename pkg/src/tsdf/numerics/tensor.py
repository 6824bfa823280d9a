"""Dense tensors with a reverse-mode tape.

Every differentiable operation records a :class:`TapeNode` on the result
when at least one input requires a gradient.  :meth:`Tensor.backward`
walks the resulting DAG in reverse topological order, visiting each node
once.

Arithmetic runs in the module's current default precision (float32 unless
changed with :func:`precision`).  The float64 mode exists so that test
oracles can re-evaluate the same expressions without cancellation error.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "ShapeError",
    "NonFiniteError",
    "precision",
    "no_grad",
    "default_dtype",
    "as_tensor",
]

EXP_CLAMP = 30.0

_state = {"dtype": np.float32, "grad_enabled": True}
_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operator."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """An operator produced NaN or Inf."""

    def __init__(self, op: str, node_id: int):
        self.op = op
        self.node_id = node_id
        super().__init__(f"non-finite value produced by {op} (node {node_id})")


def default_dtype():
    return _state["dtype"]


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the working precision (e.g. ``np.float64``)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording tape nodes."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)
    id: int = field(default_factory=lambda: next(_node_ids))


def _cast(a) -> np.ndarray:
    return np.asarray(a, dtype=_state["dtype"])


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


class Tensor:
    """An immutable dense array with optional gradient tracking.

    Parameters
    ----------
    data : array_like
        Values; converted to the current default precision.
    requires_grad : bool
        Whether :meth:`backward` should accumulate into ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _cast(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # --- graph machinery -------------------------------------------------

    @staticmethod
    def _make(op: str, data: np.ndarray, inputs: tuple, backward, **saved) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.node = None
        track = _state["grad_enabled"] and any(t.requires_grad for t in inputs)
        out.requires_grad = track
        if track:
            out.node = TapeNode(op, inputs, backward, saved)
            if not np.isfinite(data).all():
                raise NonFiniteError(op, out.node.id)
        elif not np.isfinite(data).all():
            raise NonFiniteError(op, next(_node_ids))
        return out

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward", self.shape, (), detail="implicit seed needs a scalar")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError("backward", self.shape, grad.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.inputs:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            in_grads = t.node.backward(g)
            for p, pg in zip(t.node.inputs, in_grads):
                if pg is None or not p.requires_grad:
                    continue
                if not np.isfinite(pg).all():
                    raise NonFiniteError(t.node.op + " (backward)", t.node.id)
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # --- operator sugar --------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.data, b.data)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._make("div", out, (a, b), bw)


def exp(a) -> Tensor:
    """``exp`` with its argument clamped to ``[-30, 30]``."""
    a = as_tensor(a)
    inside = np.abs(a.data) <= EXP_CLAMP
    out = np.exp(np.clip(a.data, -EXP_CLAMP, EXP_CLAMP))
    return Tensor._make("exp", out, (a,), lambda g: (g * out * inside,))


def log(a, floor: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    x = np.maximum(a.data, floor)
    return Tensor._make("log", np.log(x), (a,), lambda g: (g * (a.data > floor) / x,))


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly zero is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt(np.maximum(a.data, 0))

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0),)

    return Tensor._make("sqrt", out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return Tensor._make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Differentiable clamp; the gradient passes where ``lo <= a <= hi``."""
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi).astype(a.data.dtype, copy=False)
    return Tensor._make("clamp", out, (a,), lambda g: (g * inside,))


# --- shape ------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return Tensor._make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return Tensor._make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    basic = all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make("getitem", np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make("concat", out, ts, bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return Tensor._make("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# --- reductions -------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.sum(axis=axes, keepdims=keepdims) / a.data.dtype.type(n)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor._make("mean", np.asarray(out), (a,), bw)


def std(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation; zero-variance slices get a zero gradient."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    mu = a.data.sum(axis=axes, keepdims=True) / a.data.dtype.type(n)
    centered = a.data - mu
    s = np.sqrt((centered * centered).sum(axis=axes, keepdims=True) / a.data.dtype.type(n))
    out = s if keepdims else np.squeeze(s, axis=axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        safe = np.where(s > 0, s, 1)
        return (np.where(s > 0, g * centered / (n * safe), 0),)

    return Tensor._make("std", np.asarray(out), (a,), bw)


def l1_norm(a) -> Tensor:
    return sum_(abs_(a))


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return sqrt(sum_(mul(a, a), axis, keepdims))


def squared_error(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("squared_error", a.shape, b.shape)
    d = a.data - b.data
    n = d.size
    out = np.asarray((d * d).sum() / d.dtype.type(n))

    def bw(g):
        ga = g * 2 * d / n
        return ga, -ga

    return Tensor._make("squared_error", out, (a, b), bw)


# --- linear algebra / spatial -------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make("matmul", a.data @ b.data, (a, b), bw)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with OIHW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    ho = (xp.shape[2] - kh) // s + 1
    wo = (xp.shape[3] - kw) // s + 1
    # columns are (kernel offset, channel) major so each image is one matmul
    cols = np.empty((n, kh * kw, c, ho, wo), dtype=np.result_type(xp, w.data))
    for i in range(kh):
        for j in range(kw):
            cols[:, i * kw + j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    cols = cols.reshape(n, kh * kw * c, ho * wo)
    w2 = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError("conv2d", w.shape, b.shape, detail="bias")
        out += b.data.reshape(1, o, 1, 1)
        inputs = (x, w, b)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = None
        if x.requires_grad:
            gc = np.matmul(w2.T, g2).reshape(n, kh * kw, c, ho, wo)
            gxp = np.zeros(xp.shape, dtype=gc.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gc[:, i * kw + j]
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        if w.requires_grad:
            gw2 = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw2.reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make("conv2d", out, inputs, bw)


def pixel_shuffle(x, r: int = 2) -> Tensor:
    """Rearrange ``(N, C*r*r, H, W)`` into ``(N, C, H*r, W*r)``."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ShapeError("pixel_shuffle", x.shape, (r, r))
    n, cr, h, w = x.shape
    c = cr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def bw(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return Tensor._make("pixel_shuffle", out, (x,), bw)


def _pool_view(op, x, k):
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(op, x.shape, (k, k), detail="spatial dims must be divisible by the kernel")
    n, c, h, w = x.shape
    return x.data.reshape(n, c, h // k, k, w // k, k)


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    v = _pool_view("avg_pool2d", x, k)
    out = v.mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return Tensor._make("avg_pool2d", out, (x,), bw)


def max_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    v = _pool_view("max_pool2d", x, k)
    n, c, ho, _, wo, _ = v.shape
    flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        gx = gf.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (gx,)

    return Tensor._make("max_pool2d", out, (x,), bw)


def upsample_nearest(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest", x.shape, (k, k))
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)

    return Tensor._make("upsample_nearest", out, (x,), bw)


def spatial_softmax(x) -> Tensor:
    """Softmax over the last two (spatial) axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("spatial_softmax", x.shape, (), detail="need at least 2 dims")
    m = x.data.max(axis=(-2, -1), keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=(-2, -1), keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=(-2, -1), keepdims=True)),)

    return Tensor._make("spatial_softmax", out, (x,), bw)


def interp_matrix(n_in: int, n_out: int, dtype=None) -> np.ndarray:
    """Bilinear (half-pixel centers, edge-clamped) resampling matrix ``(n_out, n_in)``."""
    dtype = dtype or _state["dtype"]
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Bilinear resampling of the last two axes to ``size``."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    ah = interp_matrix(h, size[0], x.data.dtype)
    aw = interp_matrix(w, size[1], x.data.dtype)
    out = ah @ x.data @ aw.T

    def bw(g):
        return (ah.T @ g @ aw,)

    return Tensor._make("resize_bilinear", out, (x,), bw)
