"""Reverse-mode automatic differentiation over dense numpy arrays.

Every ``Tensor`` produced by an operation remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Node ids
come from a global monotone counter, so a node always has a larger id than
anything it was computed from and sorting by id gives a topological order.

Shapes must match exactly for elementwise arithmetic.  The only implicit
broadcast allowed is a 0-d (scalar) tensor or Python number against any
shape; everything else goes through ``broadcast_to`` explicitly.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "no_grad", "is_grad_enabled", "tensor", "backward",
    "add", "sub", "mul", "div", "neg", "power", "sqrt", "abs_", "arccos", "clip",
    "sum_", "mean", "reshape", "transpose", "take", "pad", "roll", "concat",
    "broadcast_to", "add_const", "matmul", "axis_matmul", "leaky_relu",
    "layer_norm", "linear", "softmax_lastdim", "conv2d", "concat_channels",
    "cyclic_shift", "window_partition", "window_merge", "make_op",
]

_ids = itertools.count()
_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction on this thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op",
                 "_parents", "_backward", "_is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._is_leaf = True

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], fn: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_ids)
        out.op = op
        out._is_leaf = False
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = fn if track else None
        return out

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar --------------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

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
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def make_op(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn, op: str = "custom") -> Tensor:
    """Register a new graph node; ``fn`` maps the output gradient to parent gradients."""
    return Tensor._result(data, parents, fn, op)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The traversed part of the graph is released afterwards.
    """
    if loss.data.shape != () and loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if node._is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _check_shapes(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.shape == ():
        return b.shape
    if b.shape == ():
        return a.shape
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(out, (a, b),
                   lambda g: (_reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)), "div")


def neg(x: Tensor) -> Tensor:
    return make_op(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return make_op(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),), "pow")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def fn(g):
        # subgradient 0 at the origin keeps zero vectors finite
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return make_op(out, (x,), fn, "sqrt")


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def arccos(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.arccos(xd), (x,), lambda g: (-g / np.sqrt(1.0 - xd * xd),), "arccos")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make_op(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return make_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(out), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(x.data[index]), (x,), fn, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    shape, dtype = x.shape, x.dtype
    axis = axis % x.ndim

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return make_op(np.take(x.data, idx, axis=axis), (x,), fn, "take")


def pad(x: Tensor, widths: Sequence[tuple[int, int]], mode: str = "constant") -> Tensor:
    """Pad with zeros (``constant``) or by index folding (``reflect``, ``symmetric``, ``wrap``)."""
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise ValueError(f"pad: need {x.ndim} (before, after) pairs, got {len(widths)}")
    if mode == "constant":
        slices = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
        return make_op(np.pad(x.data, widths), (x,), lambda g: (g[slices],), "pad")
    out = x
    for axis, (before, after) in enumerate(widths):
        if before or after:
            idx = np.pad(np.arange(x.shape[axis]), (before, after), mode=mode)
            out = take(out, idx, axis)
    return out


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return make_op(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),), "roll")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty list")
    axis = axis % xs[0].ndim
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"concat: extent mismatch {t.shape} vs {ref} off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return make_op(np.concatenate([t.data for t in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    lead = len(shape) - len(src)

    def fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return make_op(np.broadcast_to(x.data, shape).copy(), (x,), fn, "broadcast_to")


def add_const(x: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array that broadcasts against ``x`` (masks, offsets)."""
    out = x.data + const
    if out.shape != x.shape:
        raise ValueError(f"add_const: constant {np.shape(const)} would change shape {x.shape}")
    return make_op(out.astype(x.dtype, copy=False), (x,), lambda g: (g,), "add_const")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch extents must agree or ``b`` must be 2-D."""
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch extents differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op(ad @ bd, (a, b), fn, "matmul")


def axis_matmul(x: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a constant matrix (n_out x n_in) along one axis of ``x``."""
    m = np.asarray(matrix, dtype=x.dtype)
    axis = axis % x.ndim
    if m.ndim != 2 or m.shape[1] != x.shape[axis]:
        raise ValueError(f"axis_matmul: matrix {m.shape} cannot act on axis {axis} of {x.shape}")
    out = np.moveaxis(np.tensordot(x.data, m, axes=([axis], [1])), -1, axis)

    def fn(g):
        return (np.moveaxis(np.tensordot(g, m, axes=([axis], [0])), -1, axis),)

    return make_op(np.ascontiguousarray(out), (x,), fn, "axis_matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    f_out, f_in = weight.shape
    if x.shape[-1] != f_in:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight F_in {f_in}")
    if bias is not None and bias.shape != (f_out,):
        raise ValueError(f"linear: bias shape {bias.shape} != ({f_out},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def fn(g):
        g2 = g.reshape(-1, f_out)
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, f_in)
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, fn, "linear")


# ---------------------------------------------------------------------------
# fused neural-network primitives
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match C={c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def fn(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(xhat * gd + beta.data, (x, gamma, beta), fn, "layer_norm")


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, (x,), fn, "softmax")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Same-size 2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels but weight expects C_in={c_in}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    k = kh
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ValueError(f"conv2d: padding must be {(k - 1) // 2} for a same-size {k}x{k} kernel")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    p = padding
    wd = weight.data
    if k == 1:
        cols = x.data
        out = np.tensordot(wd[:, :, 0, 0], cols, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def fn(g):
        if k == 1:
            w2 = wd[:, :, 0, 0]
            gx = np.tensordot(w2, g, axes=([0], [1])).transpose(1, 0, 2, 3)
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        else:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            q = k - 1 - p
            gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q)))
            gcols = sliding_window_view(gp, (k, k), axis=(2, 3))
            wflip = wd[:, :, ::-1, ::-1]
            gx = np.tensordot(gcols, wflip, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, fn, "conv2d")


# ---------------------------------------------------------------------------
# image-layout helpers used by the windowed attention
# ---------------------------------------------------------------------------

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    for t in xs:
        if t.ndim != 4:
            raise ValueError(f"concat_channels expects NCHW tensors, got {t.shape}")
    return concat(xs, axis=1)


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of the two spatial axes of an NCHW tensor."""
    h, w = x.shape[-2:]
    return roll(x, (dy % h, dx % w), (-2, -1))


def window_partition(x: Tensor, w: int) -> Tensor:
    """[N, C, H, W] -> [N * (H/w) * (W/w), w*w, C]; windows and pixels in row-major order."""
    n, c, h, wd = x.shape
    if h % w or wd % w:
        raise ValueError(f"window_partition: window {w} does not divide extents {h}x{wd}")
    t = x.reshape(n, c, h // w, w, wd // w, w).transpose(0, 2, 4, 3, 5, 1)
    return t.reshape(n * (h // w) * (wd // w), w * w, c)


def window_merge(t: Tensor, w: int, n: int, h: int, wd: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    c = t.shape[-1]
    if t.shape != (n * (h // w) * (wd // w), w * w, c):
        raise ValueError(f"window_merge: {t.shape} inconsistent with N={n}, H={h}, W={wd}, w={w}")
    x = t.reshape(n, h // w, wd // w, w, w, c).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(n, c, h, wd)
