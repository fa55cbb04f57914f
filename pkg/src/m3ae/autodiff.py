"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation used by the model is defined here or built on
``Tensor._make``. Tensors record their parents and a closure that maps the
output gradient to per-parent gradients; ``Tensor.backward`` walks the
reachable nodes in reverse creation order.

Storage is float32 by default. Passing float64 data gives the shadow mode
used for finite-difference gradient checks; ops preserve the input dtype.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

_ids = itertools.count()
_grad_enabled = True
_debug = os.environ.get("M3AE_DEBUG", "") not in ("", "0")
_conv_impl = "im2col"

CONV_IMPLS = ("direct", "im2col")


def set_debug(flag: bool) -> None:
    """Toggle the per-op finite-value check."""
    global _debug
    _debug = bool(flag)


def set_conv_impl(name: str) -> None:
    if name not in CONV_IMPLS:
        raise ValueError(f"unknown conv implementation {name!r}; expected one of {CONV_IMPLS}")
    global _conv_impl
    _conv_impl = name


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-d array plus the bookkeeping needed for backpropagation."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
        self.data = np.ascontiguousarray(np.array(data, dtype=dtype, copy=True))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._id = next(_ids)

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence[Tensor], op: str, backward: BackwardFn) -> Tensor:
        if _debug and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.name = None
        out.op = op
        out._id = next(_ids)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- backprop -------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad)

        grads: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=self.data.dtype)}
        for nid in sorted(nodes, reverse=True):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = nodes[nid]
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.data.shape}")
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg

    # -- operators ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), "sub", lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), "mul", backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return Tensor._make(x.data * c, (x,), "scale", lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), "exp", lambda g: (g * out,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(xd * xd, (x,), "square", lambda g: (g * (2 * xd),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x) for 0 <= slope <= 1; the derivative is 1 or ``slope``."""
    pos = x.data > 0
    s = x.data.dtype.type(slope)
    out = np.where(pos, x.data, x.data * s)
    return Tensor._make(out, (x,), "leaky_relu", lambda g: (np.where(pos, g, g * s),))


# -- reductions ----------------------------------------------------------


def _nonempty(x: Tensor, op: str) -> None:
    if x.data.size == 0:
        raise ShapeError(f"{op}: empty tensor")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    _nonempty(x, "sum")
    shape = x.shape
    return Tensor._make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    _nonempty(x, "mean")
    shape, n = x.shape, x.size
    return Tensor._make(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), "mean", lambda g: (np.full(shape, g / n, dtype=g.dtype),)
    )


def mean_abs(x: Tensor) -> Tensor:
    """Per-element mean of |x|."""
    _nonempty(x, "mean_abs")
    xd, n = x.data, x.size
    out = np.asarray(np.abs(xd).mean(), dtype=x.dtype)
    return Tensor._make(out, (x,), "mean_abs", lambda g: (np.sign(xd) * (g / n),))


def mean_sq(x: Tensor) -> Tensor:
    """Per-element mean of x**2."""
    _nonempty(x, "mean_sq")
    xd, n = x.data, x.size
    out = np.asarray((xd * xd).mean(), dtype=x.dtype)
    return Tensor._make(out, (x,), "mean_sq", lambda g: (xd * (2 * g / n),))


# -- shape ops -----------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return Tensor._make(out, (x,), "reshape", lambda g: (g.reshape(src),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries of ``axis`` starting at ``start``."""
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of size {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return Tensor._make(x.data[idx].copy(), (x,), "narrow", backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ShapeError("concat: no tensors")
    ref = xs[0].shape
    axis = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ outside axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return Tensor._make(out, tuple(xs), "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- dense layers --------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear: expected x[N,F_in] and weight[F_out,F_in], got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features (axis 1) {x.shape[1]} != weight F_in {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, "linear", backward)


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int) -> tuple[int, ...]:
    if x.ndim != 5:
        raise ShapeError(f"conv3d: input must be [N,C,D,H,W], got {x.shape}")
    if w.ndim != 5:
        raise ShapeError(f"conv3d: weight must be [C_out,C_in,k,k,k], got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input channels (axis 1) {x.shape[1]} != weight C_in {w.shape[1]}")
    k = w.shape[2]
    if w.shape[3] != k or w.shape[4] != k or k % 2 == 0:
        raise ShapeError(f"conv3d: kernel must be cubic with odd size, got {w.shape[2:]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d: bias shape {b.shape} != ({w.shape[0]},)")
    if stride < 1 or padding < 0:
        raise ShapeError("conv3d: stride must be >= 1 and padding >= 0")
    out = []
    for name, n in zip("DHW", x.shape[2:]):
        o = (n + 2 * padding - k) // stride + 1
        if o < 1:
            raise ShapeError(f"conv3d: axis {name} of size {n} too small for kernel {k} with padding {padding}")
        out.append(o)
    return tuple(out)


def _im2col(xpT: np.ndarray, k: int, stride: int, out_sp: tuple[int, int, int]) -> np.ndarray:
    """[C, N, Dp, Hp, Wp] -> [C*k^3, N*Do*Ho*Wo], rows ordered (c, a, b, c')."""
    Do, Ho, Wo = out_sp
    win = sliding_window_view(xpT, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, : stride * (Do - 1) + 1 : stride, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 5, 6, 7, 1, 2, 3, 4))
    return cols.reshape(xpT.shape[0] * k ** 3, -1)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           impl: str | None = None) -> Tensor:
    """3D cross-correlation with zero padding.

    ``impl`` selects the kernel: ``"direct"`` accumulates one matrix product
    per kernel tap, ``"im2col"`` gathers all taps into a column matrix and
    does a single product. Both give the same result up to summation order.
    """
    Do, Ho, Wo = _check_conv(x, weight, bias, stride, padding)
    impl = impl or _conv_impl
    if impl not in CONV_IMPLS:
        raise ValueError(f"unknown conv implementation {impl!r}")
    N, Ci, D, H, W = x.shape
    Co, _, k = weight.shape[:3]
    M = N * Do * Ho * Wo
    p, s = padding, stride
    dtype = np.result_type(x.dtype, weight.dtype)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    xpT = np.ascontiguousarray(xp.transpose(1, 0, 2, 3, 4), dtype=dtype)
    wd = weight.data.astype(dtype, copy=False)
    taps = [
        (a, b, c, (slice(None), slice(None),
                   slice(a, a + s * (Do - 1) + 1, s), slice(b, b + s * (Ho - 1) + 1, s), slice(c, c + s * (Wo - 1) + 1, s)))
        for a in range(k) for b in range(k) for c in range(k)
    ]

    if impl == "direct":
        out = np.zeros((Co, M), dtype=dtype)
        for a, b, c, sl in taps:
            out += wd[:, :, a, b, c] @ xpT[sl].reshape(Ci, M)
        cols = None
    else:
        cols = _im2col(xpT, k, s, (Do, Ho, Wo))
        out = wd.reshape(Co, -1) @ cols

    out = out.reshape(Co, N, Do, Ho, Wo).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.data.reshape(1, Co, 1, 1, 1)

    def backward(g):
        g5 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4), dtype=dtype)
        gT = g5.reshape(Co, M)
        gx = None
        if impl == "direct":
            gw = np.zeros_like(wd)
            gxpT = np.zeros_like(xpT) if x.requires_grad else None
            for a, b, c, sl in taps:
                gw[:, :, a, b, c] = gT @ xpT[sl].reshape(Ci, M).T
                if gxpT is not None:
                    gxpT[sl] += (wd[:, :, a, b, c].T @ gT).reshape(Ci, N, Do, Ho, Wo)
            if gxpT is not None:
                gx = gxpT.transpose(1, 0, 2, 3, 4)
                if p:
                    gx = gx[:, :, p:-p, p:-p, p:-p]
        else:
            gw = (gT @ cols.T).reshape(wd.shape)
            if x.requires_grad and s == 1 and p <= k - 1:
                # input gradient = full correlation of g with the flipped kernel
                q = k - 1 - p
                gpad = np.pad(g5, ((0, 0), (0, 0), (q, q), (q, q), (q, q))) if q else g5
                wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)).reshape(Ci, -1)
                gx = (wflip @ _im2col(gpad, k, 1, (D, H, W))).reshape(Ci, N, D, H, W).transpose(1, 0, 2, 3, 4)
            elif x.requires_grad:
                gxpT = np.zeros_like(xpT)
                gcols = (wd.reshape(Co, -1).T @ gT).reshape(Ci, k, k, k, M)
                for a, b, c, sl in taps:
                    gxpT[sl] += gcols[:, a, b, c].reshape(Ci, N, Do, Ho, Wo)
                gx = gxpT.transpose(1, 0, 2, 3, 4)
                if p:
                    gx = gx[:, :, p:-p, p:-p, p:-p]
        grads = [None if gx is None else np.ascontiguousarray(gx, dtype=x.dtype), gw.astype(weight.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)).astype(bias.dtype, copy=False))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, "conv3d", backward)


# -- resampling ----------------------------------------------------------


def _up2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    # align-corners-false x2: out[2i] = .75 x[i] + .25 x[i-1], out[2i+1] = .75 x[i] + .25 x[i+1], edges clamped
    xm = np.moveaxis(x, axis, 0)
    prev = np.concatenate([xm[:1], xm[:-1]], axis=0)
    nxt = np.concatenate([xm[1:], xm[-1:]], axis=0)
    out = np.empty((2 * xm.shape[0],) + xm.shape[1:], dtype=x.dtype)
    out[0::2] = 0.75 * xm + 0.25 * prev
    out[1::2] = 0.75 * xm + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    gm = np.moveaxis(g, axis, 0)
    ge, go = gm[0::2], gm[1::2]
    gx = 0.75 * (ge + go)
    gx[:-1] += 0.25 * ge[1:]
    gx[0] += 0.25 * ge[0]
    gx[1:] += 0.25 * go[:-1]
    gx[-1] += 0.25 * go[-1]
    return np.moveaxis(gx, 0, axis)


def _down2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    xm = np.moveaxis(x, axis, 0)
    return np.moveaxis(0.5 * (xm[0::2] + xm[1::2]), 0, axis)


def _down2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    gm = np.moveaxis(g, axis, 0)
    out = np.empty((2 * gm.shape[0],) + gm.shape[1:], dtype=g.dtype)
    out[0::2] = 0.5 * gm
    out[1::2] = 0.5 * gm
    return np.moveaxis(out, 0, axis)


def resize_trilinear(x: Tensor, factor: float) -> Tensor:
    """Trilinear x2 upsampling or x1/2 downsampling of the last three axes.

    Uses the align-corners-false convention: output voxel j samples the input
    at (j + 0.5) / factor - 0.5, clamped to the valid range.
    """
    if x.ndim < 3:
        raise ShapeError(f"resize_trilinear: need at least 3 axes, got {x.shape}")
    axes = (x.ndim - 3, x.ndim - 2, x.ndim - 1)
    if factor == 2:
        fwd, adj = _up2_axis, _up2_axis_adjoint
    elif factor == 0.5:
        for ax in axes:
            if x.shape[ax] % 2:
                raise ShapeError(f"resize_trilinear: axis {ax} has odd size {x.shape[ax]}; cannot halve")
        fwd, adj = _down2_axis, _down2_axis_adjoint
    else:
        raise ValueError(f"resize_trilinear: factor must be 2 or 0.5, got {factor}")

    out = x.data
    for ax in axes:
        out = fwd(out, ax)

    def backward(g):
        for ax in reversed(axes):
            g = adj(g, ax)
        return (np.ascontiguousarray(g),)

    return Tensor._make(out.astype(x.dtype, copy=False), (x,), f"resize_x{factor}", backward)


def avg_pool3d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling of the last three axes by ``factor``."""
    if factor == 1:
        return x
    lead = x.shape[:-3]
    D, H, W = x.shape[-3:]
    for name, n in zip("DHW", (D, H, W)):
        if n % factor:
            raise ShapeError(f"avg_pool3d: axis {name} of size {n} not divisible by {factor}")
    f = factor
    blocks = x.data.reshape(lead + (D // f, f, H // f, f, W // f, f))
    nl = len(lead)
    out = blocks.mean(axis=(nl + 1, nl + 3, nl + 5)).astype(x.dtype, copy=False)
    inv = x.dtype.type(1.0 / f ** 3)

    def backward(g):
        gb = np.broadcast_to(
            (g * inv).reshape(lead + (D // f, 1, H // f, 1, W // f, 1)), blocks.shape
        )
        return (gb.reshape(x.shape).copy(),)

    return Tensor._make(out, (x,), f"avg_pool{f}", backward)
