"""Dense NCHW tensor type and the forward/backward numerical kernels.

All ops are pure functions of their inputs (training-mode batch norm excepted:
it mutates running statistics).  Convolution uses the cross-correlation
convention (no kernel flip).  Default precision is float32; pass float64
arrays for verification-grade tolerances.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autograd import active_tape, record

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes or layouts disagree."""


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; definitions live in the functional ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# naming scopes and cost instrumentation (used by crin.analysis)
# ---------------------------------------------------------------------------

_SCOPE: list[str] = []
_COST_TRACKER = None  # set by analysis.CostTracker


@contextmanager
def scope(name: str):
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def current_scope() -> str:
    return ".".join(_SCOPE) if _SCOPE else "<top>"


def _track(macs: int = 0, elems: int = 0) -> None:
    if _COST_TRACKER is not None:
        _COST_TRACKER.add(current_scope(), macs, elems)


def _set_cost_tracker(tracker) -> None:
    global _COST_TRACKER
    _COST_TRACKER = tracker


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, inputs: tuple, op: str, backward_factory) -> Tensor:
    """Build the output tensor and record the node if anyone needs gradients."""
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg)
    if rg and active_tape() is not None:
        record(op, inputs, out, backward_factory())
    return out


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    y = a.data + b.data
    _track(elems=y.size)

    def factory():
        ash, bsh = a.data.shape, b.data.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))

    return _make(y, (a, b), "add", factory)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    y = a.data - b.data
    _track(elems=y.size)

    def factory():
        ash, bsh = a.data.shape, b.data.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))

    return _make(y, (a, b), "sub", factory)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    y = a.data * b.data
    _track(elems=y.size)

    def factory():
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _make(y, (a, b), "mul", factory)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    y = a.data / b.data
    _track(elems=y.size)

    def factory():
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g / bd, ad.shape),
                          _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _make(y, (a, b), "div", factory)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    _track(elems=y.size)

    def factory():
        mask = x.data > 0
        return lambda g: (g * mask,)

    return _make(y, (x,), "relu", factory)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    y = np.empty_like(z)
    pos = z >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)
    _track(elems=y.size)

    def factory():
        yd = y
        return lambda g: (g * yd * (1.0 - yd),)

    return _make(y, (x,), "sigmoid", factory)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)
    _track(elems=x.data.size)

    def factory():
        xsh = x.data.shape

        def bwd(g):
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, xsh).copy(),)

        return bwd

    return _make(np.asarray(y), (x,), "sum", factory)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.mean(axis=axis, keepdims=keepdims)
    _track(elems=x.data.size)

    def factory():
        xsh = x.data.shape
        count = x.data.size // max(np.asarray(y).size, 1)

        def bwd(g):
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, xsh) / count,)

        return bwd

    return _make(np.asarray(y), (x,), "mean", factory)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to 1 within 1e-6."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    _track(elems=3 * y.size)

    def factory():
        yd = y

        def bwd(g):
            dot = (g * yd).sum(axis=axis, keepdims=True)
            return ((g - dot) * yd,)

        return bwd

    return _make(y, (x,), "softmax", factory)


# ---------------------------------------------------------------------------
# layout ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple) -> Tensor:
    y = x.data.reshape(shape)

    def factory():
        xsh = x.data.shape
        return lambda g: (g.reshape(xsh),)

    return _make(y, (x,), "reshape", factory)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    y = x.data[idx].copy()

    def factory():
        xsh = x.data.shape

        def bwd(g):
            full = np.zeros(xsh, dtype=g.dtype)
            full[idx] = g
            return (full,)

        return bwd

    return _make(y, (x,), "narrow", factory)


def channel_concat(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ShapeError("channel_concat needs at least one tensor")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or t.data.shape[0] != base[0] or t.data.shape[2:] != base[2:]:
            raise ShapeError(
                f"channel_concat layout mismatch: {t.data.shape} vs {base}")
    y = np.concatenate([t.data for t in tensors], axis=1)

    def factory():
        sizes = [t.data.shape[1] for t in tensors]

        def bwd(g):
            out, off = [], 0
            for s in sizes:
                out.append(g[:, off:off + s])
                off += s
            return tuple(out)

        return bwd

    return _make(y, tensors, "channel_concat", factory)


def channel_split(x: Tensor, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    """Exact inverse of :func:`channel_concat` on matching layouts."""
    if sum(sizes) != x.data.shape[1]:
        raise ShapeError(
            f"channel_split sizes {tuple(sizes)} do not sum to channel count "
            f"{x.data.shape[1]}")
    parts, off = [], 0
    for s in sizes:
        parts.append(narrow(x, 1, off, s))
        off += s
    return tuple(parts)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad_h: int = 0
    pad_w: int = 0
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels % self.groups:
            raise ShapeError(
                f"in_channels {self.in_channels} not divisible by groups {self.groups}")
        if self.out_channels % self.groups:
            raise ShapeError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel_h: int,
             kernel_w: int | None = None, stride: int = 1, groups: int = 1,
             has_bias: bool = True) -> "ConvSpec":
        """'Same' padding for odd kernels: pad = (k - 1) / 2 per axis."""
        kw = kernel_h if kernel_w is None else kernel_w
        return cls(in_channels, out_channels, kernel_h, kw, stride,
                   (kernel_h - 1) // 2, (kw - 1) // 2, groups, has_bias)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """2-D cross-correlation with grouping, zero padding, and uniform stride."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(
            f"conv2d input channels {c} do not match spec.in_channels {spec.in_channels}")
    cpg = spec.in_channels // spec.groups
    opg = spec.out_channels // spec.groups
    wshape = (spec.out_channels, cpg, spec.kernel_h, spec.kernel_w)
    if weight.shape != wshape:
        raise ShapeError(
            f"conv2d weight shape {weight.shape} does not match expected {wshape} "
            f"(out_channels, in_channels/groups, kernel_h, kernel_w)")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(
            f"conv2d bias shape {bias.shape} does not match ({spec.out_channels},)")

    kh, kw, s = spec.kernel_h, spec.kernel_w, spec.stride
    out_h = (h + 2 * spec.pad_h - kh) // s + 1
    out_w = (w + 2 * spec.pad_w - kw) // s + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d spatial extent {h}x{w} too small for kernel {kh}x{kw} "
            f"with padding {spec.pad_h}x{spec.pad_w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (spec.pad_h, spec.pad_h),
                         (spec.pad_w, spec.pad_w)))
    # gather kernel taps as strided slices: cols[n, c, i, j, oh, ow]
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * out_h:s, j:j + s * out_w:s]
    g_, p_ = spec.groups, out_h * out_w
    cols_m = cols.reshape(n, g_, cpg * kh * kw, p_)
    w_m = weight.data.reshape(g_, opg, cpg * kh * kw)
    y = np.matmul(w_m[None], cols_m)  # (n, g, opg, p)
    y = y.reshape(n, spec.out_channels, out_h, out_w)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)
    _track(macs=n * out_h * out_w * spec.out_channels * cpg * kh * kw)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def factory():
        need_x = x.requires_grad
        need_w = weight.requires_grad

        def bwd(g):
            gm = g[:, :, :out_h, :out_w].reshape(n, g_, opg, p_)
            gw = gx = gb = None
            if need_w:
                gw = np.einsum("ngop,ngkp->gok", gm, cols_m).reshape(
                    spec.out_channels, cpg, kh, kw)
            if need_x:
                dcols = np.matmul(np.swapaxes(w_m, 1, 2)[None], gm)
                dcols = dcols.reshape(n, c, kh, kw, out_h, out_w)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += dcols[:, :, i, j]
                gx = gxp[:, :, spec.pad_h:spec.pad_h + h, spec.pad_w:spec.pad_w + w]
                if spec.pad_h or spec.pad_w:
                    gx = gx.copy()
            if bias is not None:
                gb = g.sum(axis=(0, 2, 3))
                return (gx, gw, gb)
            return (gx, gw)

        return bwd

    return _make(y, inputs, "conv2d", factory)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: ``(N, D) @ (D_out, D)^T + bias``."""
    if x.ndim != 2:
        raise ShapeError(f"linear input must be 2-D, got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"linear weight shape {weight.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"linear bias shape {bias.shape} does not match ({weight.shape[0]},)")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    _track(macs=x.shape[0] * weight.shape[0] * weight.shape[1])

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def factory():
        def bwd(g):
            gx = g @ weight.data
            gw = g.T @ x.data
            if bias is not None:
                return (gx, gw, g.sum(axis=0))
            return (gx, gw)

        return bwd

    return _make(y, inputs, "linear", factory)


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel; output shape (N, C, 1, 1)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError("global_avg_pool requires non-empty spatial extent")
    y = x.data.mean(axis=(2, 3), keepdims=True)
    _track(elems=y.size)

    def factory():
        return lambda g: (np.broadcast_to(g / (h * w), x.data.shape).copy(),)

    return _make(y, (x,), "global_avg_pool", factory)


def _lerp_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    """Row-interpolation matrix for 2x bilinear upsampling (align_corners=False)."""
    a = np.zeros((out_size, in_size), dtype=dtype)
    for o in range(out_size):
        c = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(c))
        t = c - i0
        lo = min(max(i0, 0), in_size - 1)
        hi = min(max(i0 + 1, 0), in_size - 1)
        a[o, lo] += 1.0 - t
        a[o, hi] += t
    return a


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    """Double spatial resolution; ``nearest`` replicates, ``bilinear`` uses the
    align-corners-false convention."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("upsample2x requires non-empty spatial extent")
    if mode == "nearest":
        y = x.data.repeat(2, axis=2).repeat(2, axis=3)
        _track(elems=y.size)

        def factory():
            return lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _make(y, (x,), "upsample2x_nearest", factory)
    if mode == "bilinear":
        ah = _lerp_matrix(2 * h, h, x.dtype)
        aw = _lerp_matrix(2 * w, w, x.dtype)
        y = np.einsum("oh,nchw,pw->ncop", ah, x.data, aw, optimize=True)
        _track(elems=y.size)

        def factory():
            return lambda g: (np.einsum("oh,ncop,pw->nchw", ah, g, aw, optimize=True),)

        return _make(y, (x,), "upsample2x_bilinear", factory)
    raise ShapeError(f"unknown upsample mode {mode!r}")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with batch statistics and updates the running
    mean/var in place (those tensors never receive gradients).  Eval mode is a
    pure affine map using the running statistics.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm {name} shape {t.shape} does not match ({c},)")
    rs = (1, c, 1, 1)
    _track(elems=2 * x.data.size)
    if training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * (m / max(m - 1, 1))
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(rs)) * ivar.reshape(rs)
        y = gamma.data.reshape(rs) * xhat + beta.data.reshape(rs)

        def factory():
            def bwd(g):
                gr = gamma.data.reshape(rs) * ivar.reshape(rs)
                sum_g = g.sum(axis=(0, 2, 3)).reshape(rs)
                sum_gx = (g * xhat).sum(axis=(0, 2, 3)).reshape(rs)
                gx = gr * (g - sum_g / m - xhat * sum_gx / m)
                return (gx,
                        (g * xhat).sum(axis=(0, 2, 3)),
                        g.sum(axis=(0, 2, 3)),
                        None, None)

            return bwd

        return _make(y, (x, gamma, beta, running_mean, running_var),
                     "batch_norm_train", factory)

    ivar = 1.0 / np.sqrt(running_var.data + eps)
    xhat = (x.data - running_mean.data.reshape(rs)) * ivar.reshape(rs)
    y = gamma.data.reshape(rs) * xhat + beta.data.reshape(rs)

    def factory():
        def bwd(g):
            gx = g * (gamma.data * ivar).reshape(rs)
            return (gx,
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)),
                    None, None)

        return bwd

    return _make(y, (x, gamma, beta, running_mean, running_var),
                 "batch_norm_eval", factory)
