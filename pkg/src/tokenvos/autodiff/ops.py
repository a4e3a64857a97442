"""Differentiable operations on :class:`Tensor`.

All functions accept Tensors or array-likes; constants never receive grads.
"""

from __future__ import annotations

import functools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import GeometryError, NumericalError, ShapeError, Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype), dtype=ref.data.dtype)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _const_like(b, a)
    if isinstance(b, Tensor):
        return _const_like(a, b), b
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_node(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_node(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def max(a, axis: int) -> Tensor:  # noqa: A001
    """Max over one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_node(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; backward scatters with ``np.add.at``."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out, copy=True), (a,), backward)


def gather_rows(a, index, axis: int = 0) -> Tensor:
    """Select rows along ``axis`` by an integer index vector (order preserved)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        np.add.at(full, tuple(sl), g)
        return (full,)

    return make_node(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0]
    axis = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise ShapeError(f"concat along axis {axis}: shapes {ref.shape} and {t.shape} disagree")
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return make_node(out, tuple(ts), backward)


def split(a, sizes, axis: int = 0) -> list:
    a = as_tensor(a)
    axis = axis % a.ndim
    pieces = []
    lo = 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, lo + n)
        pieces.append(getitem(a, tuple(sl)))
        lo += n
    return pieces


def detach(a) -> Tensor:
    return as_tensor(a).detach()


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def _check_finite(x: np.ndarray, what: str) -> None:
    if np.isnan(x).any():
        raise NumericalError(f"{what}: NaN in input")


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction."""
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), backward)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax(a, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), backward)


def weighted_softmax(scores, weights) -> Tensor:
    """Softmax over the last axis where key ``j`` carries a multiplicative weight.

    ``out_j = w_j exp(s_j) / sum_k w_k exp(s_k)``. With weights in {0, 1} this is
    exactly attention restricted to the weighted-in keys; the weight path is
    differentiable so straight-through selections can be trained. ``weights``
    broadcasts against ``scores``.
    """
    s, w = _pair(scores, weights)
    _check_finite(s.data, "weighted_softmax")
    z = s.data - s.data.max(axis=-1, keepdims=True)
    e = np.exp(z) * w.data
    tot = e.sum(axis=-1, keepdims=True)
    tot_safe = np.where(tot > 0, tot, 1.0)
    out = e / tot_safe

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        gs = out * (g - inner) if s.requires_grad else None
        gw = None
        if w.requires_grad:
            ez = np.exp(z) / tot_safe
            gw = _unbroadcast(ez * (g - inner), w.shape)
        return gs, gw

    return make_node(out, (s, w), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with affine scale/shift."""
    x, gamma = _pair(x, gamma)
    beta = _const_like(beta, x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (B, Cin, H, W) or (Cin, H, W); ``w``: (Cout, Cin, k, k)."""
    x, w = _pair(x, w)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    if k == stride and padding == 0:
        out = _patchify_conv(x, w)
    else:
        out = _window_conv(x, w, stride, padding)
    if b is not None:
        out = add(out, reshape(_const_like(b, x), (1, -1, 1, 1)))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def _patchify_conv(x: Tensor, w: Tensor) -> Tensor:
    B, cin, H, W = x.shape
    cout, _, p, _ = w.shape
    if H % p or W % p:
        raise GeometryError(f"conv2d: {H}x{W} input not divisible by stride {p}")
    gh, gw = H // p, W // p
    cols = x.data.reshape(B, cin, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, cin * p * p)
    wm = w.data.reshape(cout, cin * p * p)
    out = (cols @ wm.T).transpose(0, 2, 1).reshape(B, cout, gh, gw)

    def backward(g):
        gm = g.reshape(B, cout, gh * gw).transpose(0, 2, 1)
        gx = gw_ = None
        if x.requires_grad:
            gc = gm @ wm
            gx = gc.reshape(B, gh, gw, cin, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(x.shape)
        if w.requires_grad:
            gw_ = np.einsum("bnc,bnk->ck", gm, cols).reshape(w.shape)
        return gx, gw_

    return make_node(np.ascontiguousarray(out), (x, w), backward)


def _window_conv(x: Tensor, w: Tensor, stride: int, padding: int) -> Tensor:
    B, cin, H, W = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Hp, Wp = xp.shape[2:]
    if (Hp - k) % stride or (Wp - k) % stride:
        raise GeometryError(f"conv2d: padded size {Hp}x{Wp} does not tile with kernel {k} stride {stride}")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, cin * k * k)
    wm = w.data.reshape(cout, -1)
    out = (cols @ wm.T).transpose(0, 2, 1).reshape(B, cout, Ho, Wo)

    def backward(g):
        gm = g.reshape(B, cout, Ho * Wo).transpose(0, 2, 1)
        gx = gw_ = None
        if x.requires_grad:
            gc = (gm @ wm).reshape(B, Ho, Wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gc[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if w.requires_grad:
            gw_ = np.einsum("bnc,bnk->ck", gm, cols).reshape(w.shape)
        return gx, gw_

    return make_node(np.ascontiguousarray(out), (x, w), backward)


def bilinear_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(n_in*factor, n_in) interpolation matrix, half-pixel centres, edge clamped."""
    return _bilinear_matrix(int(n_in), int(factor)).astype(dtype)


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    dtype = np.float64
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        src = (i + 0.5) / factor - 0.5
        src = float(np.clip(src, 0.0, n_in - 1))
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(x, factor: int) -> Tensor:
    """Bilinear upsampling of the last two axes by an integer factor."""
    x = as_tensor(x)
    uh = Tensor(bilinear_matrix(x.shape[-2], factor, x.dtype), dtype=x.dtype)
    uw = Tensor(bilinear_matrix(x.shape[-1], factor, x.dtype).T.copy(), dtype=x.dtype)
    return matmul(matmul(uh, x), uw)


def straight_through(hard, soft) -> Tensor:
    """Forward value of ``hard``, gradient of ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard.data if isinstance(hard, Tensor) else hard, dtype=soft.dtype)
    return make_node(hard.copy(), (soft,), lambda g: (g,))
