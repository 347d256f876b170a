"""Differentiable operations used by the segmentation pipeline.

Image-like tensors are channel-first without a batch axis: ``[c, h, w]``.
Label maps are plain integer arrays ``[h, w]`` holding class ids ``1..C``
with ``0`` as the ignore symbol.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, default_dtype

LOG_FLOOR = 1e-8


class ShapeError(ValueError):
    pass


def _const(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=default_dtype())


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_data = _const(b)
        return Tensor.from_op(a.data + b_data, (a,), lambda g: (_unbroadcast(g, a.shape),))
    out = a.data + b.data
    return Tensor.from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor.from_op(a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,))


def sum_all(a: Tensor) -> Tensor:
    # np.sum uses pairwise summation in a fixed order; repeated calls agree bitwise
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return Tensor.from_op(out, (a,), lambda g: (np.broadcast_to(g, a.shape),))


def add_n(terms: list[Tensor]) -> Tensor:
    """Sum of scalar tensors, accumulated left to right."""
    if not terms:
        raise ValueError("add_n needs at least one term")
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return Tensor.from_op(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def clamped_log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); gradient is zero where the floor is active."""
    clipped = np.maximum(x.data, x.data.dtype.type(floor))
    active = x.data > floor
    return Tensor.from_op(np.log(clipped), (x,), lambda g: (np.where(active, g / clipped, 0.0),))


def one_minus(x: Tensor) -> Tensor:
    return Tensor.from_op(1.0 - x.data, (x,), lambda g: (-g,))


def softmax(logits: Tensor, axis: int = 0) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(p, (logits,), backward)


# -- convolution --------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[c_in,h,w]`` with ``weight[c_out,c_in,kh,kw]``."""
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be [c_in,h,w], got rank {x.ndim}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be [c_out,c_in,kh,kw], got rank {weight.ndim}")
    c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"conv2d c_in mismatch: input has {c_in} channels, weight expects {wc_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    oh, ow = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if oh < 1:
        raise ShapeError(f"conv2d output height {oh} < 1 (h={h}, kh={kh}, stride={stride}, pad={pad})")
    if ow < 1:
        raise ShapeError(f"conv2d output width {ow} < 1 (w={w}, kw={kw}, stride={stride}, pad={pad})")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # cols[c_in, kh, kw, oh, ow]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)).reshape(c_in * kh * kw, oh * ow)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, oh, ow)

    def backward(g):
        g2 = g.reshape(c_out, oh * ow)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c_in, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, i, j]
            gx = gxp[:, pad : pad + h, pad : pad + w] if pad else gxp
        return (gx, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward)


# -- resampling ---------------------------------------------------------------

def bilinear_weights(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix ``[n_out, n_in]`` with half-pixel centers."""
    scale_ = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale_ - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize expects [c,h,w], got rank {x.ndim}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize output size must be >= 1, got {out_h}x{out_w}")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,))
    ry = bilinear_weights(h, out_h, x.data.dtype)
    rx = bilinear_weights(w, out_w, x.data.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return Tensor.from_op(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


def nearest_resize(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a label map; source index is ``floor(dst * src_extent / dst_extent)``."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"nearest_resize expects [h,w], got rank {labels.ndim}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"nearest_resize output size must be >= 1, got {out_h}x{out_w}")
    h, w = labels.shape
    iy = (np.arange(out_h) * h) // out_h
    ix = (np.arange(out_w) * w) // out_w
    return labels[iy[:, None], ix[None, :]]


# -- losses -------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Summed pixel-wise cross-entropy; target 0 marks ignored pixels."""
    if logits.ndim != 3:
        raise ShapeError(f"logits must be [C,h,w], got rank {logits.ndim}")
    target = np.asarray(target)
    n_cls = logits.shape[0]
    if target.shape != logits.shape[1:]:
        raise ShapeError(f"target shape {target.shape} does not match logits spatial shape {logits.shape[1:]}")
    if target.size and (target.max() > n_cls or target.min() < 0):
        raise ValueError(f"target values must lie in 0..{n_cls}, got range {target.min()}..{target.max()}")

    z = logits.data - logits.data.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=0, keepdims=True))
    log_p = z - log_z
    valid = target > 0
    idx = np.where(valid, target - 1, 0)
    picked = np.take_along_axis(log_p, idx[None], axis=0)[0]
    loss = np.asarray(-(picked * valid).sum(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(log_p)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx[None], 1.0, axis=0)
        return ((p - onehot) * valid * g,)

    return Tensor.from_op(loss, (logits,), backward)


def argmax_labels(scores: np.ndarray) -> np.ndarray:
    """Class id (1-based) of the max over axis 0; ties go to the lowest class."""
    return np.argmax(scores, axis=0).astype(np.int64) + 1
