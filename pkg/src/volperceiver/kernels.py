"""Convolution, transposed convolution and max pooling over 2 or 3 spatial axes.

All kernels take ``[C, *spatial]`` or batched ``[B, C, *spatial]`` input and
are implemented with an im2col / col2im pair so forward and backward reduce to
per-sample matrix products in channels-first layout.  The two helpers are
adjoint to each other, which is what makes the transposed convolution the
exact adjoint of the convolution.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, make_result


def _triple(v, nd: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * nd
    v = tuple(int(i) for i in v)
    if len(v) != nd:
        raise ValueError(f"expected {nd} values, got {v}")
    return v


def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv_transpose_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n - 1) * s - 2 * p + k


def _im2col(xp: np.ndarray, ksize, stride, out_shape) -> np.ndarray:
    """[B, C, *padded] -> contiguous [B, C, *ksize, *out_shape]."""
    nd = len(ksize)
    b, c = xp.shape[:2]
    cols = np.empty((b, c) + tuple(ksize) + tuple(out_shape), dtype=xp.dtype)
    for kidx in np.ndindex(*ksize):
        src = tuple(slice(k, k + (o - 1) * s + 1, s) for k, s, o in zip(kidx, stride, out_shape))
        cols[(slice(None), slice(None)) + kidx] = xp[(slice(None), slice(None)) + src]
    return cols


def _col2im(cols: np.ndarray, padded_shape, ksize, stride, out_shape) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add ``[B, C, *k, *out]`` into ``[B, C, *padded]``."""
    res = np.zeros(padded_shape, dtype=cols.dtype)
    for kidx in np.ndindex(*ksize):
        dst = tuple(slice(k, k + (o - 1) * s + 1, s) for k, s, o in zip(kidx, stride, out_shape))
        res[(slice(None), slice(None)) + dst] += cols[(slice(None), slice(None)) + kidx]
    return res


def _batched(x: Tensor, nd: int) -> tuple[np.ndarray, bool]:
    if x.ndim == nd + 1:
        return x.data[None], True
    if x.ndim == nd + 2:
        return x.data, False
    raise ValueError(f"expected input of rank {nd + 1} or {nd + 2}, got shape {x.shape}")


def _pad(a: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return a
    return np.pad(a, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))


def _conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride, padding, nd: int, name: str) -> Tensor:
    xd, squeeze = _batched(x, nd)
    w = weight.data
    if w.ndim != nd + 2:
        raise ValueError(f"{name} weight must have rank {nd + 2}, got {w.shape}")
    c_out, c_in = w.shape[:2]
    if xd.shape[1] != c_in:
        raise ValueError(f"{name}: input has {xd.shape[1]} channels, layer expects {c_in}")
    ksize = w.shape[2:]
    stride = _triple(stride, nd)
    padding = _triple(padding, nd)
    spatial = xd.shape[2:]
    if any(n + 2 * p < k for n, p, k in zip(spatial, padding, ksize)):
        raise ValueError(f"{name}: padded extent {spatial} smaller than kernel {ksize}")
    out_shape = tuple(conv_output_size(n, k, s, p) for n, k, s, p in zip(spatial, ksize, stride, padding))
    batch = xd.shape[0]
    xp = _pad(xd, padding)
    cols = _im2col(xp, ksize, stride, out_shape).reshape(batch, c_in * int(np.prod(ksize)), -1)
    wmat = w.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((batch, c_out) + out_shape)
    out = out[0] if squeeze else out
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gb = (g[None] if squeeze else g).reshape(batch, c_out, -1)
        gx = gw = gbias = None
        if weight.requires_grad:
            gw = sum(gb[i] @ cols[i].T for i in range(batch)).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gb).reshape((batch, c_in) + tuple(ksize) + out_shape)
            gxp = _col2im(dcols, xp.shape, ksize, stride, out_shape)
            gx = gxp[(slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, spatial))]
            gx = gx[0] if squeeze else gx
        return (gx, gw) if bias is None else (gx, gw, gbias)

    return make_result(name, out, parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2D convolution; ``weight`` is [C_out, C_in, k_h, k_w]."""
    return _conv(x, weight, bias, stride, padding, 2, "conv2d")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D convolution; ``weight`` is [C_out, C_in, k_d, k_h, k_w]."""
    return _conv(x, weight, bias, stride, padding, 3, "conv3d")


def _conv_transpose(x: Tensor, weight: Tensor, bias: Tensor | None, stride, padding, nd: int,
                    name: str) -> Tensor:
    xd, squeeze = _batched(x, nd)
    w = weight.data
    if w.ndim != nd + 2:
        raise ValueError(f"{name} weight must have rank {nd + 2}, got {w.shape}")
    c_in, c_out = w.shape[:2]
    if xd.shape[1] != c_in:
        raise ValueError(f"{name}: input has {xd.shape[1]} channels, layer expects {c_in}")
    ksize = w.shape[2:]
    stride = _triple(stride, nd)
    padding = _triple(padding, nd)
    in_shape = xd.shape[2:]
    out_shape = tuple(conv_transpose_output_size(n, k, s, p)
                      for n, k, s, p in zip(in_shape, ksize, stride, padding))
    if any(o < 1 for o in out_shape):
        raise ValueError(f"{name}: output extent {out_shape} underflows")
    full_shape = tuple(o + 2 * p for o, p in zip(out_shape, padding))
    batch = xd.shape[0]
    xmat = xd.reshape(batch, c_in, -1)
    wmat = w.reshape(c_in, -1)
    cols = np.matmul(wmat.T, xmat).reshape((batch, c_out) + tuple(ksize) + in_shape)
    full = _col2im(cols, (batch, c_out) + full_shape, ksize, stride, in_shape)
    out = full[(slice(None), slice(None)) + tuple(slice(p, p + o) for p, o in zip(padding, out_shape))]
    if bias is not None:
        out = out + bias.data.reshape((1, c_out) + (1,) * nd)
    out = np.ascontiguousarray(out[0] if squeeze else out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gb = g[None] if squeeze else g
        gcols = _im2col(_pad(gb, padding), ksize, stride, in_shape).reshape(batch, c_out * int(np.prod(ksize)), -1)
        gx = gw = gbias = None
        if x.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(xd.shape)
            gx = gx[0] if squeeze else gx
        if weight.requires_grad:
            gw = sum(xmat[i] @ gcols[i].T for i in range(batch)).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        return (gx, gw) if bias is None else (gx, gw, gbias)

    return make_result(name, out, parents, backward)


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Transposed 2D convolution; ``weight`` is [C_in, C_out, k_h, k_w]."""
    return _conv_transpose(x, weight, bias, stride, padding, 2, "conv2d_transpose")


def conv3d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Transposed 3D convolution; ``weight`` is [C_in, C_out, k_d, k_h, k_w].

    Output extent per axis is ``(in - 1) * stride - 2 * padding + k``.
    """
    return _conv_transpose(x, weight, bias, stride, padding, 3, "conv3d_transpose")


def _maxpool(x: Tensor, kernel: Sequence[int], nd: int, name: str) -> Tensor:
    xd, squeeze = _batched(x, nd)
    kernel = _triple(kernel, nd)
    spatial = xd.shape[2:]
    if any(n % k for n, k in zip(spatial, kernel)):
        raise ValueError(f"{name}: extents {spatial} not divisible by pool {kernel}")
    b, c = xd.shape[:2]
    split = (b, c) + tuple(v for n, k in zip(spatial, kernel) for v in (n // k, k))
    perm = (0, 1) + tuple(2 + 2 * i for i in range(nd)) + tuple(3 + 2 * i for i in range(nd))
    pooled = tuple(n // k for n, k in zip(spatial, kernel))
    win = xd.reshape(split).transpose(perm).reshape((b, c) + pooled + (-1,))
    arg = win.argmax(axis=-1)[..., None]  # first occurrence wins ties
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]
    out = out[0] if squeeze else out
    inverse = tuple(np.argsort(perm))

    def backward(g):
        gb = g[None] if squeeze else g
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg, gb[..., None], axis=-1)
        gx = gw.reshape((b, c) + pooled + kernel).transpose(inverse).reshape(xd.shape)
        return (gx[0] if squeeze else gx,)

    return make_result(name, np.ascontiguousarray(out), (x,), backward)


def _check_stride(kernel, stride, nd):
    if stride is not None and _triple(stride, nd) != _triple(kernel, nd):
        raise ValueError("only non-overlapping pooling (stride == kernel) is supported")


def maxpool2d(x: Tensor, kernel=(2, 2), stride=None) -> Tensor:
    """Non-overlapping max pool (stride equals kernel)."""
    _check_stride(kernel, stride, 2)
    return _maxpool(x, kernel, 2, "maxpool2d")


def maxpool3d(x: Tensor, kernel=(1, 2, 2), stride=None) -> Tensor:
    """Non-overlapping 3D max pool; the default keeps the depth axis intact."""
    _check_stride(kernel, stride, 3)
    return _maxpool(x, kernel, 3, "maxpool3d")
