"""Differentiable neural operators on NCHW tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import DomainError, ShapeError, Tensor


@dataclass
class Conv2dParams:
    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0


@dataclass
class BatchNormState:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """2-D cross-correlation with symmetric zero padding.

    Implemented as im2col + one matmul; the backward pass scatters column
    gradients back with one strided add per kernel offset.
    """
    w = p.kernel
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if c != ic:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ic}")
    s, pad = p.stride, p.padding
    oh, ow = _out_extent(h, kh, s, pad), _out_extent(wd, kw, s, pad)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d output would be empty")

    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if kh == 1 and kw == 1:
        patches = xd[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
        cols = patches.transpose(0, 2, 3, 1).reshape(n * oh * ow, c)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(oc, -1)
    out = cols @ wmat.T
    if p.bias is not None:
        out = out + p.bias.data
    out = out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    padded_shape = xd.shape
    bias = p.bias

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, oh, ow, c, kh, kw)
            gpad = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gpad[:, :, pad : pad + h, pad : pad + wd] if pad else gpad
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._make(np.ascontiguousarray(out), parents, bw, "conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    """Window maximum; gradient goes to the first maximal cell of each window.

    Padding cells hold ``-inf`` so they never win.
    """
    n, c, h, wd = x.shape
    if padding == 0 and window == stride and (h % window or wd % window):
        raise ShapeError(f"maxpool2d needs extents divisible by {window}, got {h}x{wd}")
    oh, ow = _out_extent(h, window, stride, padding), _out_extent(wd, window, stride, padding)
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2), constant_values=-np.inf)
    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    padded_shape = xd.shape

    def bw(g):
        gpad = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(window):
            for j in range(window):
                hit = idx == i * window + j
                if hit.any():
                    gpad[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += g * hit
        if padding:
            gpad = gpad[:, :, padding : padding + h, padding : padding + wd]
        return (gpad,)

    return Tensor._make(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    shape = x.shape

    def bw(g):
        h, w = shape[-2:]
        g = g.reshape(shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1)),)

    return Tensor._make(out, (x,), bw, "upsample")


def batchnorm2d(x: Tensor, st: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    Training mode normalizes with batch statistics and folds them into the
    running averages as ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[1]
    if st.scale.shape != (c,):
        raise ShapeError(f"batchnorm expects {st.scale.shape[0]} channels, got {c}")
    xd = x.data
    gamma = st.scale.data.reshape(1, c, 1, 1)
    beta = st.shift.data.reshape(1, c, 1, 1)
    if training:
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        m = xd.size // c
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        st.running_mean[...] = st.momentum * st.running_mean + (1 - st.momentum) * mu.reshape(c)
        st.running_var[...] = st.momentum * st.running_var + (1 - st.momentum) * unbiased
    else:
        mu = st.running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = st.running_var.reshape(1, c, 1, 1).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(st.eps))
    xhat = (xd - mu) * inv
    out = xhat * gamma + beta

    def bw(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if training:
            m = xd.size // c
            gx = inv / m * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv
        return gx, gscale, gshift

    return Tensor._make(out, (x, st.scale, st.shift), bw, "batchnorm2d")


def logsumexp_channel(x: Tensor, axis: int = 1, keepdims: bool = False) -> Tensor:
    return T.logsumexp(x, axis=axis, keepdims=keepdims)


def softmax_channel(x: Tensor, axis: int = 1) -> Tensor:
    """Softmax along ``axis``.

    The backward pass uses ``p_k * sum_c p_c (g_k - g_c)``, equal to the usual
    ``p_k (g_k - sum_c p_c g_c)`` but exactly zero when the upstream gradient
    is constant across the axis.
    """
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        gk = np.expand_dims(g, axis + 1)
        gc = np.expand_dims(g, axis)
        pc = np.expand_dims(p, axis)
        return (p * ((gk - gc) * pc).sum(axis=axis + 1),)

    return Tensor._make(p, (x,), bw, "softmax")


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` computed without overflow."""
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    sig = 0.5 * (1 + np.tanh(0.5 * xd))
    return Tensor._make(out, (x,), lambda g: (g * sig,), "softplus")


def one_hot(labels: np.ndarray, num_classes: int, dtype, axis: int = 1) -> np.ndarray:
    """Labels ``[N, H, W]`` to a one-hot array with classes along ``axis``."""
    labels = np.asarray(labels)
    oh = (np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(dtype)
    return np.moveaxis(oh, 0, axis)


def crossentropy_from_logits(logits: Tensor, labels: np.ndarray, valid: Optional[np.ndarray] = None) -> Tensor:
    """Mean over valid pixels of ``logsumexp(logits) - logits[label]``."""
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = np.ones(labels.shape, bool) if valid is None else np.asarray(valid, bool)
    count = int(valid.sum())
    if count == 0:
        raise DomainError("no valid pixels")
    safe = np.where(valid, labels, 0)
    if safe.max() >= c or safe.min() < 0:
        raise ValueError("label value out of range for logits")
    lse = T.logsumexp(logits, axis=1, keepdims=False)
    picked = T.sum(T.mul(logits, Tensor(one_hot(safe, c, logits.dtype))), axes=1)
    per_pixel = T.sub(lse, picked)
    weights = Tensor(valid.astype(logits.dtype))
    return T.scale(T.sum(T.mul(per_pixel, weights)), 1.0 / count)
