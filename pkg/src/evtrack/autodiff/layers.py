"""Differentiable layer primitives: linear, conv2d, avg_pool2d, batch_norm, dropout."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import BatchTooSmallError, ShapeError
from .tensor import Tensor, make_node


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x [B, n], weight [m, n], bias [m]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not conform to weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: extent {size} with kernel {k}, stride {stride}, padding {padding} is not integral"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patches of x [B, C, H, W] as a [B, C, Ho, Wo, kh, kw] view."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Bias-free cross-correlation on raw arrays, x [B, C, H, W] -> [B, Cout, Ho, Wo]."""
    kh, kw = w.shape[2:]
    cols = im2col(x, kh, kw, stride, padding)
    return np.ascontiguousarray(np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))


def conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`conv_forward` with respect to its input."""
    B, C, H, W = x_shape
    kh, kw = w.shape[2:]
    Ho, Wo = g.shape[2:]
    dcols = np.tensordot(g, w, axes=([1], [0]))  # [B, Ho, Wo, C, kh, kw]
    gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x [B, Cin, H, W] with weight [Cout, Cin, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not conform to weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    _, _, H, W = x.shape
    _, _, kh, kw = weight.shape
    conv_output_size(H, kh, stride, padding)
    conv_output_size(W, kw, stride, padding)
    cols = im2col(x.data, kh, kw, stride, padding)
    wd = weight.data
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    x_shape = x.shape

    def back(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gx = conv_input_grad(g, wd, x_shape, stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back)


def pooled_size(size: int, k: int, truncate: bool) -> int:
    if size % k and not truncate:
        raise ShapeError(f"avg_pool2d: extent {size} is not divisible by window {k}")
    if size // k == 0:
        raise ShapeError(f"avg_pool2d: extent {size} smaller than window {k}")
    return size // k


def avg_pool2d(x: Tensor, k: int, truncate: bool = False) -> Tensor:
    """Mean over non-overlapping k x k windows of x [B, C, H, W].

    With ``truncate`` the trailing rows/columns that do not fill a window are
    dropped (floor semantics) instead of raising.
    """
    B, C, H, W = x.shape
    Ho, Wo = pooled_size(H, k, truncate), pooled_size(W, k, truncate)
    core = x.data[:, :, : Ho * k, : Wo * k]
    out = core.reshape(B, C, Ho, k, Wo, k).mean(axis=(3, 5))

    def back(g):
        gx = np.zeros((B, C, H, W))
        spread = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        gx[:, :, : Ho * k, : Wo * k] = spread
        return (gx,)

    return make_node(out, (x,), back)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def _bn_axes(ndim: int) -> tuple[int, ...]:
    # channel axis is 1; everything else is reduced
    return (0,) + tuple(range(2, ndim))


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization for x [B, C, ...].

    Training mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate; eval mode reads the running
    statistics only.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    nd = x.ndim
    axes = _bn_axes(nd)
    gd, bd = gamma.data, beta.data
    if training:
        if x.shape[0] < 2:
            raise BatchTooSmallError("batch_norm in train mode needs a batch of at least 2")
        m = x.data.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean = (1.0 - momentum) * state.mean + momentum * mean
        state.var = (1.0 - momentum) * state.var + momentum * var * m / (m - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - _bn_view(mean, nd)) * _bn_view(inv, nd)
        out = xhat * _bn_view(gd, nd) + _bn_view(bd, nd)

        def back(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gxhat = g * _bn_view(gd, nd)
            gx = (
                _bn_view(inv / m, nd)
                * (m * gxhat - _bn_view(gxhat.sum(axis=axes), nd) - xhat * _bn_view((gxhat * xhat).sum(axis=axes), nd))
            )
            return gx, gg, gb

    else:
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - _bn_view(state.mean, nd)) * _bn_view(inv, nd)
        out = xhat * _bn_view(gd, nd) + _bn_view(bd, nd)

        def back(g):
            return g * _bn_view(gd * inv, nd), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_node(out, (x, gamma, beta), back)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))
