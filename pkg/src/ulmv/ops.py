"""Differentiable neural-network primitives built on :mod:`ulmv.tensor`."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import Tensor, _as_tensor, concat, make_result, split

__all__ = [
    "conv2d", "conv1d_causal", "linear", "layer_norm", "batch_norm",
    "sigmoid", "silu", "softplus", "relu", "max_pool2d", "adaptive_avg_pool2d",
    "global_avg_pool", "split_channels", "concat_channels", "conv_output_size",
]

# bytes budget for one im2col buffer
_COL_BYTES = 32 * 2**20


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """``[n,C,Hp,Wp] -> [n, C*k*k, ho*wo]`` with (C, i, j) ordering on axis 1."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                                  c0:c0 + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im_add(gxp: np.ndarray, gcols: np.ndarray, k: int, stride: int, dilation: int,
                ho: int, wo: int) -> None:
    n, c = gxp.shape[:2]
    gcols = gcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            gxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                c0:c0 + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of ``x[N,C_in,H,W]`` with ``weight[C_out,C_in,k,k]``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ValueError(f"conv2d shape mismatch: input has {c} channels, weight expects {ci}")
    if k != k2 or k < 1:
        raise ValueError(f"conv2d needs a square kernel, got {k}x{k2}")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d input {h}x{w} too small for kernel {k} "
                         f"(dilation {dilation}, padding {padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = weight.data.reshape(o, c * k * k)
    chunk = max(1, _COL_BYTES // max(1, ho * wo * k * k * c * 8))

    out = np.empty((n, o, ho * wo))
    for s in range(0, n, chunk):
        out[s:s + chunk] = np.matmul(wmat, _im2col(xp[s:s + chunk], k, stride, dilation, ho, wo))
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g = g.reshape(n, o, ho * wo)
        gw = np.zeros_like(wmat)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for s in range(0, n, chunk):
            gs = g[s:s + chunk]
            cols = _im2col(xp[s:s + chunk], k, stride, dilation, ho, wo)
            gw += np.einsum("nop,nkp->ok", gs, cols, optimize=True)
            if gxp is not None:
                _col2im_add(gxp[s:s + chunk], np.matmul(wmat.T, gs), k, stride, dilation, ho, wo)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return make_result(out, parents, "conv2d", _bw)


def conv1d_causal(x, weight, bias=None) -> Tensor:
    """Depthwise causal convolution: ``x[B,D,L]``, ``weight[D,1,k]``.

    Output position t only sees inputs ``t-k+1 .. t``; the sequence is left
    padded with ``k-1`` zeros so the length is preserved.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    b, d, length = x.shape
    if weight.ndim != 3 or weight.shape[0] != d or weight.shape[1] != 1:
        raise ValueError(f"conv1d_causal weight must be [{d},1,k], got {weight.shape}")
    k = weight.shape[2]
    if k <= 0:
        raise ValueError("conv1d_causal kernel width must be positive")
    xp = np.pad(x.data, ((0, 0), (0, 0), (k - 1, 0)))
    w = weight.data[:, 0, :]
    out = np.zeros((b, d, length))
    for j in range(k):
        out += w[None, :, j, None] * xp[:, :, j:j + length]
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for j in range(k):
            gxp[:, :, j:j + length] += w[None, :, j, None] * g
            gw[:, j] = np.sum(g * xp[:, :, j:j + length], axis=(0, 2))
        grads = [gxp[:, :, k - 1:], gw[:, None, :]]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return make_result(out, parents, "conv1d_causal", _bw)


def linear(x, weight, bias=None) -> Tensor:
    """``y = x @ weight.T + bias`` over the last axis of ``x``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    f_out, f_in = weight.shape
    if x.shape[-1] != f_in:
        raise ValueError(f"linear expects last axis {f_in}, got input shape {x.shape}")
    x2 = x.data.reshape(-1, f_in)
    out = x2 @ weight.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (f_out,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g2 = g.reshape(-1, f_out)
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out, parents, "linear", _bw)


def _normalize_backward(g, xhat, rstd, axes):
    m = np.mean(g, axis=axes, keepdims=True)
    mx = np.mean(g * xhat, axis=axes, keepdims=True)
    return rstd * (g - m - xhat * mx)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise each trailing-axis slice with population variance."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def _bw(g):
        gx = _normalize_backward(g * gamma.data, xhat, rstd, -1)
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return make_result(out, (x, gamma, beta), "layer_norm", _bw)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float | None = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over (N, H, W) of ``x[N,C,H,W]``.

    In training mode the running buffers are updated in place; ``momentum``
    of ``None`` is not accepted here, callers computing cumulative averages
    pass ``1/(k+1)`` themselves.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=axes, keepdims=True)
        count = x.data.size // x.shape[1]
        unbiased = var.reshape(-1) * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.reshape(shape)
        xc = x.data - mu
        var = running_var.reshape(shape)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gm = gamma.data.reshape(shape)
    out = xhat * gm + beta.data.reshape(shape)

    def _bw(g):
        if training:
            gx = _normalize_backward(g * gm, xhat, rstd, axes)
        else:
            gx = g * gm * rstd
        return gx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

    return make_result(out, (x, gamma, beta), "batch_norm", _bw)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.data)
    return make_result(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.data)
    return make_result(x.data * s, (x,), "silu",
                       lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def softplus(x) -> Tensor:
    """``ln(1 + e^x)``, switching to the identity above 30."""
    x = _as_tensor(x)
    big = x.data > 30.0
    out = np.where(big, x.data, np.log1p(np.exp(np.minimum(x.data, 30.0))))
    return make_result(out, (x,), "softplus",
                       lambda g: (g * np.where(big, 1.0, expit(x.data)),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; odd trailing rows/columns are dropped."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ValueError(f"max_pool2d({size}) needs spatial extents >= {size}, got {h}x{w}")
    win = (x.data[:, :, :ho * size, :wo * size]
           .reshape(n, c, ho, size, wo, size)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, ho, wo, size * size))
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], -1)[..., 0]

    def _bw(g):
        gwin = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(gwin, idx[..., None], g[..., None], -1)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = (gwin.reshape(n, c, ho, wo, size, size)
                                            .transpose(0, 1, 2, 4, 3, 5)
                                            .reshape(n, c, ho * size, wo * size))
        return (gx,)

    return make_result(out, (x,), "max_pool2d", _bw)


def adaptive_avg_pool2d(x) -> Tensor:
    """Adaptive average pooling to a 1x1 output: ``[N,C,H,W] -> [N,C,1,1]``."""
    x = _as_tensor(x)
    hw = x.shape[2] * x.shape[3]
    out = x.data.sum(axis=(2, 3), keepdims=True) / hw
    return make_result(out, (x,), "adaptive_avg_pool2d",
                       lambda g: (np.broadcast_to(g / hw, x.shape).copy(),))


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes: ``[N,C,H,W] -> [N,C]``."""
    x = _as_tensor(x)
    hw = x.shape[2] * x.shape[3]
    out = x.data.sum(axis=(2, 3)) / hw
    return make_result(out, (x,), "global_avg_pool",
                       lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


def split_channels(x, parts: int) -> list[Tensor]:
    x = _as_tensor(x)
    c = x.shape[1]
    if parts < 1 or c % parts:
        raise ValueError(f"cannot split {c} channels into {parts} equal parts")
    if parts == 1:
        return [x]
    return split(x, [c // parts] * parts, axis=1)


def concat_channels(parts) -> Tensor:
    return concat(list(parts), axis=1)
