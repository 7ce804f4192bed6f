"""Straight-line numpy oracles, written without the tape or the library kernels."""
import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0, dilation=1):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                r = y * stride + i * dilation - padding
                                q = xx * stride + j * dilation - padding
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[ni, ci, r, q] * w[oi, ci, i, j]
                    out[ni, oi, y, xx] = acc
    return out


def conv1d_causal_loops(x, w, b):
    bsz, d, length = x.shape
    k = w.shape[2]
    out = np.zeros_like(x)
    for bi in range(bsz):
        for di in range(d):
            for t in range(length):
                acc = b[di]
                for j in range(k):
                    src = t - (k - 1) + j
                    if src >= 0:
                        acc += w[di, 0, j] * x[bi, di, src]
                out[bi, di, t] = acc
    return out


def matmul_loops(x2, w):
    out = np.zeros((x2.shape[0], w.shape[0]))
    for i in range(x2.shape[0]):
        for j in range(w.shape[0]):
            s = 0.0
            for k in range(x2.shape[1]):
                s += x2[i, k] * w[j, k]
            out[i, j] = s
    return out


def layer_norm_ref(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def softplus(v):
    return v if v > 30 else math.log1p(math.exp(v))


def silu(v):
    return v * sigmoid(v)


def mamba_ref(x, p):
    """Literal-loop Mamba block; ``p`` maps SsmParams attribute names to arrays."""
    bsz, length, m = x.shape
    di, n = p["a_log"].shape
    r = p["dt_proj_weight"].shape[1]
    k = p["conv_weight"].shape[2]
    A = -np.exp(p["a_log"])
    out = np.zeros_like(x)
    for bi in range(bsz):
        xz = np.array([[sum(p["in_proj"][j, q] * x[bi, t, q] for q in range(m)) for j in range(2 * di)]
                       for t in range(length)])
        u_raw, gate = xz[:, :di], xz[:, di:]
        u = np.zeros((length, di))
        for t in range(length):
            for d in range(di):
                acc = p["conv_bias"][d]
                for j in range(k):
                    src = t - (k - 1) + j
                    if src >= 0:
                        acc += p["conv_weight"][d, 0, j] * u_raw[src, d]
                u[t, d] = silu(acc)
        h = np.zeros((di, n))
        for t in range(length):
            proj = [sum(p["x_proj"][j, d] * u[t, d] for d in range(di)) for j in range(r + 2 * n)]
            dt, bvec, cvec = proj[:r], proj[r:r + n], proj[r + n:]
            y = np.zeros(di)
            for d in range(di):
                delta = softplus(sum(p["dt_proj_weight"][d, j] * dt[j] for j in range(r)) + p["dt_proj_bias"][d])
                for s in range(n):
                    h[d, s] = math.exp(delta * A[d, s]) * h[d, s] + delta * bvec[s] * u[t, d]
                y[d] = sum(cvec[s] * h[d, s] for s in range(n)) + p["d_skip"][d] * u[t, d]
                y[d] *= silu(gate[t, d])
            for q in range(m):
                out[bi, t, q] = sum(p["out_proj"][q, d] * y[d] for d in range(di))
    return out


def unrolled_scan(x, delta, bs, cs, A, D):
    """Materialise every hidden state h_t by literal loops."""
    bsz, length, di = x.shape
    n = A.shape[1]
    hs = np.zeros((bsz, length + 1, di, n))
    y = np.zeros_like(x)
    for b in range(bsz):
        for t in range(length):
            for d in range(di):
                for s in range(n):
                    hs[b, t + 1, d, s] = (math.exp(delta[b, t, d] * A[d, s]) * hs[b, t, d, s]
                                          + delta[b, t, d] * bs[b, t, s] * x[b, t, d])
                y[b, t, d] = sum(cs[b, t, s] * hs[b, t + 1, d, s] for s in range(n)) + D[d] * x[b, t, d]
    return y
