"""Selective state-space scan and the gated Mamba block.

The recurrence is ``h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t`` with
readout ``y_t = <C_t, h_t> + D * x_t`` and ``h_{-1} = 0``.  Two evaluations are
provided: a literal left-to-right loop holding one state, and a chunked
Blelloch scan over the affine maps ``h -> a*h + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .tensor import NonFiniteError, Tensor, _as_tensor, exp, flip, make_result, neg, split, transpose

__all__ = [
    "ScanInputs", "SsmParams", "discretize", "affine_scan", "selective_scan_sequential",
    "selective_scan_parallel", "selective_scan", "mamba_block", "mamba_block_bidirectional",
    "resolve_dt_rank",
]

DEFAULT_CHUNK = 64


@dataclass
class ScanInputs:
    """Per-timestep scan operands: ``x`` and ``delta`` are ``[B,L,d_inner]``,
    ``B_seq`` and ``C_seq`` are ``[B,L,d_state]``."""

    x: np.ndarray
    delta: np.ndarray
    B_seq: np.ndarray
    C_seq: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.B_seq = np.asarray(self.B_seq, dtype=np.float64)
        self.C_seq = np.asarray(self.C_seq, dtype=np.float64)
        b, length, d = self.x.shape
        if self.delta.shape != (b, length, d):
            raise ValueError(f"delta shape {self.delta.shape} != x shape {self.x.shape}")
        if self.B_seq.shape[:2] != (b, length) or self.C_seq.shape != self.B_seq.shape:
            raise ValueError(f"B_seq {self.B_seq.shape} / C_seq {self.C_seq.shape} "
                             f"inconsistent with x {self.x.shape}")


def discretize(delta, A, B_seq) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for A, Euler step for B.

    Returns ``A_bar = exp(delta*A)`` and ``B_bar = delta*B``, both broadcast
    to ``[B,L,d_inner,d_state]``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B_seq = np.asarray(B_seq, dtype=np.float64)
    if np.any(~(delta > 0)):
        raise ValueError("discretize requires strictly positive step sizes delta")
    a_bar = np.exp(delta[..., None] * A)
    b_bar = delta[..., None] * B_seq[..., None, :]
    return a_bar, b_bar


def _check(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"non-finite value in {what} at index {tuple(bad)}")


def selective_scan_sequential(inputs: ScanInputs, A, D) -> np.ndarray:
    """Reference scan: one timestep at a time, O(d_inner*d_state) state."""
    A = np.asarray(A, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    x, delta, bs, cs = inputs.x, inputs.delta, inputs.B_seq, inputs.C_seq
    b, length, d = x.shape
    h = np.zeros((b, d, A.shape[1]))
    y = np.empty_like(x)
    for t in range(length):
        a_bar, b_bar = discretize(delta[:, t], A, bs[:, t])
        with np.errstate(over="ignore", invalid="ignore"):
            h = a_bar * h + b_bar * x[:, t, :, None]
        _check(h, f"scan state at t={t}")
        y[:, t] = (h * cs[:, t, None, :]).sum(-1) + D * x[:, t]
    _check(y, "scan output")
    return y


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def affine_scan(a: np.ndarray, b: np.ndarray, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Inclusive scan of ``h_t = a_t*h_{t-1} + b_t`` along axis 1, ``h_{-1}=0``.

    Work-efficient Blelloch up/down sweep inside chunks of ``chunk`` steps,
    vectorised over all chunks at once, then a sequential carry between
    chunks.  ``chunk`` must be a power of two.
    """
    if chunk < 1 or chunk & (chunk - 1):
        raise ValueError(f"chunk must be a power of two, got {chunk}")
    length = a.shape[1]
    c = min(chunk, _next_pow2(length))
    nc = -(-length // c)
    pad = nc * c - length
    if pad:
        widths = [(0, 0)] * a.ndim
        widths[1] = (0, pad)
        a = np.pad(a, widths, constant_values=1.0)
        b = np.pad(b, widths)
    shape = (a.shape[0], nc, c) + a.shape[2:]
    a = a.reshape(shape)
    b = b.reshape(shape)
    pa, pb = a.copy(), b.copy()

    step = 1
    while step < c:
        left = slice(step - 1, None, 2 * step)
        right = slice(2 * step - 1, None, 2 * step)
        pb[:, :, right] = pa[:, :, right] * pb[:, :, left] + pb[:, :, right]
        pa[:, :, right] = pa[:, :, right] * pa[:, :, left]
        step *= 2

    pa[:, :, c - 1] = 1.0
    pb[:, :, c - 1] = 0.0
    step = c // 2
    while step >= 1:
        left = slice(step - 1, None, 2 * step)
        right = slice(2 * step - 1, None, 2 * step)
        ta, tb = pa[:, :, left].copy(), pb[:, :, left].copy()
        pa[:, :, left] = pa[:, :, right]
        pb[:, :, left] = pb[:, :, right]
        pb[:, :, right] = ta * pb[:, :, right] + tb
        pa[:, :, right] = ta * pa[:, :, right]
        step //= 2

    # exclusive prefixes -> inclusive
    inc_a = a * pa
    inc_b = a * pb + b

    h = np.empty_like(b)
    carry = np.zeros((shape[0],) + shape[3:])
    for k in range(nc):
        h[:, k] = inc_a[:, k] * carry[:, None] + inc_b[:, k]
        carry = h[:, k, -1]
    h = h.reshape((shape[0], nc * c) + shape[3:])
    return h[:, :length] if pad else h


def selective_scan_parallel(inputs: ScanInputs, A, D, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    a_bar, b_bar = discretize(inputs.delta, A, inputs.B_seq)
    h = affine_scan(a_bar, b_bar * inputs.x[..., None], chunk)
    _check(h, "scan states")
    y = (h * inputs.C_seq[:, :, None, :]).sum(-1) + D * inputs.x
    _check(y, "scan output")
    return y


def selective_scan(u, delta, A, B_seq, C_seq, D, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Differentiable selective scan on tensors.

    ``u, delta: [B,L,d_inner]``, ``A: [d_inner,d_state]``,
    ``B_seq, C_seq: [B,L,d_state]``, ``D: [d_inner]``.  The backward pass runs
    the adjoint recurrence right-to-left with the same scan.
    """
    u, delta, A, B_seq, C_seq, D = map(_as_tensor, (u, delta, A, B_seq, C_seq, D))
    bs = B_seq.data[:, :, None, :]
    cs = C_seq.data[:, :, None, :]
    d_a = np.exp(delta.data[..., None] * A.data)
    du = delta.data * u.data
    h = affine_scan(d_a, du[..., None] * bs, chunk)
    y = (h * cs).sum(-1) + D.data * u.data

    def _bw(gy):
        q = gy[..., None] * cs
        a_next = np.concatenate([d_a[:, 1:], np.zeros_like(d_a[:, :1])], axis=1)
        g = np.flip(affine_scan(np.flip(a_next, 1), np.flip(q, 1), chunk), 1)
        h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        g_logit = g * h_prev * d_a
        g_bs = (g * bs).sum(-1)
        g_delta = (g_logit * A.data).sum(-1) + u.data * g_bs
        g_A = np.einsum("bldn,bld->dn", g_logit, delta.data)
        g_B = np.einsum("bldn,bld->bln", g, du)
        g_u = delta.data * g_bs + D.data * gy
        g_C = np.einsum("bld,bldn->bln", gy, h)
        g_D = np.sum(gy * u.data, axis=(0, 1))
        return g_u, g_delta, g_A, g_B, g_C, g_D

    return make_result(y, (u, delta, A, B_seq, C_seq, D), "selective_scan", _bw)


def resolve_dt_rank(dt_rank: int | str, d_model: int) -> int:
    """``"auto"`` or 0 means ``ceil(d_model / 16)``."""
    if dt_rank in ("auto", 0, None):
        return max(1, math.ceil(d_model / 16))
    return int(dt_rank)


@dataclass
class SsmParams:
    """Weights of one Mamba block.  Projections have no bias except ``dt_proj``."""

    in_proj: Tensor          # [2*d_inner, d_model]
    conv_weight: Tensor      # [d_inner, 1, conv_k]
    conv_bias: Tensor        # [d_inner]
    x_proj: Tensor           # [dt_rank + 2*d_state, d_inner]
    dt_proj_weight: Tensor   # [d_inner, dt_rank]
    dt_proj_bias: Tensor     # [d_inner]
    a_log: Tensor            # [d_inner, d_state]
    d_skip: Tensor           # [d_inner]
    out_proj: Tensor         # [d_model, d_inner]

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[1]

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj_weight.shape[1]

    @property
    def conv_k(self) -> int:
        return self.conv_weight.shape[2]

    # hierarchical names used by the parameter store
    NAMES = {
        "in_proj": "in_proj.weight", "conv_weight": "conv1d.weight", "conv_bias": "conv1d.bias",
        "x_proj": "x_proj.weight", "dt_proj_weight": "dt_proj.weight",
        "dt_proj_bias": "dt_proj.bias", "a_log": "a_log", "d_skip": "d_skip",
        "out_proj": "out_proj.weight",
    }

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(self.NAMES[f.name], getattr(self, f.name)) for f in fields(self)]

    @classmethod
    def from_mapping(cls, mapping, prefix: str = "") -> "SsmParams":
        return cls(**{attr: mapping[prefix + name] for attr, name in cls.NAMES.items()})

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, d_state: int = 8, expand: int = 1,
             conv_k: int = 3, dt_rank: int | str = "auto", dt_min: float = 1e-3,
             dt_max: float = 1e-1) -> "SsmParams":
        if d_state < 1 or expand < 1 or conv_k < 1:
            raise ValueError("d_state, expand and conv_k must be >= 1")
        d_inner = expand * d_model
        rank = resolve_dt_rank(dt_rank, d_model)

        def uniform(shape, bound):
            return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), d_inner))
        inv_softplus = dt + np.log(-np.expm1(-dt))
        a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))
        return cls(
            in_proj=uniform((2 * d_inner, d_model), d_model ** -0.5),
            conv_weight=uniform((d_inner, 1, conv_k), conv_k ** -0.5),
            conv_bias=uniform((d_inner,), conv_k ** -0.5),
            x_proj=uniform((rank + 2 * d_state, d_inner), d_inner ** -0.5),
            dt_proj_weight=uniform((d_inner, rank), rank ** -0.5),
            dt_proj_bias=Tensor(inv_softplus, requires_grad=True),
            a_log=Tensor(a_log, requires_grad=True),
            d_skip=Tensor(np.ones(d_inner), requires_grad=True),
            out_proj=uniform((d_model, d_inner), d_inner ** -0.5),
        )


def mamba_block(x, params: SsmParams, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Gated selective-SSM block, ``[B,L,d_model] -> [B,L,d_model]``."""
    x = _as_tensor(x)
    if x.ndim != 3 or x.shape[2] != params.d_model:
        raise ValueError(f"mamba_block expects [B,L,{params.d_model}], got {x.shape}")
    if x.shape[1] < 1:
        raise ValueError("mamba_block needs a sequence of length >= 1")
    di, n, r = params.d_inner, params.d_state, params.dt_rank
    u, gate = split(ops.linear(x, params.in_proj), [di, di], axis=-1)
    u = transpose(ops.conv1d_causal(transpose(u, (0, 2, 1)), params.conv_weight, params.conv_bias),
                  (0, 2, 1))
    u = ops.silu(u)
    dt, b_seq, c_seq = split(ops.linear(u, params.x_proj), [r, n, n], axis=-1)
    delta = ops.softplus(ops.linear(dt, params.dt_proj_weight, params.dt_proj_bias))
    A = neg(exp(params.a_log))
    y = selective_scan(u, delta, A, b_seq, c_seq, params.d_skip, chunk)
    y = y * ops.silu(gate)
    return ops.linear(y, params.out_proj)


def mamba_block_bidirectional(x, forward: SsmParams, backward: SsmParams) -> Tensor:
    """Sum of a left-to-right pass and a right-to-left pass with its own weights."""
    x = _as_tensor(x)
    return mamba_block(x, forward) + flip(mamba_block(flip(x, 1), backward), 1)
