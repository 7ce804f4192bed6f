"""Central finite-difference audit of every differentiable operation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops, tensor as T
from .ssm import SsmParams, mamba_block, mamba_block_bidirectional, selective_scan
from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance


def check_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], *,
                   h: float = 1e-5, max_coords: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Relative L2 error between tape gradients and central differences.

    The output of ``fn`` is contracted with a fixed random weighting so every
    output element contributes.  With ``max_coords`` only a random subset of
    coordinates per input is perturbed.
    """
    rng = rng or np.random.default_rng(0)
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    out = fn(*leaves)
    weights = rng.standard_normal(out.shape)
    backward(T.sum(out * weights))

    def loss_at(arrays):
        with no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

    analytic, numeric = [], []
    arrays = [leaf.data.copy() for leaf in leaves]
    for i, leaf in enumerate(leaves):
        flat = arrays[i].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = loss_at(arrays)
            flat[c] = orig - h
            down = loss_at(arrays)
            flat[c] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(leaf.grad.reshape(-1)[c])
    analytic, numeric = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _distinct(rng, shape):
    # well-separated values so max-type ops have no near ties
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape) - n * 0.05


def _mamba_inputs(rng, d_model=4, d_state=3, expand=2, conv_k=3):
    p = SsmParams.init(rng, d_model, d_state=d_state, expand=expand, conv_k=conv_k)
    return [t.data for _, t in p.named_tensors()]


def _mamba_fn(x, *tensors):
    p = SsmParams.from_mapping(dict(zip(SsmParams.NAMES.values(), tensors)))
    return mamba_block(x, p)


def _bidir_fn(x, *tensors):
    half = len(tensors) // 2
    names = list(SsmParams.NAMES.values())
    fwd = SsmParams.from_mapping(dict(zip(names, tensors[:half])))
    bwd = SsmParams.from_mapping(dict(zip(names, tensors[half:])))
    return mamba_block_bidirectional(x, fwd, bwd)


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[..., Tensor], list[np.ndarray]]]:
    """The registered ``(name, function, inputs)`` gradient-check cases."""
    r = rng.standard_normal
    pos = lambda shape: rng.uniform(0.5, 2.0, shape)  # noqa: E731
    running = (np.zeros(3), np.ones(3))
    cases = [
        ("add", T.add, [r((3, 4)), r((4,))]),
        ("sub", T.sub, [r((3, 4)), r((3, 1))]),
        ("mul", T.mul, [r((2, 3)), r((2, 3))]),
        ("div", T.div, [r((2, 3)), pos((2, 3))]),
        ("neg", T.neg, [r((5,))]),
        ("power", lambda a: T.power(a, 3.0), [r((4,))]),
        ("exp", T.exp, [r((3, 2))]),
        ("log", T.log, [pos((3, 2))]),
        ("clamp", lambda a: T.clamp(a, -0.5, 0.5), [_away_from_zero(rng, (6,)) * 2]),
        ("sum", lambda a: T.sum(a, axis=1), [r((3, 4))]),
        ("mean", lambda a: T.mean(a, axis=(0, 2), keepdims=True), [r((2, 3, 4))]),
        ("amax", lambda a: T.amax(a, axis=1, keepdims=True), [_distinct(rng, (2, 4, 3))]),
        ("reshape", lambda a: T.reshape(a, (6, 2)) * np.arange(12.0).reshape(6, 2), [r((3, 4))]),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [r((2, 3, 4))]),
        ("flip", lambda a: T.flip(a, 1), [r((2, 5))]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [r((2, 2, 3)), r((2, 1, 3))]),
        ("split", lambda a: T.split(a, [1, 3], axis=1)[1] * 2.0, [r((2, 4))]),
        ("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
         [r((2, 2, 5, 5)), r((3, 2, 3, 3)), r((3,))]),
        ("conv2d_strided_dilated", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=2, dilation=2),
         [r((1, 2, 7, 6)), r((2, 2, 3, 3)), r((2,))]),
        ("conv1d_causal", ops.conv1d_causal, [r((2, 3, 6)), r((3, 1, 4)), r((3,))]),
        ("linear", ops.linear, [r((2, 3, 4)), r((5, 4)), r((5,))]),
        ("layer_norm", lambda x, g, b: ops.layer_norm(x, g, b, 1e-5), [r((3, 6)), r((6,)), r((6,))]),
        ("batch_norm_train", lambda x, g, b: ops.batch_norm(x, g, b, running[0].copy(), running[1].copy(),
                                                             training=True),
         [r((2, 3, 4, 4)), r((3,)), r((3,))]),
        ("batch_norm_eval", lambda x, g, b: ops.batch_norm(x, g, b, np.array([0.1, -0.2, 0.3]),
                                                            np.array([1.5, 0.5, 2.0]), training=False),
         [r((2, 3, 3, 3)), r((3,)), r((3,))]),
        ("sigmoid", ops.sigmoid, [r((7,)) * 3]),
        ("silu", ops.silu, [r((7,)) * 3]),
        ("softplus", ops.softplus, [np.concatenate([r((6,)) * 3, [31.0, 40.0]])]),
        ("relu", ops.relu, [_away_from_zero(rng, (8,))]),
        ("max_pool2d", lambda x: ops.max_pool2d(x, 2), [_distinct(rng, (2, 2, 5, 4))]),
        ("adaptive_avg_pool2d", ops.adaptive_avg_pool2d, [r((2, 3, 4, 5))]),
        ("global_avg_pool", ops.global_avg_pool, [r((2, 3, 3, 2))]),
        ("split_channels", lambda x: T.concat([p * (i + 1.0) for i, p in
                                                enumerate(ops.split_channels(x, 2))], axis=1),
         [r((1, 4, 2, 2))]),
        ("selective_scan", lambda u, d, a, b, c, dd: selective_scan(u, d, a, b, c, dd, chunk=4),
         [r((2, 11, 3)), rng.uniform(0.1, 1.0, (2, 11, 3)), -rng.uniform(0.2, 2.0, (3, 4)),
          r((2, 11, 4)), r((2, 11, 4)), r((3,))]),
        ("mamba_block", _mamba_fn, [r((2, 7, 4))] + _mamba_inputs(rng)),
        ("mamba_block_bidirectional", _bidir_fn,
         [r((1, 5, 4))] + _mamba_inputs(rng) + _mamba_inputs(rng)),
    ]
    return cases


def run_op_checks(seed: int = 0, tolerance: float = 1e-5) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in op_cases(rng):
        err = check_gradient(fn, inputs, rng=np.random.default_rng(seed + 1))
        results.append(GradCheckResult(name, err, tolerance))
    return results


def check_model_gradient(seed: int = 0, input_size: int = 64, batch: int = 2,
                         coords_per_tensor: int = 2, cfg=None) -> float:
    """Finite-difference check of the whole classifier on a small input.

    Every parameter tensor and the input are perturbed at a few random
    coordinates; batch norm runs with batch statistics.
    """
    from .arch import ModelConfig, init_params, model_forward

    cfg = cfg or ModelConfig(input_size=input_size)
    store = init_params(cfg, seed)
    names = list(store.params)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, cfg.in_channels, cfg.input_size, cfg.input_size))

    def fn(xt, *tensors):
        store.params.update(zip(names, tensors))
        return model_forward(xt, store, cfg, training=True)

    inputs = [x] + [store.params[n].data.copy() for n in names]
    return check_gradient(fn, inputs, max_coords=coords_per_tensor, rng=np.random.default_rng(seed + 1))


def run_all(seed: int = 0, op_tolerance: float = 1e-5, model_tolerance: float = 1e-4) -> list[GradCheckResult]:
    results = run_op_checks(seed, op_tolerance)
    results.append(GradCheckResult("model_end_to_end", check_model_gradient(seed), model_tolerance))
    return results
