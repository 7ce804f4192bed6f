import json
import math

import numpy as np
import pytest

from ulmv.arch import ModelConfig, ParamStore, init_params
from ulmv.data import load_images, read_manifest, read_normalization
from ulmv.tensor import Tensor, backward
from ulmv.train import (PRESETS, ArrayDataset, OneCycleConfig, OptimizerState, SwaState, TrainConfig,
                        bce_loss, iterate_batches, onecycle_lr, sgd_momentum_step, swa_finalize,
                        swa_update, train_loop)

TINY = ModelConfig(input_size=64)


def single_weight_store(value=0.0):
    store = ParamStore()
    store.add("w", np.array([value]))
    return store


class TestBce:
    def test_confident_correct_is_near_zero(self):
        assert bce_loss(np.array([1 - 1e-12]), np.array([1.0])).item() < 1e-6

    def test_half_is_ln2(self):
        assert bce_loss(np.array([0.5, 0.5]), np.array([0.0, 1.0])).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_clamped_at_extremes(self):
        loss = bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])).item()
        assert loss == pytest.approx(-math.log(1e-7), rel=1e-9)

    def test_logit_gradient_is_residual_over_n(self, rng):
        from ulmv import ops
        z = Tensor(rng.standard_normal(5), requires_grad=True)
        y = np.array([0, 1, 1, 0, 1.0])
        backward(bce_loss(ops.sigmoid(z), y))
        p = 1 / (1 + np.exp(-z.data))
        np.testing.assert_allclose(z.grad, (p - y) / 5, atol=1e-12)

    def test_labels_validated(self):
        with pytest.raises(ValueError):
            bce_loss(np.array([0.5]), np.array([0.3]))
        with pytest.raises(ValueError):
            bce_loss(np.array([0.5, 0.5]), np.array([1.0]))


class TestSgd:
    def test_two_constant_gradient_steps(self):
        store = single_weight_store()
        state = OptimizerState(momentum=0.9, lr=0.1)
        for _ in range(2):
            store["w"].grad = np.array([1.0])
            sgd_momentum_step(store, state)
        assert store["w"].data[0] == pytest.approx(-0.29, abs=1e-15)

    def test_zero_momentum_is_plain_descent(self):
        store = single_weight_store(1.0)
        store["w"].grad = np.array([2.0])
        sgd_momentum_step(store, OptimizerState(momentum=0.0, lr=0.25))
        assert store["w"].data[0] == 0.5

    def test_zero_lr_is_a_no_op(self, rng):
        store = init_params(TINY)
        before = {k: v.data.copy() for k, v in store.items()}
        for t in store.params.values():
            t.grad = rng.standard_normal(t.shape)
        sgd_momentum_step(store, OptimizerState(lr=0.0))
        assert all((store[k].data == before[k]).all() for k in before)

    def test_missing_gradient_raises(self):
        store = single_weight_store()
        store["w"].grad = None
        with pytest.raises(RuntimeError, match="no gradient"):
            sgd_momentum_step(store, OptimizerState())


class TestOneCycle:
    @pytest.mark.parametrize("total", [3, 4, 10, 57, 1000])
    def test_endpoints_exact(self, total):
        cfg = OneCycleConfig(max_lr=0.05, total_steps=total, pct_start=0.3, div_factor=500, final_div_factor=500)
        assert abs(onecycle_lr(0, cfg) - 0.05 / 500) < 1e-12
        assert abs(onecycle_lr(cfg.peak_step, cfg) - 0.05) < 1e-12
        assert abs(onecycle_lr(total - 1, cfg) - 0.05 / 500) < 1e-12

    def test_two_steps_is_warm_up_only(self):
        cfg = OneCycleConfig(total_steps=2)
        assert [onecycle_lr(s, cfg) for s in range(2)] == [pytest.approx(1e-4, abs=1e-15), 0.05]

    def test_late_peak_still_anneals(self):
        cfg = OneCycleConfig(total_steps=4, pct_start=0.9)
        assert cfg.peak_step == 2
        assert abs(onecycle_lr(3, cfg) - 1e-4) < 1e-12

    def test_monotone_phases(self):
        cfg = OneCycleConfig(total_steps=200)
        lrs = [onecycle_lr(s, cfg) for s in range(200)]
        peak = cfg.peak_step
        assert all(a <= b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
        assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1:]))
        assert max(np.abs(np.diff(lrs))) < 0.05 * math.pi / peak

    def test_out_of_range_step(self):
        with pytest.raises(ValueError):
            onecycle_lr(10, OneCycleConfig(total_steps=10))


class TestSwa:
    def test_running_mean(self, rng):
        store = single_weight_store()
        state = SwaState()
        values = rng.standard_normal(7)
        for v in values:
            store["w"].data[:] = v
            swa_update(state, store)
        assert abs(state.shadow["w"][0] - values.mean()) < 1e-12
        assert state.n_snapshots == 7

    def test_finalize_requires_snapshots(self):
        with pytest.raises(ValueError):
            swa_finalize(SwaState(), init_params(TINY), TINY, [])

    def test_finalize_recomputes_bn_as_batch_average(self, rng):
        store = init_params(TINY)
        state = SwaState()
        swa_update(state, store)
        batches = [rng.standard_normal((2, 3, 64, 64)) for _ in range(3)]
        out = swa_finalize(state, store, TINY, batches)
        from ulmv import ops
        conv = [ops.conv2d(b, store["stage1.conv.weight"], store["stage1.conv.bias"], padding=1).data
                for b in batches]
        expected = np.mean([c.mean(axis=(0, 2, 3)) for c in conv], axis=0)
        np.testing.assert_allclose(out.buffers["stage1.bn.running_mean"], expected, atol=1e-12)
        # original store untouched
        assert (store.buffers["stage1.bn.running_mean"] == 0).all()


def test_prefetch_yields_every_index_once(rng):
    data = ArrayDataset(np.arange(23.0)[:, None], np.zeros(23))
    order = rng.permutation(23)
    seen = np.concatenate([imgs[:, 0] for _, imgs, _ in iterate_batches(data, order, 5)])
    np.testing.assert_array_equal(seen, order.astype(float))


def test_presets_parse():
    for name, kw in PRESETS.items():
        TrainConfig(**kw)
    assert PRESETS["smoke"]["epochs"] <= 200


@pytest.fixture(scope="module")
def tiny_data(tiny_synthetic_dir):
    manifest = read_manifest(tiny_synthetic_dir / "manifest.csv")
    mean, std = read_normalization(tiny_synthetic_dir / "normalization.txt")

    def ds(split):
        recs = manifest.split(split)
        return ArrayDataset(load_images(recs, tiny_synthetic_dir, mean, std), [r.label for r in recs])

    return ds("train"), ds("val")


class TestTrainLoop:
    def run(self, tiny_data, out_dir, **kw):
        tcfg = TrainConfig(**{**dict(epochs=3, batch_size=4, schedule="onecycle", swa=True), **kw})
        return train_loop(init_params(TINY, seed=tcfg.seed), TINY, tcfg, *tiny_data, out_dir=out_dir)

    def test_history_and_artifacts(self, tiny_data, tmp_path):
        result = self.run(tiny_data, tmp_path)
        lines = [json.loads(s) for s in (tmp_path / "history.jsonl").read_text().splitlines()]
        assert len(lines) == 3 == len(result.history)
        assert set(lines[0]) == {"epoch", "train_loss", "val_loss", "val_acc", "lr"}
        total = math.ceil(len(tiny_data[0]) / 4) * 3
        assert lines[-1]["lr"] == pytest.approx(0.05 / 500, abs=1e-12)
        assert lines[0]["lr"] == onecycle_lr(total // 3 - 1, OneCycleConfig(total_steps=total))
        for name in ("best.ulmv", "last.ulmv", "swa.ulmv"):
            assert (tmp_path / name).stat().st_size > 0

    def test_same_seed_is_bit_identical(self, tiny_data, tmp_path):
        self.run(tiny_data, tmp_path / "a", epochs=2)
        self.run(tiny_data, tmp_path / "b", epochs=2)
        assert (tmp_path / "a" / "last.ulmv").read_bytes() == (tmp_path / "b" / "last.ulmv").read_bytes()
        assert (tmp_path / "a" / "history.jsonl").read_text() == (tmp_path / "b" / "history.jsonl").read_text()

    def test_constant_zero_lr_leaves_weights(self, tiny_data):
        result = self.run(tiny_data, None, epochs=1, schedule="constant", lr=0.0, swa=False)
        fresh = init_params(TINY, seed=0)
        assert all((result.store[k].data == fresh[k].data).all() for k in fresh)

    def test_loss_decreases(self, tiny_data):
        result = self.run(tiny_data, None, epochs=4, swa=False, max_lr=0.02)
        assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]
