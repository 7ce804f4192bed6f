"""Binary cross-entropy training with SGD momentum, OneCycle and SWA."""
from __future__ import annotations

import json
import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .arch import ModelConfig, ParamStore, model_forward
from .checkpoint import save_checkpoint
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


def bce_loss(probs, labels) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1-1e-7]."""
    probs = T._as_tensor(probs)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise ValueError(f"labels shape {y.shape} != probs shape {probs.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    p = T.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    ll = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -T.mean(ll)


@dataclass
class OptimizerState:
    momentum: float = 0.9
    lr: float = 1e-3
    velocity: dict = field(default_factory=dict)


def sgd_momentum_step(store: ParamStore, state: OptimizerState) -> None:
    """``v <- mu*v + g; w <- w - lr*v`` (no dampening, no Nesterov, no decay)."""
    for name, t in store.items():
        if t.grad is None:
            raise RuntimeError(f"no gradient for trainable tensor {name}")
        if state.momentum > 0:
            v = state.velocity.get(name)
            if v is None:
                v = state.velocity[name] = np.zeros_like(t.data)
            v *= state.momentum
            v += t.grad
            step = v
        else:
            step = t.grad
        t.data -= state.lr * step


@dataclass(frozen=True)
class OneCycleConfig:
    max_lr: float = 0.05
    total_steps: int = 100
    pct_start: float = 0.3
    div_factor: float = 500.0
    final_div_factor: float = 500.0

    def __post_init__(self):
        if self.total_steps < 2:
            raise ValueError("OneCycle needs total_steps >= 2")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if not 0 < self.pct_start < 1:
            raise ValueError("pct_start must lie in (0, 1)")

    @property
    def peak_step(self) -> int:
        # leave at least one annealing step so the final lr is reached; with
        # only two steps the schedule is warm-up only
        last = self.total_steps - 1 if self.total_steps == 2 else self.total_steps - 2
        return min(max(round(self.pct_start * self.total_steps), 1), last)


def _cosine(start: float, end: float, frac: float) -> float:
    w = (1.0 + math.cos(math.pi * frac)) / 2.0
    return w * start + (1.0 - w) * end


def onecycle_lr(step: int, cfg: OneCycleConfig) -> float:
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    peak = cfg.peak_step
    initial = cfg.max_lr / cfg.div_factor
    final = cfg.max_lr / cfg.final_div_factor
    if step <= peak:
        return _cosine(initial, cfg.max_lr, step / peak)
    return _cosine(cfg.max_lr, final, (step - peak) / (cfg.total_steps - 1 - peak))


@dataclass
class SwaState:
    start_epoch: int = 0
    n_snapshots: int = 0
    shadow: dict = field(default_factory=dict)


def swa_update(state: SwaState, store: ParamStore) -> None:
    n = state.n_snapshots
    for name, t in store.items():
        if n == 0:
            state.shadow[name] = t.data.copy()
        else:
            state.shadow[name] = (state.shadow[name] * n + t.data) / (n + 1)
    state.n_snapshots = n + 1


def swa_finalize(state: SwaState, store: ParamStore, cfg: ModelConfig, bn_batches) -> ParamStore:
    """Averaged weights with batch-norm statistics recomputed over ``bn_batches``.

    Running statistics become the plain average of per-batch statistics.
    """
    if state.n_snapshots == 0:
        raise ValueError("SWA finalize called before any snapshot was absorbed")
    out = store.copy()
    for name, arr in state.shadow.items():
        out.params[name].data = arr.copy()
    for name in out.buffers:
        if name.endswith("running_mean"):
            out.buffers[name][:] = 0.0
        elif name.endswith("running_var"):
            out.buffers[name][:] = 1.0
    with no_grad():
        for k, images in enumerate(bn_batches):
            model_forward(images, out, cfg, training=True, bn_momentum=1.0 / (k + 1))
    return out


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    momentum: float = 0.9
    schedule: str = "constant"  # constant | onecycle
    lr: float = 1e-3
    max_lr: float = 0.05
    div_factor: float = 500.0
    final_div_factor: float = 500.0
    pct_start: float = 0.3
    swa: bool = False
    swa_start_frac: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ("constant", "onecycle"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def swa_start_epoch(self) -> int:
        return int(math.floor(self.swa_start_frac * self.epochs))


PRESETS: dict[str, dict] = {
    "baseline100": dict(epochs=100, schedule="constant", lr=1e-3, momentum=0.9, swa=False),
    "finetune300": dict(epochs=300, schedule="onecycle", max_lr=0.05, div_factor=500.0,
                        final_div_factor=500.0, pct_start=0.3, momentum=0.9, swa=True),
    "smoke": dict(epochs=20, batch_size=16, schedule="onecycle", max_lr=0.05, div_factor=500.0,
                  final_div_factor=500.0, pct_start=0.3, momentum=0.9, swa=True),
}


class ArrayDataset:
    """Images ``[N,C,H,W]`` (already normalised) with binary labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.images[idx], self.labels[idx]


def iterate_batches(data, order: np.ndarray, batch_size: int, prefetch: int = 4) -> Iterator:
    """Yield ``(start, images, labels)`` in ``order``; a loader thread runs ahead."""
    q: queue.Queue = queue.Queue(maxsize=prefetch)
    stop = threading.Event()

    def worker():
        try:
            for s in range(0, len(order), batch_size):
                if stop.is_set():
                    return
                q.put((s,) + tuple(data.batch(order[s:s + batch_size])))
        except Exception as exc:  # surfaced in the consumer
            q.put(exc)
            return
        q.put(None)

    th = threading.Thread(target=worker, daemon=True)
    th.start()
    try:
        while (item := q.get()) is not None:
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(0.01)


def predict(store: ParamStore, cfg: ModelConfig, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model_forward(images[s:s + batch_size], store, cfg).data)
    return np.concatenate(out) if out else np.zeros(0)


def _evaluate(store, cfg, data, batch_size):
    if data is None or len(data) == 0:
        return float("nan"), float("nan")
    probs = predict(store, cfg, data.images, batch_size)
    with no_grad():
        loss = bce_loss(Tensor(probs), data.labels).item()
    acc = float(np.mean((probs >= 0.5) == (data.labels == 1)))
    return loss, acc


def _json_float(v: float):
    return None if not math.isfinite(v) else v


def lr_for_step(step: int, tcfg: TrainConfig, total_steps: int) -> float:
    if tcfg.schedule == "constant":
        return tcfg.lr
    return onecycle_lr(step, OneCycleConfig(tcfg.max_lr, total_steps, tcfg.pct_start,
                                            tcfg.div_factor, tcfg.final_div_factor))


@dataclass
class TrainResult:
    history: list
    store: ParamStore
    swa_store: ParamStore | None
    best_store: ParamStore


def train_loop(store: ParamStore, cfg: ModelConfig, tcfg: TrainConfig, train: ArrayDataset,
               val: ArrayDataset | None = None, out_dir=None) -> TrainResult:
    """Run ``tcfg.epochs`` epochs of minibatch SGD.

    Writes ``history.jsonl``, ``best.ulmv``, ``last.ulmv`` and, with SWA
    enabled, ``swa.ulmv`` into ``out_dir`` when given.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.jsonl").write_text("")
    rng = np.random.default_rng(tcfg.seed)
    steps_per_epoch = math.ceil(len(train) / tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.epochs
    opt = OptimizerState(momentum=tcfg.momentum, lr=lr_for_step(0, tcfg, total_steps))
    swa = SwaState(start_epoch=tcfg.swa_start_epoch()) if tcfg.swa else None
    history = []
    best_acc, best_store = -1.0, store.copy()
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(train))
        total_loss = 0.0
        for start, images, labels in iterate_batches(train, order, tcfg.batch_size):
            opt.lr = lr_for_step(step, tcfg, total_steps)
            store.zero_grad()
            loss = bce_loss(model_forward(images, store, cfg, training=True), labels)
            if not math.isfinite(loss.item()):
                raise T.NonFiniteError(f"non-finite loss at epoch {epoch}, batch {start // tcfg.batch_size}")
            backward(loss)
            sgd_momentum_step(store, opt)
            total_loss += loss.item() * len(labels)
            step += 1
        val_loss, val_acc = _evaluate(store, cfg, val, tcfg.batch_size)
        rec = dict(epoch=epoch, train_loss=total_loss / len(train), val_loss=_json_float(val_loss),
                   val_acc=_json_float(val_acc), lr=opt.lr)
        history.append(rec)
        log.info("epoch %d train_loss %.4f val_acc %s lr %.3g", epoch, rec["train_loss"], val_acc, opt.lr)
        if out_dir is not None:
            with open(out_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        score = val_acc if math.isfinite(val_acc) else -rec["train_loss"]
        if score > best_acc:
            best_acc, best_store = score, store.copy()
            if out_dir is not None:
                save_checkpoint(out_dir / "best.ulmv", cfg, best_store)
        if swa is not None and epoch >= swa.start_epoch:
            swa_update(swa, store)

    swa_store = None
    if swa is not None and swa.n_snapshots:
        bn_batches = (b for _, b, _ in iterate_batches(train, np.arange(len(train)), tcfg.batch_size))
        swa_store = swa_finalize(swa, store, cfg, bn_batches)
    if out_dir is not None:
        save_checkpoint(out_dir / "last.ulmv", cfg, store)
        if swa_store is not None:
            save_checkpoint(out_dir / "swa.ulmv", cfg, swa_store)
    return TrainResult(history, store, swa_store, best_store)


def write_run_config(path, **sections) -> None:
    """Echo resolved settings as ``key=value`` lines."""
    lines = []
    for section in sections.values():
        d = asdict(section) if hasattr(section, "__dataclass_fields__") else dict(section)
        for k, v in d.items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")
