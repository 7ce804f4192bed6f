"""Confusion counts, the four classification metrics and split evaluation."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .arch import ModelConfig, ParamStore, model_forward
from .data import SplitManifest, load_images, missing_files
from .tensor import no_grad

REPORT_FIELDS = ["split", "n", "threshold", "tp", "fp", "tn", "fn",
                 "accuracy", "precision", "recall", "f1", "degenerate_flags"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(probs, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Counts with the rule: predict 1 iff ``p >= threshold``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValueError("probs and labels differ in length")
    if probs.size == 0:
        raise ValueError("confusion of an empty prediction set")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    pred = probs >= threshold
    pos = labels == 1
    return ConfusionCounts(tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
                           tn=int(np.sum(~pred & ~pos)), fn=int(np.sum(~pred & pos)))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()


def _ratio(num: float, den: float, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionCounts) -> Metrics:
    """Accuracy, precision, recall, F1; any 0/0 becomes 0 and is flagged."""
    if c.total <= 0:
        raise ValueError("metrics of an empty confusion matrix")
    flags: list[str] = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    return Metrics((c.tp + c.tn) / c.total, precision, recall, f1, tuple(flags))


@dataclass
class MetricsReport:
    split: str
    n: int
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate_flags: list

    @classmethod
    def build(cls, split: str, threshold: float, counts: ConfusionCounts) -> "MetricsReport":
        m = metrics(counts)
        return cls(split, counts.total, threshold, counts.tp, counts.fp, counts.tn, counts.fn,
                   m.accuracy, m.precision, m.recall, m.f1, list(m.degenerate))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ULMV_THREADS", "1")))
    except ValueError:
        return 1


def predict_images(store: ParamStore, cfg: ModelConfig, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Probabilities, fanned out over ``ULMV_THREADS`` worker threads; order preserved."""
    starts = list(range(0, len(images), batch_size))

    def run(s):
        with no_grad():
            return model_forward(images[s:s + batch_size], store, cfg).data

    workers = min(_threads(), max(1, len(starts)))
    if workers == 1:
        parts = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    return np.concatenate(parts) if parts else np.zeros(0)


def evaluate_split(store: ParamStore, cfg: ModelConfig, manifest: SplitManifest, root, split: str,
                   mean, std, threshold: float = 0.5, out_dir=None,
                   batch_size: int = 32) -> MetricsReport:
    """Score one split; optionally write ``metrics_<split>.json`` and ``predictions_<split>.csv``."""
    records = sorted(manifest.split(split), key=lambda r: (r.source_id, r.grid_y, r.grid_x))
    if not records:
        raise ValueError(f"split {split!r} has no kept records")
    missing = missing_files(records, root)
    if missing:
        raise FileNotFoundError(f"{len(missing)} tile file(s) missing: {', '.join(missing)}")
    probs = predict_images(store, cfg, load_images(records, root, mean, std), batch_size)
    labels = np.array([r.label for r in records])
    report = MetricsReport.build(split, threshold, confusion(probs, labels, threshold))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"metrics_{split}.json").write_text(report.to_json() + "\n")
        with open(out_dir / f"predictions_{split}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label", "prob", "pred"])
            for r, p in zip(records, probs):
                w.writerow([r.path, r.label, repr(float(p)), int(p >= threshold)])
    return report
