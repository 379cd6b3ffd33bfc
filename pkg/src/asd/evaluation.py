"""ACC / ASR, split purity and the tabular dumps.

This is the only module that reads ground-truth poison flags.  Every float is
written with ``repr`` so dumps round-trip bit-exactly.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import PerSampleLosses, predict_proba


def predict(model, images, batch_size=512):
    return predict_proba(model, images, batch_size).argmax(-1).numpy()


def compute_acc(model, images, labels):
    """Fraction of clean test samples whose argmax prediction is the true label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(model, images) == labels))


def compute_asr(model, test_set, target_label=None):
    """Fraction of triggered non-target-class samples classified as the target."""
    target = test_set.target_label if target_label is None else target_label
    if len(test_set) == 0:
        raise ValueError("empty triggered test set")
    if np.any(test_set.true_labels == target):
        raise ValueError("ASR test set must not contain target-class samples")
    return float(np.mean(predict(model, test_set.images) == target))


def split_purity(pools, poisoned):
    """``(|poisoned in D_C| / |D_C|, |poisoned in D_C|)``; ``(0.0, 0)`` for an empty pool."""
    count = int(np.asarray(poisoned)[pools.clean].sum())
    if len(pools.clean) == 0:
        return 0.0, 0
    return count / len(pools.clean), count


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    stage: str
    acc: float
    asr: float
    pool_clean_size: int
    poisoned_in_clean_pool: int
    split_purity: float
    wall_time_s: float

    def __post_init__(self):
        for name in ("acc", "asr", "split_purity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.pool_clean_size < 0 or self.poisoned_in_clean_pool < 0:
            raise ValueError("counts must be nonnegative")

    def to_row(self):
        return {f.name: repr(getattr(self, f.name)) if f.type == "float" else str(getattr(self, f.name))
                for f in dataclasses.fields(self)}

    @classmethod
    def from_row(cls, row):
        casts = {"int": int, "float": float, "str": str}
        return cls(**{f.name: casts[f.type](row[f.name]) for f in dataclasses.fields(cls)})


METRICS_COLUMNS = tuple(f.name for f in dataclasses.fields(MetricsRecord))


def append_metrics(path, record):
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        if new:
            w.writeheader()
        w.writerow(record.to_row())


def read_metrics(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRecord.from_row(r) for r in reader]


LOSS_COLUMNS = ("index", "is_poisoned", "loss_value", "loss_kind", "epoch")


def export_loss_distribution(path, losses, poisoned, epoch):
    """One row per sample: ``index, is_poisoned, loss_value, loss_kind, epoch``."""
    poisoned = np.asarray(poisoned)
    if len(poisoned) != len(losses):
        raise ValueError(f"{len(losses)} losses but {len(poisoned)} poison flags")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOSS_COLUMNS)
        for i, (v, p) in enumerate(zip(losses.values.tolist(), poisoned.tolist())):
            w.writerow([i, int(p), repr(v), losses.kind, epoch])
    return path


def read_loss_distribution(path):
    """Returns ``(PerSampleLosses, poisoned flags, epoch)``."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != LOSS_COLUMNS:
            raise ValueError(f"{path}: unexpected loss-dump header {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty loss dump")
    rows.sort(key=lambda r: int(r["index"]))
    values = np.array([float(r["loss_value"]) for r in rows])
    flags = np.array([r["is_poisoned"] == "1" for r in rows])
    return PerSampleLosses(values, rows[0]["loss_kind"]), flags, int(rows[0]["epoch"])


POOL_COLUMNS = ("epoch", "index", "pool", "is_poisoned")


def export_pool_snapshot(path, pools, poisoned, epoch):
    mask = pools.clean_mask()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(POOL_COLUMNS)
        for i, (c, p) in enumerate(zip(mask.tolist(), np.asarray(poisoned).tolist())):
            w.writerow([epoch, i, "C" if c else "P", int(p)])
    return path


def read_pool_snapshot(path):
    """Returns ``(clean mask, poisoned flags, epoch)``."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != POOL_COLUMNS:
            raise ValueError(f"{path}: unexpected pool-snapshot header {reader.fieldnames}")
        rows = sorted(reader, key=lambda r: int(r["index"]))
    mask = np.array([r["pool"] == "C" for r in rows])
    flags = np.array([r["is_poisoned"] == "1" for r in rows])
    return mask, flags, int(rows[0]["epoch"]) if rows else -1


class Evaluator:
    """Epoch callback for the trainer: turns an ``EpochReport`` into a ``MetricsRecord``
    using the held-out test sets and the harness-only poison flags."""

    def __init__(self, test_images, test_labels, asr_set, poisoned=None, metrics_path=None,
                 dump_dir=None):
        self.test_images = test_images
        self.test_labels = test_labels
        self.asr_set = asr_set
        self.poisoned = poisoned
        self.metrics_path = metrics_path
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None

    def __call__(self, report):
        if report.pools is not None:
            purity, count = split_purity(report.pools, self.poisoned)
            clean_size = len(report.pools.clean)
        else:
            purity, count, clean_size = 0.0, 0, 0
        rec = MetricsRecord(
            epoch=report.epoch,
            stage=report.stage,
            acc=compute_acc(report.model, self.test_images, self.test_labels),
            asr=compute_asr(report.model, self.asr_set),
            pool_clean_size=clean_size,
            poisoned_in_clean_pool=count,
            split_purity=purity,
            wall_time_s=float(report.wall_time_s),
        )
        if self.metrics_path is not None:
            append_metrics(self.metrics_path, rec)
        if self.dump_dir is not None and self.poisoned is not None:
            e = report.epoch
            if report.losses is not None:
                export_loss_distribution(self.dump_dir / "losses" / f"epoch_{e:04d}.csv",
                                         report.losses, self.poisoned, e)
            if report.loss_after is not None:
                export_loss_distribution(self.dump_dir / "losses" / f"epoch_{e:04d}_reduction.csv",
                                         report.losses.reduction(report.loss_after), self.poisoned, e)
            if report.pools is not None:
                export_pool_snapshot(self.dump_dir / "pools" / f"epoch_{e:04d}.csv",
                                     report.pools, self.poisoned, e)
        return rec
