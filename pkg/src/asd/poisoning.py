"""Poisoned dataset construction: BadNets / Blend triggers, poison sampling, seed draws.

Images live in the float pixel domain ``[0, 1]`` with layout ``(H, W, C)`` (or a
leading batch axis).  Triggers are stamped before any normalization.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

BADNETS = "badnets"
BLEND = "blend"
TRIGGER_KINDS = (BADNETS, BLEND)


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    """Trigger description.

    For ``badnets`` the ``patch`` array ``(h, w, C)`` is pasted with its top-left
    corner at ``anchor``.  For ``blend`` the full-size ``pattern`` is mixed in with
    weight ``blend_ratio``.
    """

    kind: str
    patch: np.ndarray | None = None
    anchor: tuple[int, int] = (0, 0)
    pattern: np.ndarray | None = None
    blend_ratio: float = 0.1

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}; expected one of {TRIGGER_KINDS}")
        if self.kind == BADNETS and self.patch is None:
            raise ValueError("badnets trigger needs a patch")
        if self.kind == BLEND:
            if self.pattern is None:
                raise ValueError("blend trigger needs a pattern")
            if not 0.0 <= self.blend_ratio <= 1.0:
                raise ValueError(f"blend_ratio must be in [0, 1], got {self.blend_ratio}")

    @classmethod
    def badnets(cls, size=2, value=1.0, anchor=(0, 0), channels=3):
        """Solid square patch, white by default, in the upper-left corner."""
        patch = np.full((size, size, channels), value, dtype=np.float32)
        return cls(kind=BADNETS, patch=patch, anchor=tuple(anchor))

    @classmethod
    def blend(cls, pattern, ratio=0.1):
        return cls(kind=BLEND, pattern=np.asarray(pattern, dtype=np.float32), blend_ratio=float(ratio))

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == BADNETS:
            d.update(patch=self.patch.tolist(), anchor=list(self.anchor))
        else:
            d.update(pattern=self.pattern.tolist(), blend_ratio=self.blend_ratio)
        return d

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == BADNETS:
            return cls(kind=BADNETS, patch=np.asarray(d["patch"], dtype=np.float32), anchor=tuple(d["anchor"]))
        return cls.blend(np.asarray(d["pattern"], dtype=np.float32), d["blend_ratio"])

    def __eq__(self, other):
        if not isinstance(other, TriggerSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def noise_pattern(shape, seed=0):
    """Uniform random-noise blend pattern (the stand-in for a fixed picture)."""
    return np.random.default_rng(seed).random(shape, dtype=np.float32)


def inject_badnets_trigger(image, spec):
    """Paste the patch onto ``image`` (``(H, W, C)`` or ``(N, H, W, C)``); returns a copy."""
    if spec.kind != BADNETS:
        raise ValueError(f"expected a badnets trigger, got {spec.kind!r}")
    out = np.array(image, copy=True)
    ph, pw = spec.patch.shape[:2]
    if ph == 0 or pw == 0:
        return out
    r, c = spec.anchor
    h, w = out.shape[-3], out.shape[-2]
    if r < 0 or c < 0 or r + ph > h or c + pw > w:
        raise ValueError(
            f"patch rows {r}:{r + ph}, cols {c}:{c + pw} fall outside a {h}x{w} image"
        )
    out[..., r:r + ph, c:c + pw, :] = spec.patch
    return out


def inject_blend_trigger(image, spec, value_range=(0.0, 1.0)):
    """``(1 - k) * image + k * pattern`` per channel, clamped to ``value_range``."""
    if spec.kind != BLEND:
        raise ValueError(f"expected a blend trigger, got {spec.kind!r}")
    image = np.asarray(image)
    if image.shape[-3:] != spec.pattern.shape:
        raise ValueError(f"image shape {image.shape[-3:]} does not match pattern {spec.pattern.shape}")
    k = spec.blend_ratio
    if k == 0.0:
        return np.array(image, copy=True)
    out = (1.0 - k) * image + k * spec.pattern
    return np.clip(out, *value_range).astype(image.dtype, copy=False)


def apply_trigger(images, spec):
    if spec.kind == BADNETS:
        return inject_badnets_trigger(images, spec)
    return inject_blend_trigger(images, spec)


@dataclass(frozen=True)
class PoisonPolicy:
    target_label: int = 3
    poison_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError(f"poison_rate must be in [0, 1], got {self.poison_rate}")
        if self.target_label < 0:
            raise ValueError(f"target_label must be nonnegative, got {self.target_label}")


@dataclass(frozen=True)
class TrainingSet:
    """What the defense is allowed to see: pixels and assigned labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)


@dataclass(eq=False)
class PoisonedDataset:
    images: np.ndarray          # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray          # assigned labels
    true_labels: np.ndarray     # ground-truth labels
    poisoned: np.ndarray        # bool flags, harness/evaluation only
    num_classes: int
    policy: PoisonPolicy = field(default_factory=PoisonPolicy)
    trigger: TriggerSpec | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def poison_indices(self):
        return np.flatnonzero(self.poisoned)

    def defense_view(self):
        return TrainingSet(self.images, self.labels, self.num_classes)

    def equals(self, other):
        return (
            self.num_classes == other.num_classes
            and self.policy == other.policy
            and self.trigger == other.trigger
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.true_labels, other.true_labels)
            and np.array_equal(self.poisoned, other.poisoned)
        )


def poison_count(rate, n):
    # round() guards against products like 0.29 * 100 = 28.999999999999996
    return math.floor(round(rate * n, 9))


def build_poisoned_dataset(images, labels, num_classes, policy, trigger):
    """Stamp ``trigger`` onto ``floor(rate * N)`` uniformly drawn samples and relabel them."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if policy.target_label >= num_classes:
        raise ValueError(f"target_label {policy.target_label} out of range for {num_classes} classes")
    n = len(labels)
    k = poison_count(policy.poison_rate, n)
    if policy.poison_rate > 0 and k == 0:
        warnings.warn(f"poison_rate {policy.poison_rate} x N={n} < 1; no samples poisoned", stacklevel=2)
    rng = np.random.default_rng(policy.seed)
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.empty(0, dtype=np.int64)

    out_images = images.copy()
    out_labels = labels.copy()
    flags = np.zeros(n, dtype=bool)
    if k:
        out_images[idx] = apply_trigger(images[idx], trigger)
        out_labels[idx] = policy.target_label
        flags[idx] = True
    logger.info("poisoned %d/%d samples with %s trigger -> label %d", k, n, trigger.kind, policy.target_label)
    return PoisonedDataset(out_images, out_labels, labels.copy(), flags, num_classes, policy, trigger)


@dataclass(frozen=True)
class TriggeredTestSet:
    """Non-target-class test images, all carrying the trigger."""

    images: np.ndarray
    true_labels: np.ndarray
    target_label: int

    def __post_init__(self):
        if np.any(self.true_labels == self.target_label):
            raise ValueError("triggered test set contains target-class samples")

    def __len__(self):
        return len(self.true_labels)


def build_asr_test_set(images, labels, trigger, target_label):
    labels = np.asarray(labels, dtype=np.int64)
    keep = labels != target_label
    triggered = apply_trigger(np.asarray(images, dtype=np.float32)[keep], trigger)
    return TriggeredTestSet(triggered, labels[keep], target_label)


@dataclass(frozen=True)
class SeedSet:
    indices: np.ndarray
    per_class: int

    def __len__(self):
        return len(self.indices)


def draw_seed_samples(dataset, w, seed=0):
    """Draw ``w`` known-clean samples per class (needs the ground-truth flags)."""
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(dataset.num_classes):
        pool = np.flatnonzero((dataset.labels == c) & ~dataset.poisoned)
        if len(pool) < w:
            raise ValueError(f"class {c} has only {len(pool)} clean samples, need {w}")
        if w:
            picked.append(rng.choice(pool, size=w, replace=False))
    idx = np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)
    return SeedSet(idx.astype(np.int64), w)


# -- manifest ---------------------------------------------------------------

MANIFEST_COLUMNS = ("index", "image_ref", "assigned_label", "ground_truth_label", "is_poisoned")


def save_manifest(dataset, directory):
    """Write ``header.json``, ``samples.csv`` and ``images.npy`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "images.npy", dataset.images)
    header = {
        "num_classes": dataset.num_classes,
        "num_samples": len(dataset),
        "image_shape": list(dataset.images.shape[1:]),
        "policy": {
            "target_label": dataset.policy.target_label,
            "poison_rate": dataset.policy.poison_rate,
            "seed": dataset.policy.seed,
        },
        "trigger": dataset.trigger.to_dict() if dataset.trigger is not None else None,
    }
    (directory / "header.json").write_text(json.dumps(header))
    with open(directory / "samples.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_COLUMNS)
        for i in range(len(dataset)):
            w.writerow([i, f"images.npy#{i}", int(dataset.labels[i]),
                        int(dataset.true_labels[i]), int(dataset.poisoned[i])])


def load_manifest(directory):
    directory = Path(directory)
    header = json.loads((directory / "header.json").read_text())
    images = np.load(directory / "images.npy")
    with open(directory / "samples.csv", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise ValueError(f"unexpected manifest columns {reader.fieldnames}")
        rows = list(reader)
    if len(rows) != header["num_samples"]:
        raise ValueError(f"manifest has {len(rows)} rows, header says {header['num_samples']}")
    order = [int(r["image_ref"].split("#", 1)[1]) for r in rows]
    trigger = TriggerSpec.from_dict(header["trigger"]) if header["trigger"] else None
    return PoisonedDataset(
        images=images[order],
        labels=np.array([int(r["assigned_label"]) for r in rows], dtype=np.int64),
        true_labels=np.array([int(r["ground_truth_label"]) for r in rows], dtype=np.int64),
        poisoned=np.array([r["is_poisoned"] == "1" for r in rows], dtype=bool),
        num_classes=header["num_classes"],
        policy=PoisonPolicy(**header["policy"]),
        trigger=trigger,
    )
