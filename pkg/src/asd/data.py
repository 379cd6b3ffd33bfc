"""Dataset sources: CIFAR-10 from its python pickle batches, and a procedural
CIFAR-shaped stand-in for machines without the real data.

Both return ``(images, labels)`` with images float32 ``(N, 32, 32, 3)`` in ``[0, 1]``.
"""
from __future__ import annotations

import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_ENV = "ASD_CIFAR10_ROOT"


def find_cifar10(root=None):
    """Directory holding ``data_batch_1..5`` and ``test_batch``, or ``None``."""
    candidates = [root, os.environ.get(CIFAR10_ENV), "~/.cache/cifar10", "./data"]
    for c in candidates:
        if not c:
            continue
        base = Path(c).expanduser()
        for d in (base, base / "cifar-10-batches-py"):
            if (d / "data_batch_1").is_file() and (d / "test_batch").is_file():
                return d
    return None


def _read_batch(path):
    with open(path, "rb") as f:
        d = pickle.load(f, encoding="bytes")
    x = d[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return x, np.asarray(d[b"labels"], dtype=np.int64)


def load_cifar10(root=None, train=True):
    d = find_cifar10(root)
    if d is None:
        raise FileNotFoundError(
            "CIFAR-10 python batches not found (looked in "
            + ", ".join(([str(root)] if root else []) + [f"${CIFAR10_ENV}", "~/.cache/cifar10", "./data"])
            + f"); download cifar-10-python.tar.gz, extract it and set {CIFAR10_ENV}"
        )
    names = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    parts = [_read_batch(d / n) for n in names]
    x = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    y = np.concatenate([p[1] for p in parts])
    return x, y


def stratified_subset(labels, fraction, seed=0):
    """Sorted indices keeping ``round(fraction * n_c)`` samples of every class."""
    if not 0 < fraction <= 1:
        raise ValueError(f"subset fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        k = int(round(fraction * len(members)))
        keep.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(keep))


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the procedural dataset.

    Each class owns a smooth random colour template.  A sample is its class
    template (randomly shifted and flipped) over a random smooth background,
    overlaid with a weaker template of a random other class.  ``max_distractor``
    bounds the distractor's relative strength; samples near that bound are the
    hard ones.
    """

    num_classes: int = 10
    size: int = 32
    blobs: int = 5
    max_shift: int = 4
    max_distractor: float = 0.8
    background: float = 0.35
    noise: float = 0.03
    template_seed: int = 1234


def _smooth_field(rng, size, blobs, channels=3):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    field = np.zeros((size, size, channels), dtype=np.float32)
    for _ in range(blobs):
        cy, cx = rng.uniform(-4, size + 4, 2)
        sigma = rng.uniform(3.0, 8.0)
        colour = rng.uniform(-1, 1, channels).astype(np.float32)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        field += g[..., None] * colour
    return field


def synthetic_templates(spec):
    rng = np.random.default_rng(spec.template_seed)
    pad = spec.size + 2 * spec.max_shift
    return np.stack([_smooth_field(rng, pad, spec.blobs * 2) for _ in range(spec.num_classes)])


def make_synthetic(n_per_class, seed=0, spec=SyntheticSpec()):
    """Generate ``n_per_class`` samples of each class; deterministic in ``seed``."""
    templates = synthetic_templates(spec)
    rng = np.random.default_rng(seed)
    c, s, m = spec.num_classes, spec.size, spec.max_shift
    labels = np.repeat(np.arange(c), n_per_class)
    rng.shuffle(labels)
    n = len(labels)
    images = np.empty((n, s, s, 3), dtype=np.float32)

    def crop(t):
        dy, dx = rng.integers(0, 2 * m + 1, 2)
        out = t[dy:dy + s, dx:dx + s]
        return out[:, ::-1] if rng.random() < 0.5 else out

    for i, y in enumerate(labels):
        other = (y + rng.integers(1, c)) % c
        strength = spec.max_distractor * rng.random() ** 2
        img = crop(templates[y]) + strength * crop(templates[other])
        img = img + spec.background * _smooth_field(rng, s, 3)
        img = 0.5 + 0.22 * img * rng.uniform(0.8, 1.2) + rng.uniform(-0.08, 0.08)
        img = img + spec.noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)
