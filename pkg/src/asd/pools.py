"""Clean / polluted data pools and the three split strategies.

Every selection ranks by loss with ties broken by ascending dataset index, and
the seed indices are always pinned into the clean pool on top of the budget.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .losses import PerSampleLosses

logger = logging.getLogger(__name__)

CLASS_AWARE = "class-aware"
CLASS_AGNOSTIC = "class-agnostic"
META_SPLIT = "meta-split"
STAGES = (CLASS_AWARE, CLASS_AGNOSTIC, META_SPLIT)


class PoolInvariantError(RuntimeError):
    def __init__(self, message, pools=None):
        super().__init__(message)
        self.pools = pools


@dataclass(frozen=True, eq=False)
class DataPools:
    clean: np.ndarray      # labels used
    polluted: np.ndarray   # labels withheld
    seeds: np.ndarray

    @classmethod
    def from_clean(cls, clean, n, seeds=()):
        mask = np.zeros(n, dtype=bool)
        mask[clean] = True
        return cls(np.flatnonzero(mask), np.flatnonzero(~mask), np.asarray(seeds, dtype=np.int64))

    @property
    def size(self):
        return len(self.clean) + len(self.polluted)

    def clean_mask(self):
        mask = np.zeros(self.size, dtype=bool)
        mask[self.clean] = True
        return mask

    def validate(self, n):
        if len(np.intersect1d(self.clean, self.polluted)):
            raise PoolInvariantError("clean and polluted pools overlap", self)
        if len(np.union1d(self.clean, self.polluted)) != n or self.size != n:
            raise PoolInvariantError(f"pools do not cover all {n} indices", self)
        if not np.all(np.isin(self.seeds, self.clean)):
            raise PoolInvariantError("a seed index left the clean pool", self)
        return self

    def __eq__(self, other):
        return (np.array_equal(self.clean, other.clean)
                and np.array_equal(self.polluted, other.polluted)
                and np.array_equal(self.seeds, other.seeds))


@dataclass(frozen=True)
class SplitConfig:
    seeds_per_class: int = 10
    quota_step: int = 10           # per-class growth of the class-aware quota
    quota_interval: int = 5        # epochs between quota increases
    agnostic_percent: float = 50.0
    meta_percent: float = 50.0
    virtual_lr: float = 0.015
    virtual_optimizer: str = "sgd"
    virtual_batch_size: int = 128
    virtual_layers: str = "last3"
    seeds_in_quota: bool = False   # stage 1: seeds fill part of each class's quota instead of adding to it

    def __post_init__(self):
        for name in ("agnostic_percent", "meta_percent"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name} must be in [0, 100], got {v}")
        if self.quota_interval < 1:
            raise ValueError("quota_interval must be >= 1")
        if self.virtual_lr <= 0:
            raise ValueError("virtual_lr must be > 0")
        if self.seeds_per_class < 0 or self.quota_step < 0:
            raise ValueError("seeds_per_class and quota_step must be >= 0")
        if self.virtual_optimizer not in ("sgd", "adam"):
            raise ValueError(f"virtual_optimizer must be 'sgd' or 'adam', got {self.virtual_optimizer!r}")


@dataclass(frozen=True)
class StageSchedule:
    class_aware_end: int = 60
    class_agnostic_end: int = 90
    total_epochs: int = 120

    def __post_init__(self):
        if not 0 < self.class_aware_end <= self.class_agnostic_end <= self.total_epochs:
            raise ValueError(
                "schedule needs 0 < class_aware_end <= class_agnostic_end <= total_epochs, got "
                f"{self.class_aware_end}, {self.class_agnostic_end}, {self.total_epochs}"
            )

    def stage(self, epoch):
        if epoch < 0 or epoch >= self.total_epochs:
            raise ValueError(f"epoch {epoch} outside schedule [0, {self.total_epochs})")
        if epoch < self.class_aware_end:
            return CLASS_AWARE
        if epoch < self.class_agnostic_end:
            return CLASS_AGNOSTIC
        return META_SPLIT


def init_pools(n, seeds):
    return DataPools.from_clean(np.asarray(seeds, dtype=np.int64), n, seeds)


def class_aware_quota(epoch, cfg):
    return cfg.seeds_per_class + cfg.quota_step * (epoch // cfg.quota_interval)


def budget(percent, n):
    return math.floor(round(percent * n / 100, 9))


def lowest(values, k):
    """Positions of the ``k`` smallest values, ties by position."""
    return np.argsort(values, kind="stable")[:k]


def _values(losses):
    return losses.values if isinstance(losses, PerSampleLosses) else np.asarray(losses)


def class_aware_split(losses, labels, num_classes, quota, seeds):
    """Per assigned-label class, the ``quota`` lowest-loss non-seed samples, plus all seeds.

    ``quota`` is one count for every class or a per-class sequence.
    """
    values = _values(losses)
    labels = np.asarray(labels)
    n = len(values)
    if len(labels) != n:
        raise ValueError(f"losses ({n}) and labels ({len(labels)}) are misaligned")
    seeds = np.asarray(seeds, dtype=np.int64)
    is_seed = np.zeros(n, dtype=bool)
    is_seed[seeds] = True
    quotas = np.broadcast_to(np.asarray(quota, dtype=np.int64), (num_classes,))
    chosen = [seeds]
    for c in range(num_classes):
        members = np.flatnonzero((labels == c) & ~is_seed)
        k = int(quotas[c])
        if k > len(members):
            logger.warning("class %d: quota %d exceeds %d candidates, clamping", c, k, len(members))
        chosen.append(members[lowest(values[members], k)])
    return DataPools.from_clean(np.concatenate(chosen), n, seeds)


def class_agnostic_split(losses, percent, seeds):
    """The ``floor(percent * N / 100)`` lowest-loss samples overall, plus all seeds."""
    values = _values(losses)
    n = len(values)
    picked = lowest(values, budget(percent, n))
    return DataPools.from_clean(np.concatenate([picked, np.asarray(seeds, dtype=np.int64)]), n, seeds)


def meta_split_select(loss_before, loss_after, percent, seeds):
    """Keep the samples whose loss dropped least under the virtual update."""
    before, after = _values(loss_before), _values(loss_after)
    if before.shape != after.shape:
        raise ValueError(f"misaligned loss vectors: {before.shape} vs {after.shape}")
    return class_agnostic_split(before - after, percent, seeds)


def rebuild_pools(epoch, losses, labels, num_classes, seeds, cfg, schedule, loss_after=None):
    """Dispatch to the split for ``epoch``'s stage; returns ``(pools, stage)``.

    ``losses`` are the current model's per-sample SCE losses; the meta-split stage
    also needs ``loss_after`` from the virtual model.
    """
    stage = schedule.stage(epoch)
    if stage == CLASS_AWARE:
        quota = class_aware_quota(epoch, cfg)
        if cfg.seeds_in_quota:
            per_class = np.bincount(np.asarray(labels)[np.asarray(seeds, dtype=np.int64)], minlength=num_classes)
            quota = np.maximum(quota - per_class, 0)
        pools = class_aware_split(losses, labels, num_classes, quota, seeds)
    elif stage == CLASS_AGNOSTIC:
        pools = class_agnostic_split(losses, cfg.agnostic_percent, seeds)
    else:
        if loss_after is None:
            raise ValueError(f"epoch {epoch} is a meta-split epoch but no virtual-model losses were given")
        pools = meta_split_select(losses, loss_after, cfg.meta_percent, seeds)
    return pools.validate(len(_values(losses))), stage
