"""Training: semi-supervised epochs over the two pools, the meta-split virtual
model, the staged defense loop and a plain supervised baseline.

All randomness (batch order, augmentation, MixUp) comes from one numpy
``Generator`` carried in :class:`TrainState`, so a run is replayable from a
checkpoint.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import weak_augment
from .losses import MixMatchConfig, mixmatch_batch_loss, per_sample_losses, to_tensor
from .models import ModelSpec, build_model
from .pools import META_SPLIT, SplitConfig, StageSchedule, rebuild_pools

logger = logging.getLogger(__name__)


# -- virtual model -----------------------------------------------------------

def select_layers(model, partition):
    """Resolve a partition name to layer names.

    ``last3``: the last three parameterized layers.  ``half``: the back half of
    the feature extractor plus the linear head.  Otherwise a comma-separated list.
    """
    names = tuple(model.layer_names)
    if partition == "last3":
        chosen = names[-3:]
    elif partition == "half":
        features = names[:-1]
        chosen = features[len(features) - len(features) // 2:] + names[-1:]
    else:
        chosen = tuple(s.strip() for s in partition.split(",") if s.strip())
        unknown = set(chosen) - set(names)
        if unknown:
            raise ValueError(f"unknown layers {sorted(unknown)}; model has {names}")
    if not chosen:
        raise ValueError(f"partition {partition!r} selects no layers")
    return chosen


def clone_virtual_model(model, partition="last3"):
    """Deep copy with only the partition's parameters trainable."""
    layers = select_layers(model, partition)
    virtual = copy.deepcopy(model)
    for p in virtual.parameters():
        p.requires_grad_(False)
    for name in layers:
        for p in getattr(virtual, name).parameters():
            p.requires_grad_(True)
    virtual.trainable_layers = layers
    return virtual


def virtual_supervised_epoch(virtual, images, labels, lr, optimizer="sgd", batch_size=128, rng=None):
    """One shuffled pass of CE descent over every sample, assigned labels.

    The forward runs in inference mode so batch-norm statistics stay those of the
    source model; only the trainable parameters move.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = to_tensor(images)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    params = [p for p in virtual.parameters() if p.requires_grad]
    if optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=lr)
    elif optimizer == "adam":
        opt = torch.optim.Adam(params, lr=lr)
    else:
        raise ValueError(f"unknown virtual optimizer {optimizer!r}")
    virtual.eval()
    order = torch.from_numpy(rng.permutation(len(y)))
    for start in range(0, len(y), batch_size):
        idx = order[start:start + batch_size]
        loss = F.cross_entropy(virtual(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return virtual


def meta_split_losses(model, images, labels, cfg, rng):
    """Per-sample SCE of a virtual copy after its one-epoch update."""
    virtual = clone_virtual_model(model, cfg.virtual_layers)
    virtual_supervised_epoch(virtual, images, labels, cfg.virtual_lr, cfg.virtual_optimizer,
                             cfg.virtual_batch_size, rng)
    return per_sample_losses(virtual, images, labels, "sce")


# -- semi-supervised training -----------------------------------------------

@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    spec: ModelSpec
    epoch: int = 0
    stage: str = ""


def new_train_state(spec, seed=0, lr=0.002):
    model = build_model(spec, seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    return TrainState(model, opt, np.random.default_rng(seed), spec)


class _Batches:
    """Endless reshuffled batches over an index set (short tails are dropped)."""

    def __init__(self, indices, batch_size, rng):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.size = min(batch_size, len(self.indices))
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self):
        if self.size == 0:
            return self.indices
        if len(self._order) < self.size:
            self._order = self.rng.permutation(self.indices)
        batch, self._order = self._order[:self.size], self._order[self.size:]
        return batch


def semi_supervised_epoch(state, images, labels, pools, cfg, batch_size=64, augment=weak_augment):
    """``ceil(N / batch_size)`` MixMatch steps; labeled from the clean pool, unlabeled
    from the polluted pool.  Returns the per-step total-loss trace."""
    if len(pools.clean) == 0:
        raise ValueError("clean pool is empty; cannot draw a labeled batch")
    x_all = to_tensor(images)
    y_all = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    labeled = _Batches(pools.clean, batch_size, state.rng)
    unlabeled = _Batches(pools.polluted, batch_size, state.rng)
    state.model.train()
    trace = []
    for _ in range(math.ceil(pools.size / batch_size)):
        xi = torch.from_numpy(labeled.next())
        ui = torch.from_numpy(unlabeled.next())
        loss = mixmatch_batch_loss(state.model, x_all[xi], y_all[xi], x_all[ui], cfg, state.rng, augment)
        if not torch.isfinite(loss.total):
            raise FloatingPointError(f"non-finite MixMatch loss at epoch {state.epoch}")
        state.optimizer.zero_grad()
        loss.total.backward()
        state.optimizer.step()
        trace.append((loss.supervised.item(), loss.unsupervised.item(), loss.total.item()))
    return trace


@dataclass
class EpochReport:
    """Snapshot handed to the epoch callback; the model must be treated as read-only."""

    epoch: int
    stage: str
    model: torch.nn.Module
    pools: object
    losses: object
    loss_after: object
    trace: list
    wall_time_s: float


def run_asd(data, seeds, schedule=StageSchedule(), split_cfg=SplitConfig(), mixmatch_cfg=MixMatchConfig(),
            model_spec=None, *, seed=0, lr=0.002, batch_size=64, state=None, on_epoch=None,
            checkpoint_dir=None, augment=weak_augment):
    """Staged defense over ``data`` (a :class:`~asd.poisoning.TrainingSet`).

    Each epoch: rank every sample by SCE under the current model, rebuild the
    pools for the epoch's stage (meta-split epochs first train a virtual copy),
    then run one semi-supervised epoch.  ``on_epoch`` receives an
    :class:`EpochReport` and its return values form the history.
    """
    if model_spec is None:
        h, w, c = data.images.shape[1:]
        model_spec = ModelSpec(num_classes=data.num_classes, input_shape=(c, h, w))
    if state is None:
        state = new_train_state(model_spec, seed, lr)
    seed_idx = np.asarray(getattr(seeds, "indices", seeds), dtype=np.int64)
    x = to_tensor(data.images)
    history = []
    while state.epoch < schedule.total_epochs:
        epoch = state.epoch
        start = time.perf_counter()
        losses = per_sample_losses(state.model, x, data.labels, "sce")
        loss_after = None
        if schedule.stage(epoch) == META_SPLIT:
            loss_after = meta_split_losses(state.model, x, data.labels, split_cfg, state.rng)
        pools, stage = rebuild_pools(epoch, losses, data.labels, data.num_classes, seed_idx,
                                     split_cfg, schedule, loss_after)
        state.stage = stage
        trace = semi_supervised_epoch(state, x, data.labels, pools, mixmatch_cfg, batch_size, augment)
        state.epoch += 1
        elapsed = time.perf_counter() - start
        logger.info("epoch %d [%s] |D_C|=%d loss=%.4f (%.1fs)", epoch, stage, len(pools.clean),
                    np.mean([t[2] for t in trace]), elapsed)
        if on_epoch is not None:
            history.append(on_epoch(EpochReport(epoch, stage, state.model, pools, losses, loss_after,
                                                trace, elapsed)))
        if checkpoint_dir is not None:
            save_checkpoint(state, checkpoint_dir)
    return state.model, history


# -- supervised baseline ----------------------------------------------------

def train_supervised(data, model_spec, epochs, *, seed=0, lr=0.1, momentum=0.9, weight_decay=5e-4,
                     batch_size=128, augment=weak_augment, on_epoch=None):
    """Plain SGD training on assigned labels (the no-defense baseline).

    The learning rate drops 10x at 50% and 75% of ``epochs``.
    """
    model = build_model(model_spec, seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    milestones = sorted({max(1, epochs // 2), max(1, (3 * epochs) // 4)})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones, gamma=0.1)
    x = to_tensor(data.images)
    y = torch.as_tensor(data.labels, dtype=torch.long)
    history = []
    for epoch in range(epochs):
        start = time.perf_counter()
        model.train()
        order = torch.from_numpy(rng.permutation(len(y)))
        losses = []
        for i in range(0, len(y), batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                continue
            loss = F.cross_entropy(model(augment(x[idx], rng)), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        sched.step()
        elapsed = time.perf_counter() - start
        logger.info("supervised epoch %d loss=%.4f (%.1fs)", epoch, np.mean(losses), elapsed)
        if on_epoch is not None:
            history.append(on_epoch(EpochReport(epoch, "supervised", model, None, None, None,
                                                losses, elapsed)))
    return model, history


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(state, directory, extra=None):
    """``epoch_XXXX.pt`` (parameters + optimizer) and an ``epoch_XXXX.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"epoch_{state.epoch:04d}"
    torch.save({"model": state.model.state_dict(), "optimizer": state.optimizer.state_dict()},
               directory / f"{stem}.pt")
    sidecar = {
        "spec": {**state.spec.__dict__, "input_shape": list(state.spec.input_shape)},
        "epoch": state.epoch,
        "stage": state.stage,
        "rng_state": state.rng.bit_generator.state,
        **(extra or {}),
    }
    (directory / f"{stem}.json").write_text(json.dumps(sidecar))
    return directory / f"{stem}.pt"


def latest_checkpoint(directory):
    found = sorted(Path(directory).glob("epoch_*.pt"))
    return found[-1] if found else None


def load_checkpoint(path, lr=0.002):
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    spec_d = dict(sidecar["spec"])
    spec_d["input_shape"] = tuple(spec_d["input_shape"])
    spec = ModelSpec(**spec_d)
    state = new_train_state(spec, 0, lr)
    blob = torch.load(path, weights_only=True)
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.rng.bit_generator.state = sidecar["rng_state"]
    state.epoch = sidecar["epoch"]
    state.stage = sidecar["stage"]
    return state
