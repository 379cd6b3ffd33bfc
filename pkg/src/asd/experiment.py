"""Run orchestration: data + attack construction, the selected mode, and the run directory.

Run directory layout::

    config.resolved.yaml   the validated config, verbatim
    metrics.csv            one MetricsRecord per epoch
    losses/epoch_XXXX.csv  per-sample loss dumps (plus ``_reduction`` in meta-split epochs)
    pools/epoch_XXXX.csv   pool membership per epoch
    checkpoints/           model + optimizer + RNG per epoch
    summary.json           final ACC / ASR and run facts
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import dump_config
from .data import SyntheticSpec, load_cifar10, make_synthetic, stratified_subset
from .evaluation import Evaluator, compute_acc, compute_asr, export_pool_snapshot
from .models import parameter_checksum
from .poisoning import (
    TrainingSet,
    build_asr_test_set,
    build_poisoned_dataset,
    draw_seed_samples,
    save_manifest,
)
from .pools import PoolInvariantError
from .trainer import latest_checkpoint, load_checkpoint, run_asd, save_checkpoint, train_supervised, TrainState

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ASD_OUTPUT_ROOT"


@dataclass
class ExperimentData:
    train: object  # PoisonedDataset
    test_images: np.ndarray
    test_labels: np.ndarray
    asr_set: object  # TriggeredTestSet
    trigger: object


def resolve_output_dir(cfg, out=None):
    """``--out`` wins; otherwise ``output_dir``, placed under ``$ASD_OUTPUT_ROOT`` when relative."""
    path = Path(out if out is not None else cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def load_split(ds, train):
    if ds.source == "cifar10":
        x, y = load_cifar10(ds.root, train=train)
        if train and ds.subset_fraction < 1:
            keep = stratified_subset(y, ds.subset_fraction, ds.subset_seed)
            x, y = x[keep], y[keep]
        return x, y, 10
    spec = SyntheticSpec(max_distractor=ds.max_distractor)
    n = ds.train_per_class if train else ds.test_per_class
    # test data uses a different stream than train so the two never overlap
    x, y = make_synthetic(n, seed=ds.data_seed if train else ds.data_seed + 10_000, spec=spec)
    return x, y, spec.num_classes


def build_data(cfg):
    x, y, c = load_split(cfg.dataset, train=True)
    xt, yt, _ = load_split(cfg.dataset, train=False)
    trigger = cfg.attack.trigger.build(x.shape[1:])
    train = build_poisoned_dataset(x, y, c, cfg.attack.policy(), trigger)
    asr_set = build_asr_test_set(xt, yt, trigger, cfg.attack.target_label)
    return ExperimentData(train, xt, yt, asr_set, trigger)


def _write_summary(out, summary):
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _model_spec(cfg, data):
    h, w, c = data.train.images.shape[1:]
    return cfg.model.build(data.train.num_classes, (c, h, w))


def _prepare(cfg, out, resume):
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.resolved.yaml")
    metrics = out / "metrics.csv"
    if metrics.exists() and not resume:
        metrics.unlink()
    return metrics


def run_train_asd(cfg, out, resume=False):
    data = build_data(cfg)
    metrics = _prepare(cfg, out, resume)
    d = cfg.defense
    seeds = draw_seed_samples(data.train, d.split.seeds_per_class, d.seed_sample_seed)
    ckpt_dir = out / "checkpoints" if cfg.outputs.checkpoint else None
    state = None
    if resume:
        found = latest_checkpoint(out / "checkpoints")
        if found is None:
            raise FileNotFoundError(f"--resume given but no checkpoint under {out / 'checkpoints'}")
        state = load_checkpoint(found, d.lr)
        logger.info("resuming from %s (epoch %d)", found, state.epoch)
        _truncate_metrics(metrics, state.epoch)
    dumps = out if (cfg.outputs.dump_losses or cfg.outputs.dump_pools) else None
    evaluator = Evaluator(data.test_images, data.test_labels, data.asr_set, data.train.poisoned,
                          metrics_path=metrics, dump_dir=dumps)
    # the defense sees only images + assigned labels; poison flags go to the evaluator alone
    try:
        model, history = run_asd(
            data.train.defense_view(), seeds, d.schedule.build(), d.split.build(), d.mixmatch.build(),
            _model_spec(cfg, data), seed=cfg.seed, lr=d.lr, batch_size=d.batch_size, state=state,
            on_epoch=evaluator, checkpoint_dir=ckpt_dir,
        )
    except PoolInvariantError as err:
        if err.pools is not None:
            export_pool_snapshot(out / "pools" / "invariant_breach.csv", err.pools, data.train.poisoned, -1)
        raise
    if not cfg.outputs.dump_losses:
        _drop(out / "losses")
    if not cfg.outputs.dump_pools:
        _drop(out / "pools")
    return _finish(out, cfg, model, data, history)


def run_train_nodefense(cfg, out, resume=False):
    data = build_data(cfg)
    metrics = _prepare(cfg, out, False)
    b = cfg.baseline
    evaluator = Evaluator(data.test_images, data.test_labels, data.asr_set, data.train.poisoned,
                          metrics_path=metrics)
    model, history = train_supervised(
        data.train.defense_view(), _model_spec(cfg, data), b.epochs, seed=cfg.seed, lr=b.lr,
        momentum=b.momentum, weight_decay=b.weight_decay, batch_size=b.batch_size, on_epoch=evaluator,
    )
    if cfg.outputs.checkpoint:
        opt = torch.optim.SGD(model.parameters(), lr=b.lr)
        save_checkpoint(TrainState(model, opt, np.random.default_rng(cfg.seed), _model_spec(cfg, data),
                                   b.epochs, "supervised"), out / "checkpoints")
    return _finish(out, cfg, model, data, history)


def run_eval(cfg, out, checkpoint=None):
    data = build_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = checkpoint or cfg.checkpoint or latest_checkpoint(out / "checkpoints")
    if path is None or not Path(path).is_file():
        raise FileNotFoundError(f"no checkpoint to evaluate (looked for {path or out / 'checkpoints'})")
    state = load_checkpoint(path)
    return _write_summary(out, {
        "mode": "eval",
        "checkpoint": str(path),
        "acc": compute_acc(state.model, data.test_images, data.test_labels),
        "asr": compute_asr(state.model, data.asr_set),
        "epoch": state.epoch,
    })


def run_poison(cfg, out):
    data = build_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.resolved.yaml")
    save_manifest(data.train, out / "poisoned")
    return _write_summary(out, {
        "mode": "poison",
        "num_samples": len(data.train),
        "num_poisoned": int(data.train.poisoned.sum()),
        "target_label": cfg.attack.target_label,
    })


def _finish(out, cfg, model, data, history):
    summary = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "epochs": len(history),
        "acc": history[-1].acc if history else compute_acc(model, data.test_images, data.test_labels),
        "asr": history[-1].asr if history else compute_asr(model, data.asr_set),
        "max_split_purity": max((r.split_purity for r in history), default=0.0),
        "num_poisoned": int(data.train.poisoned.sum()),
        "model_checksum": parameter_checksum(model).hex(),
    }
    return _write_summary(out, summary)


def _truncate_metrics(path, epoch):
    """Keep only metric rows for epochs already covered by the checkpoint."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < epoch]
    path.write_text("".join(kept))


def _drop(directory):
    if directory.is_dir():
        for p in directory.glob("*"):
            p.unlink()
        directory.rmdir()


def run_experiment(cfg, out=None, resume=False, checkpoint=None):
    """Run ``cfg.mode``; returns ``(exit status, summary or None)``.  Invariant breaches
    give status 2, other failures propagate."""
    out = resolve_output_dir(cfg, out)
    start = time.perf_counter()
    try:
        if cfg.mode == "train-asd":
            summary = run_train_asd(cfg, out, resume)
        elif cfg.mode == "train-nodefense":
            summary = run_train_nodefense(cfg, out)
        elif cfg.mode == "eval":
            summary = run_eval(cfg, out, checkpoint)
        elif cfg.mode == "poison":
            summary = run_poison(cfg, out)
        elif cfg.mode == "plot":
            from .plots import plot_run

            written = plot_run(out)
            summary = {"mode": "plot", "files": [str(p) for p in written]}
        else:  # unreachable after validation
            raise ValueError(f"unknown mode {cfg.mode!r}")
    except PoolInvariantError as err:
        logger.error("pool invariant breached: %s", err)
        return 2, None
    logger.info("%s finished in %.1fs -> %s", cfg.mode, time.perf_counter() - start, out)
    return 0, summary
