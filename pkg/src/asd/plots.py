"""Static figures from a run directory: loss histograms, ACC/ASR curves, pool purity."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import read_loss_distribution, read_metrics  # noqa: E402

PLOT_KINDS = ("loss-dist", "curves", "purity", "all")


def histogram_counts(values, edges):
    counts, _ = np.histogram(values, bins=edges)
    return counts


def loss_histograms(dump_path, out_path, bins=40):
    """Clean and poisoned loss histograms overlaid on shared bins.  Returns the
    bin edges and the ``{"clean": counts, "poisoned": counts}`` that were drawn."""
    dump_path = Path(dump_path)
    if not dump_path.is_file():
        raise FileNotFoundError(f"loss dump {dump_path} not found")
    losses, flags, epoch = read_loss_distribution(dump_path)
    v = losses.values
    lo, hi = float(v.min()), float(v.max())
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    counts = {"clean": histogram_counts(v[~flags], edges), "poisoned": histogram_counts(v[flags], edges)}
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, colour in (("clean", "tab:blue"), ("poisoned", "tab:red")):
        ax.stairs(counts[name], edges, fill=True, alpha=0.5, color=colour, label=name)
    ax.set_xlabel(f"{losses.kind} loss")
    ax.set_ylabel("samples")
    ax.set_title(f"epoch {epoch}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return edges, counts


def _metrics(metrics_path):
    metrics_path = Path(metrics_path)
    if not metrics_path.is_file():
        raise FileNotFoundError(f"metrics file {metrics_path} not found")
    return read_metrics(metrics_path)


def accuracy_curves(metrics_path, out_path):
    """ACC and ASR per epoch; returns the epochs plotted."""
    recs = _metrics(metrics_path)
    epochs = [r.epoch for r in recs]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, [100 * r.acc for r in recs], label="ACC")
    ax.plot(epochs, [100 * r.asr for r in recs], label="ASR")
    ax.set_xlabel("epoch")
    ax.set_ylabel("%")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return epochs


def purity_curve(metrics_path, out_path):
    recs = _metrics(metrics_path)
    epochs = [r.epoch for r in recs]
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    ax1.plot(epochs, [100 * r.split_purity for r in recs], color="tab:red")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("poisoned in clean pool (%)", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r.pool_clean_size for r in recs], color="tab:gray", linestyle="--")
    ax2.set_ylabel("clean pool size")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return epochs


def plot_run(run_dir, kind="all"):
    """Write figures under ``run_dir/plots``; returns the written paths."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    run_dir = Path(run_dir)
    out = run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if kind in ("curves", "all"):
        accuracy_curves(run_dir / "metrics.csv", out / "acc_asr.png")
        written.append(out / "acc_asr.png")
    if kind in ("purity", "all"):
        purity_curve(run_dir / "metrics.csv", out / "purity.png")
        written.append(out / "purity.png")
    if kind in ("loss-dist", "all"):
        dumps = sorted((run_dir / "losses").glob("epoch_*.csv"))
        if not dumps:
            raise FileNotFoundError(f"no loss dumps under {run_dir / 'losses'}")
        for d in dumps:
            target = out / f"loss_{d.stem}.png"
            loss_histograms(d, target)
            written.append(target)
    return written
