import numpy as np
import pytest

import oracles
from asd.evaluation import MetricsRecord, append_metrics, export_loss_distribution
from asd.losses import PerSampleLosses
from asd.plots import accuracy_curves, loss_histograms, plot_run, purity_curve


def test_loss_histogram_counts_match_binning_oracle(tmp_path, rng):
    values = np.concatenate([rng.gamma(2.0, 1.0, 300), rng.normal(8, 0.5, 40)])
    values[5] = values.max()  # a value exactly on the last edge
    flags = np.arange(340) >= 300
    dump = export_loss_distribution(tmp_path / "epoch_0003.csv", PerSampleLosses(np.abs(values), "sce"), flags, 3)
    edges, counts = loss_histograms(dump, tmp_path / "h.png", bins=25)
    assert (tmp_path / "h.png").stat().st_size > 0
    v = np.abs(values)
    assert counts["clean"].tolist() == oracles.histogram(v[~flags].tolist(), edges.tolist())
    assert counts["poisoned"].tolist() == oracles.histogram(v[flags].tolist(), edges.tolist())
    assert counts["clean"].sum() == 300 and counts["poisoned"].sum() == 40


def test_curves_cover_exactly_the_recorded_epochs(tmp_path):
    path = tmp_path / "metrics.csv"
    for e in (0, 1, 2, 5):
        append_metrics(path, MetricsRecord(e, "meta-split", 0.5, 0.1, 10, 0, 0.0, 1.0))
    assert accuracy_curves(path, tmp_path / "a.png") == [0, 1, 2, 5]
    assert purity_curve(path, tmp_path / "p.png") == [0, 1, 2, 5]


def test_missing_dumps_are_named(tmp_path):
    with pytest.raises(FileNotFoundError, match="metrics.csv"):
        plot_run(tmp_path, "curves")
    with pytest.raises(FileNotFoundError, match="losses"):
        plot_run(tmp_path, "loss-dist")
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        loss_histograms(tmp_path / "nope.csv", tmp_path / "x.png")
    with pytest.raises(ValueError):
        plot_run(tmp_path, "pie")
