import sys
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

sys.path.insert(0, str(Path(__file__).parent))


class LinearProbe(nn.Module):
    """Flatten + linear; small enough for exact oracles."""

    def __init__(self, in_features, num_classes, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.num_classes = num_classes
        self.fc = nn.Linear(in_features, num_classes)
        with torch.no_grad():
            self.fc.weight.copy_(torch.randn(num_classes, in_features, generator=g) * 0.3)
            self.fc.bias.copy_(torch.randn(num_classes, generator=g) * 0.1)

    def forward(self, x):
        return self.fc(x.flatten(1))


class LookupModel(nn.Module):
    """Predicts a fixed class per input; pixel [0, 0, 0] carries the sample id."""

    def __init__(self, outputs, num_classes, scale=100.0):
        super().__init__()
        self.num_classes = num_classes
        self.outputs = torch.as_tensor(outputs, dtype=torch.long)
        self.scale = scale
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        ids = x[:, 0, 0, 0].round().long()
        return nn.functional.one_hot(self.outputs[ids], self.num_classes).float() * self.scale + 0 * self.dummy


def id_images(n, h=2, w=2, c=1):
    """NHWC images whose first pixel is the sample index."""
    x = np.zeros((n, h, w, c), dtype=np.float32)
    x[:, 0, 0, 0] = np.arange(n)
    return x


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    by_criterion = {}
    for criterion, variant, passed, detail in RESULTS:
        by_criterion.setdefault(criterion, []).append((variant, passed, detail))
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(by_criterion):
        entries = by_criterion[criterion]
        verdict = "PASS" if all(p for _, p, _ in entries) else "FAIL"
        parts = "; ".join(f"[{v}] {'pass' if p else 'FAIL'}: {d}" for v, p, d in entries)
        terminalreporter.write_line(f"criterion {criterion}: {verdict}  {parts}")
