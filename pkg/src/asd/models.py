"""Classifier architectures.

Every model takes NCHW float input in ``[0, 1]``, normalizes internally and
exposes ``layer_names``: its parameterized layers in forward order, which is what
virtual-model partitions select from.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "small-cnn"
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    width: int = 32

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unsupported architecture {self.arch!r}; choose from {sorted(ARCHITECTURES)}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


class Normalize(nn.Module):
    def __init__(self, channels):
        super().__init__()
        mean = CIFAR_MEAN if channels == 3 else (0.5,) * channels
        std = CIFAR_STD if channels == 3 else (0.25,) * channels
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def conv_bn(cin, cout, pool):
    layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class SmallCNN(nn.Module):
    """Four conv-BN-ReLU-pool blocks, global average pool, linear head."""

    def __init__(self, num_classes=10, in_channels=3, width=32):
        super().__init__()
        self.num_classes = num_classes
        widths = (width, 2 * width, 4 * width, 4 * width)
        self.norm = Normalize(in_channels)
        self.block1 = conv_bn(in_channels, widths[0], True)
        self.block2 = conv_bn(widths[0], widths[1], True)
        self.block3 = conv_bn(widths[1], widths[2], True)
        self.block4 = conv_bn(widths[2], widths[3], False)
        self.linear = nn.Linear(widths[3], num_classes)
        self.layer_names = ("block1", "block2", "block3", "block4", "linear")

    def forward(self, x):
        x = self.norm(x)
        for name in self.layer_names[:-1]:
            x = getattr(self, name)(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.linear(x)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """CIFAR-style ResNet-18 (3x3 stem, no max-pool)."""

    def __init__(self, num_classes=10, in_channels=3, width=64):
        super().__init__()
        self.num_classes = num_classes
        self.norm = Normalize(in_channels)
        self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(width), nn.ReLU(inplace=True))
        cin = width
        for i, (mult, stride) in enumerate([(1, 1), (2, 2), (4, 2), (8, 2)], start=1):
            cout = width * mult
            setattr(self, f"layer{i}", nn.Sequential(BasicBlock(cin, cout, stride), BasicBlock(cout, cout)))
            cin = cout
        self.linear = nn.Linear(cin, num_classes)
        self.layer_names = ("stem", "layer1", "layer2", "layer3", "layer4", "linear")

    def forward(self, x):
        x = self.norm(x)
        for name in self.layer_names[:-1]:
            x = getattr(self, name)(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.linear(x)


ARCHITECTURES = {"small-cnn": SmallCNN, "resnet18-like": ResNet18}


def build_model(spec, seed=0):
    """Deterministically initialized model for ``spec``."""
    if spec.arch not in ARCHITECTURES:
        raise ValueError(f"unsupported architecture {spec.arch!r}")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ARCHITECTURES[spec.arch](spec.num_classes, spec.input_shape[0], spec.width)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def parameter_checksum(model):
    """Exact fingerprint of all parameters (bytes of the concatenated tensors)."""
    return b"".join(p.detach().cpu().numpy().tobytes() for p in model.parameters())
