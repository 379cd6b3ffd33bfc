"""Weak augmentation (random crop with padding + horizontal flip) on NCHW batches.

All randomness is drawn from a numpy ``Generator`` so runs replay exactly.
"""
import numpy as np
import torch
import torch.nn.functional as F


def weak_augment(x, rng, pad=4, flip=True):
    n, _, h, w = x.shape
    if n == 0:
        return x
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect") if pad else x
    dy = torch.from_numpy(rng.integers(0, 2 * pad + 1, size=n))
    dx = torch.from_numpy(rng.integers(0, 2 * pad + 1, size=n))
    rows = (dy[:, None] + torch.arange(h)[None, :])            # (n, h)
    cols = (dx[:, None] + torch.arange(w)[None, :])            # (n, w)
    if flip:
        flips = torch.from_numpy(rng.random(n) < 0.5)
        cols = torch.where(flips[:, None], cols.flip(1), cols)
    batch = torch.arange(n)[:, None, None]
    out = padded.permute(0, 2, 3, 1)[batch, rows[:, :, None], cols[:, None, :]]
    return out.permute(0, 3, 1, 2).contiguous()


def identity_augment(x, rng):
    return x
