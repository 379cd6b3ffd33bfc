"""Losses and label primitives: CE, SCE, per-sample loss vectors, MixMatch.

Probability-level functions take ``pred`` of shape ``(..., C)`` on the simplex and
integer labels; they return one loss per row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .augment import weak_augment

PROB_FLOOR = 1e-7
LABEL_FLOOR = 1e-4
SCE_ALPHA = 0.1
SCE_BETA = 1.0

LOSS_KINDS = ("sce", "ce", "reduction")


def check_simplex(pred, atol=1e-6):
    if torch.any(pred < 0) or not torch.allclose(pred.sum(-1), torch.ones((), dtype=pred.dtype), atol=atol):
        raise ValueError("prediction is not a valid probability vector")


def cross_entropy(pred, label, floor=PROB_FLOOR, validate=False):
    """``-log pred[label]`` with the probability floored at ``floor``."""
    if validate:
        check_simplex(pred)
    p = pred.gather(-1, label.unsqueeze(-1)).squeeze(-1)
    return -torch.log(p.clamp(min=floor))


def reverse_cross_entropy(pred, label, label_floor=LABEL_FLOOR):
    """``-sum_j pred_j log q_j`` with ``q`` the one-hot label floored at ``label_floor``."""
    q = F.one_hot(label, pred.shape[-1]).to(pred.dtype).clamp(min=label_floor)
    return -(pred * torch.log(q)).sum(-1)


def symmetric_cross_entropy(pred, label, alpha=SCE_ALPHA, beta=SCE_BETA, validate=False):
    if validate:
        check_simplex(pred)
    return alpha * cross_entropy(pred, label) + beta * reverse_cross_entropy(pred, label)


def cross_entropy_grad(pred, label, floor=PROB_FLOOR):
    """d CE / d pred (only the label coordinate is nonzero)."""
    g = torch.zeros_like(pred)
    p = pred.gather(-1, label.unsqueeze(-1)).clamp(min=floor)
    return g.scatter(-1, label.unsqueeze(-1), -1.0 / p)


def symmetric_cross_entropy_grad(pred, label, alpha=SCE_ALPHA, beta=SCE_BETA, label_floor=LABEL_FLOOR):
    q = F.one_hot(label, pred.shape[-1]).to(pred.dtype).clamp(min=label_floor)
    return alpha * cross_entropy_grad(pred, label) - beta * torch.log(q)


@dataclass(frozen=True)
class PerSampleLosses:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("per-sample losses contain non-finite entries")

    def __len__(self):
        return len(self.values)

    def reduction(self, after):
        """Per-sample drop ``self - after`` (both must cover the same indices)."""
        if len(after) != len(self):
            raise ValueError(f"misaligned loss vectors: {len(self)} vs {len(after)}")
        return PerSampleLosses(self.values - after.values, "reduction")


def to_tensor(images):
    """NHWC float numpy -> NCHW float32 tensor."""
    if isinstance(images, torch.Tensor):
        return images
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)))


@torch.no_grad()
def predict_proba(model, images, batch_size=512):
    x = to_tensor(images)
    was_training = model.training
    model.eval()
    try:
        out = [F.softmax(model(x[i:i + batch_size]), dim=-1) for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out) if out else torch.empty(0)


def per_sample_losses(model, images, labels, kind="sce", batch_size=512):
    """Inference-mode loss of every sample against its assigned label, index-aligned."""
    if kind not in ("sce", "ce"):
        raise ValueError(f"per_sample_losses computes 'sce' or 'ce', not {kind!r}")
    probs = predict_proba(model, images, batch_size).double()
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    fn = symmetric_cross_entropy if kind == "sce" else cross_entropy
    return PerSampleLosses(fn(probs, y).numpy(), kind)


def sharpen(p, temperature):
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if temperature == 1:
        return p
    pt = p ** (1.0 / temperature)
    return pt / pt.sum(-1, keepdim=True)


@torch.no_grad()
def guess_labels(model, views, temperature):
    """Average softmax over the augmented ``views`` of one batch, then sharpen."""
    if len(views) == 0:
        raise ValueError("need at least one augmented view")
    probs = torch.stack([F.softmax(model(v), dim=-1) for v in views]).mean(0)
    return sharpen(probs, temperature)


def mixup_pair(x1, y1, x2, y2, alpha, rng):
    """MixUp with ``lam' = max(lam, 1 - lam)`` so the result stays closer to the first input."""
    lam = rng.beta(alpha, alpha)
    lam = max(lam, 1.0 - lam)
    return lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2, lam


@dataclass(frozen=True)
class MixMatchConfig:
    temperature: float = 0.5
    lambda_u: float = 15.0
    alpha: float = 0.75
    augmentations: int = 2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.augmentations < 1:
            raise ValueError("augmentations must be >= 1")


@dataclass
class MixMatchLoss:
    supervised: torch.Tensor
    unsupervised: torch.Tensor
    total: torch.Tensor


def mixmatch_batch_loss(model, x, y, u, cfg, rng, augment=weak_augment):
    """MixMatch loss on a labeled batch ``(x, y)`` and an unlabeled batch ``u``.

    ``u`` carries no labels by construction.  ``rng`` (numpy Generator) drives the
    augmentations, the MixUp coefficient and the mixing permutation.
    """
    if len(x) == 0:
        raise ValueError("empty labeled batch")
    num_classes = model.num_classes
    xa = augment(x, rng)
    targets_x = F.one_hot(y, num_classes).to(x.dtype)
    if len(u):
        views = [augment(u, rng) for _ in range(cfg.augmentations)]
        q = guess_labels(model, views, cfg.temperature)
        inputs = torch.cat([xa, *views])
        targets = torch.cat([targets_x] + [q] * cfg.augmentations)
    else:
        inputs, targets = xa, targets_x

    perm = torch.from_numpy(rng.permutation(len(inputs)))
    mixed_x, mixed_t, _ = mixup_pair(inputs, targets, inputs[perm], targets[perm], cfg.alpha, rng)

    logits = model(mixed_x)
    b = len(x)
    ls = -(F.log_softmax(logits[:b], dim=-1) * mixed_t[:b]).sum(-1).mean()
    if len(u):
        lu = ((F.softmax(logits[b:], dim=-1) - mixed_t[b:]) ** 2).mean()
    else:
        lu = logits.new_zeros(())
    return MixMatchLoss(ls, lu, ls + cfg.lambda_u * lu)
