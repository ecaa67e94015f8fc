"""Segmentation losses: soft Dice, numerically stable BCE and their weighted sum."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .exceptions import ShapeError, ValidationError


def one_hot(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    """``(N, *spatial)`` integer labels -> ``(N, K, *spatial)`` float one-hot."""
    if mask.min() < 0 or mask.max() >= num_classes:
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    oh = F.one_hot(mask.long(), num_classes)
    return oh.movedim(-1, 1).to(torch.get_default_dtype())


def as_target(target: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Accept either a label map or an already one-hot target shaped like ``like``."""
    if target.shape == like.shape:
        return target.to(like.dtype)
    if target.ndim == like.ndim - 1 and target.shape[0] == like.shape[0] and target.shape[1:] == like.shape[2:]:
        if like.shape[1] == 1:
            return target.unsqueeze(1).to(like.dtype)
        return one_hot(target, like.shape[1]).to(like.dtype)
    raise ShapeError(f"target shape {tuple(target.shape)} does not match prediction {tuple(like.shape)}")


def foreground(x: torch.Tensor) -> torch.Tensor:
    # channel 0 is background unless the prediction is single-channel
    return x if x.shape[1] == 1 else x[:, 1:]


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`` per sample and
    foreground class, averaged."""
    if probs.ndim < 3:
        raise ShapeError("probs must be (batch, classes, *spatial)")
    target = as_target(target, probs)
    p, t = foreground(probs), foreground(target)
    dims = tuple(range(2, p.ndim))
    inter = (p * t).sum(dims)
    denom = p.sum(dims) + t.sum(dims)
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on sigmoid(logits), one-vs-rest per class.

    Uses ``max(l, 0) - l t + log1p(exp(-|l|))`` so large logits never overflow.
    """
    target = as_target(target, logits)
    loss = logits.clamp(min=0) - logits * target + torch.log1p(torch.exp(-logits.abs()))
    return loss.mean()


def softmax_ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    target = as_target(target, logits)
    return -(target * F.log_softmax(logits, dim=1)).sum(1).mean()


def combined_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    lam: float = 1.0,
    eps_dice: float = 1e-6,
    ce: str = "sigmoid",
) -> torch.Tensor:
    """``lam * BCE + Dice`` with Dice on sigmoid probabilities.

    ``ce='softmax'`` swaps the BCE term for softmax cross-entropy.
    """
    target = as_target(target, logits)
    if ce == "sigmoid":
        ce_term = bce_loss(logits, target)
    elif ce == "softmax":
        ce_term = softmax_ce_loss(logits, target)
    else:
        raise ValidationError(f"ce must be 'sigmoid' or 'softmax', got {ce!r}")
    return lam * ce_term + dice_loss(torch.sigmoid(logits), target, eps_dice)
