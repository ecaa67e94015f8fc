"""Comparison methods: direct testing and TENT-style entropy minimisation.

TENT deliberately breaks the on-the-fly constraints (it back-propagates over
the whole test set for one or more epochs); it exists only as a reference
point and always works on a private copy of the checkpoint.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import ModelCheckpoint, state_to_arrays
from .evaluation import DiceReport, build_report
from .exceptions import ContractError, ValidationError
from .inference import TestInstance, predict_masks
from .model import ArchConfig, norm_parameter_names, to_module


@dataclass
class TentConfig:
    shots: int = 1
    lr: float = 1e-3
    batch_size: int = 8

    def __post_init__(self):
        if self.shots < 1:
            raise ValidationError("shots must be >= 1")
        if self.lr < 0:
            raise ValidationError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _require_plain(model: ModelCheckpoint) -> ArchConfig:
    arch = ArchConfig.from_dict(model.config)
    if arch.norm != "bn":
        raise ContractError("baselines operate on the plain-BN UNet, not an AdaBN model")
    return arch


def _stack(test_set: Sequence[TestInstance], need_labels: bool = True):
    if not test_set:
        raise ValidationError("empty test set")
    if need_labels:
        missing = [t.instance_id for t in test_set if t.ground_truth is None]
        if missing:
            raise ValidationError(f"instances without ground truth: {missing[:5]}")
    return np.stack([np.asarray(t.image, dtype=np.float32) for t in test_set])


def _score(masks, test_set, arch: ArchConfig, regions, meta) -> DiceReport:
    return build_report(
        {t.instance_id: m for t, m in zip(test_set, masks)},
        {t.instance_id: t.ground_truth for t in test_set},
        arch.num_classes,
        regions,
        meta,
    )


def direct_test(
    plain_model: ModelCheckpoint,
    test_set: Sequence[TestInstance],
    stats_mode: str = "running",
    batch_size: int = 8,
    regions=None,
    metadata: Optional[dict] = None,
) -> DiceReport:
    """Score the source model on target data with no adaptation.

    ``stats_mode='running'`` (default) uses the frozen source BN statistics;
    ``'batch'`` normalises each batch of ``batch_size`` test images by its own
    statistics, in test-set order.
    """
    arch = _require_plain(plain_model)
    images = _stack(test_set)
    net = to_module(plain_model)
    masks = predict_masks(net, images, None, stats_mode, batch_size)
    meta = {"method": "direct", "stats_mode": stats_mode, "model_fingerprint": plain_model.fingerprint, **(metadata or {})}
    return _score(masks, test_set, arch, regions, meta)


def prediction_probs(logits: torch.Tensor) -> torch.Tensor:
    """Class probabilities matching the decision rule in :func:`inference.decode_logits`."""
    if logits.shape[1] <= 2:
        return torch.sigmoid(logits[:, -1:])
    return F.softmax(logits, dim=1)


def entropy_loss(probs: torch.Tensor) -> torch.Tensor:
    """Mean Shannon entropy (nats) per pixel.

    ``probs`` is ``(N, K, *spatial)`` summing to one over K, or ``(N, 1, *spatial)``
    holding the foreground probability of a binary problem. ``0 log 0 = 0``.
    """
    if probs.min() < 0 or probs.max() > 1:
        raise ValidationError("probabilities must lie in [0, 1]")
    if probs.shape[1] == 1:
        p = probs[:, 0]
        h = -(torch.xlogy(p, p) + torch.xlogy(1 - p, 1 - p))
    else:
        h = -torch.xlogy(probs, probs).sum(1)
    return h.mean()


def mean_entropy(model: ModelCheckpoint, test_set: Sequence[TestInstance], batch_size: int = 8) -> float:
    """Pixel-averaged prediction entropy under batch-statistics forwards."""
    net = to_module(model)
    images = _stack(test_set, need_labels=False)
    total = 0.0
    with torch.inference_mode():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(images[i : i + batch_size])
            total += entropy_loss(prediction_probs(net(x, None, "batch"))).item() * len(x)
    return total / len(images)


def tent_adapt(
    plain_model: ModelCheckpoint,
    test_set: Sequence[TestInstance],
    cfg: TentConfig,
    regions=None,
    metadata: Optional[dict] = None,
) -> Tuple[ModelCheckpoint, DiceReport]:
    """Entropy minimisation over the whole test set for ``cfg.shots`` epochs.

    Only BN gamma/beta are optimised (Adam); running statistics stay frozen
    and every forward uses current-batch statistics. Batches follow test-set
    order. Returns the adapted copy and its Dice report.
    """
    arch = _require_plain(plain_model)
    images = _stack(test_set)
    net = to_module(plain_model)
    trainable = set(norm_parameter_names(net))
    params = []
    for name, p in net.named_parameters():
        p.requires_grad_(name in trainable)
        if name in trainable:
            params.append(p)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    net.eval()  # keeps running statistics untouched
    for _ in range(cfg.shots):
        for i in range(0, len(images), cfg.batch_size):
            x = torch.from_numpy(images[i : i + cfg.batch_size])
            loss = entropy_loss(prediction_probs(net(x, None, "batch")))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

    adapted = plain_model.copy()
    adapted.weights = state_to_arrays(net.state_dict())
    adapted.metadata["tent"] = cfg.to_dict()

    label = {1: "tent-1shot", 10: "tent-10shot"}.get(cfg.shots, f"tent-{cfg.shots}shot")
    meta = {"method": label, "stats_mode": "batch", "tent": cfg.to_dict(),
            "model_fingerprint": plain_model.fingerprint, **(metadata or {})}
    masks = predict_masks(net, images, None, "batch", cfg.batch_size)
    return adapted, _score(masks, test_set, arch, regions, meta)
