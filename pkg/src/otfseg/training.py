"""Source-model training with a frozen domain prior generator."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Tuple

import numpy as np
import torch

from .checkpoint import ModelCheckpoint, state_to_arrays
from .exceptions import ContractError, ValidationError
from .losses import combined_loss, dice_loss
from .model import ArchConfig, to_module

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimisation recipe. ``momentum`` is Adam's beta1.

    Defaults are the 2D settings: Adam at 1e-4 annealed to 1e-5, batch 8.
    """

    lam: float = 1.0
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    momentum: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    eps_dice: float = 1e-6
    ce: str = "sigmoid"

    def __post_init__(self):
        if self.lam <= 0:
            raise ValidationError("lambda (BCE weight) must be positive")
        if self.lr_min > self.lr_max or self.lr_min < 0:
            raise ValidationError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if self.eps_dice <= 0:
            raise ValidationError("eps_dice must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps <= 0:
        return lr_max
    step = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total_steps))


def epoch_lr(epoch: int, cfg: TrainConfig) -> float:
    # stepped per epoch; the final epoch runs at lr_min
    return cosine_lr(epoch, cfg.epochs - 1, cfg.lr_max, cfg.lr_min)


def make_adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr_max, betas=(cfg.momentum, cfg.beta2), eps=cfg.adam_eps)


def as_arrays(dataset, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """Accept a DatasetManifest or an ``(images, masks)`` pair."""
    if hasattr(dataset, "arrays"):
        images, masks, _ = dataset.arrays(split)
    else:
        images, masks = dataset
    if masks is None:
        raise ValidationError("training needs ground-truth masks for every image")
    images = np.asarray(images, dtype=np.float32)
    masks = np.asarray(masks)
    if len(images) == 0:
        raise ValidationError("empty training set")
    if len(images) != len(masks):
        raise ValidationError(f"{len(images)} images but {len(masks)} masks")
    return images, masks


def run_epochs(
    net: torch.nn.Module,
    n: int,
    cfg: TrainConfig,
    batch_loss: Callable[[np.ndarray], Tuple[torch.Tensor, dict]],
    params=None,
) -> List[dict]:
    """Shared minibatch loop: seeded shuffling, Adam, per-epoch cosine lr.

    ``batch_loss(indices)`` returns the scalar loss plus extra per-batch
    numbers to average into the epoch's log row.
    """
    opt = make_adam(list(params) if params is not None else list(net.parameters()), cfg)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    net.train()
    for epoch in range(cfg.epochs):
        lr = epoch_lr(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        totals, count = {}, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, extra = batch_loss(idx)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            k = len(idx)
            count += k
            totals["mean_loss"] = totals.get("mean_loss", 0.0) + loss.item() * k
            for key, v in extra.items():
                totals[key] = totals.get(key, 0.0) + float(v) * k
        row = {"epoch": epoch, **{k: v / count for k, v in totals.items()}, "lr": lr}
        curve.append(row)
        log.info("epoch %d loss %.5f lr %.2e", epoch, row["mean_loss"], lr)
    net.eval()
    return curve


def _fit_segmenter(model: ModelCheckpoint, images, masks, cfg: TrainConfig, codes=None) -> List[dict]:
    net = to_module(model)
    x_all = torch.from_numpy(images)
    y_all = torch.from_numpy(masks.astype(np.int64))

    def batch_loss(idx):
        x = x_all[idx]
        code = codes[idx] if codes is not None else None
        logits = net(x, code, "batch")
        loss = combined_loss(logits, y_all[idx], cfg.lam, cfg.eps_dice, cfg.ce)
        with torch.no_grad():
            d = dice_loss(torch.sigmoid(logits), y_all[idx], cfg.eps_dice)
        return loss, {"mean_dice_loss": d.item()}

    curve = run_epochs(net, len(images), cfg, batch_loss)
    model.weights = state_to_arrays(net.state_dict())
    return curve


def _finish(model: ModelCheckpoint, cfg: TrainConfig, curve, extra=None) -> ModelCheckpoint:
    model.metadata.update(
        {"epochs": cfg.epochs, "seed": cfg.seed, "train_config": cfg.to_dict(), "loss_curve": curve, **(extra or {})}
    )
    return model


def train_source(model: ModelCheckpoint, dpg: ModelCheckpoint, dataset, cfg: TrainConfig) -> ModelCheckpoint:
    """Train an Adaptive UNet on source data, conditioning every AdaBN layer
    on codes from the frozen DPG. Returns a new checkpoint; inputs are untouched."""
    from .dpg import DPGConfig, encode_batch

    arch = ArchConfig.from_dict(model.config)
    if arch.norm != "adabn":
        raise ContractError("train_source needs an AdaBN model; use train_plain for norm='bn'")
    if dpg.kind != "dpg":
        raise ContractError(f"expected a DPG checkpoint, got kind={dpg.kind!r}")
    dpg_cfg = DPGConfig.from_dict(dpg.config)
    dpg_fp = dpg.fingerprint
    if model.dpg_fingerprint and model.dpg_fingerprint != dpg_fp:
        raise ContractError(f"model was paired with DPG {model.dpg_fingerprint}, got {dpg_fp}")
    if dpg_cfg.dimensionality != arch.dimensionality:
        raise ContractError("DPG and model dimensionality differ")
    if dpg_cfg.code_channels != arch.code_channels:
        raise ContractError(f"DPG emits {dpg_cfg.code_channels} code channels, model expects {arch.code_channels}")
    images, masks = as_arrays(dataset)
    if images.ndim != arch.dimensionality + 2:
        raise ContractError(f"dataset is {images.ndim - 2}D, model is {arch.dimensionality}D")

    # the DPG is frozen, so one pass per image is the same as encoding per batch
    codes = encode_batch(dpg, torch.from_numpy(images))
    out = model.copy()
    out.dpg_fingerprint = dpg_fp
    curve = _fit_segmenter(out, images, masks, cfg, codes)
    if dpg.fingerprint != dpg_fp:
        raise ContractError("DPG weights changed during source training")
    return _finish(out, cfg, curve)


def train_plain(model: ModelCheckpoint, dataset, cfg: TrainConfig) -> ModelCheckpoint:
    """Same recipe for the plain-BN UNet (no domain code)."""
    arch = ArchConfig.from_dict(model.config)
    if arch.norm != "bn":
        raise ContractError("train_plain needs a norm='bn' model")
    images, masks = as_arrays(dataset)
    out = model.copy()
    curve = _fit_segmenter(out, images, masks, cfg)
    return _finish(out, cfg, curve)


def write_loss_csv(curve: List[dict], path) -> None:
    import csv

    keys = ["epoch", "mean_loss", "lr"] + sorted({k for r in curve for k in r} - {"epoch", "mean_loss", "lr"})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in curve:
            w.writerow(row)
