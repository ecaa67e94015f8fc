"""Zero-shot, episodic inference: one image at a time, one forward pass, no
gradients, no state carried between images."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import ModelCheckpoint
from .dpg import to_autoencoder
from .evaluation import DiceReport, build_report
from .exceptions import ContractError, ShapeError, ValidationError
from .model import ArchConfig, to_module

BINARY_THRESHOLD = 0.5


@dataclass(frozen=True)
class TestInstance:
    image: np.ndarray
    instance_id: str
    ground_truth: Optional[np.ndarray] = None

    __test__ = False  # not a pytest class

    def without_label(self) -> "TestInstance":
        return replace(self, ground_truth=None)


@dataclass
class EpisodeResult:
    instance_id: str
    mask: np.ndarray
    probabilities: Optional[np.ndarray]
    wall_time: float
    code_fingerprint: str


def decode_logits(logits: torch.Tensor):
    """Probabilities and integer masks from ``(N, K, *spatial)`` logits.

    With K <= 2 the last channel is thresholded at 0.5 after a sigmoid;
    otherwise the mask is the argmax over classes.
    """
    k = logits.shape[1]
    if k <= 2:
        fg = torch.sigmoid(logits[:, -1])
        mask = (fg > BINARY_THRESHOLD).long()
        probs = torch.stack([1 - fg, fg], 1) if k == 2 else fg.unsqueeze(1)
    else:
        probs = torch.sigmoid(logits)
        mask = logits.argmax(1)
    return probs, mask


def _fingerprint_array(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().numpy().astype("<f4").tobytes()).hexdigest()[:16]


class EpisodicSegmenter:
    """Frozen Adaptive UNet + DPG pair that segments images one episode at a time.

    The torch modules are built once from the checkpoints, put in eval mode
    and have ``requires_grad`` switched off; every call runs under
    ``torch.inference_mode``.
    """

    def __init__(self, model: ModelCheckpoint, dpg: ModelCheckpoint, keep_probabilities: bool = False):
        arch = ArchConfig.from_dict(model.config)
        if arch.norm != "adabn":
            raise ContractError("episodic adaptation needs an AdaBN model")
        if model.dpg_fingerprint is not None and model.dpg_fingerprint != dpg.fingerprint:
            raise ContractError(
                f"model was trained with DPG {model.dpg_fingerprint}, got {dpg.fingerprint}"
            )
        self.arch = arch
        self.net = to_module(model)
        self.encoder = to_autoencoder(dpg)
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.keep_probabilities = keep_probabilities

    def __call__(self, instance: TestInstance) -> EpisodeResult:
        instance = instance.without_label()
        image = np.asarray(instance.image, dtype=np.float32)
        if image.ndim != self.arch.dimensionality + 1:
            raise ShapeError(
                f"expected a (C, *spatial) image with {self.arch.dimensionality} spatial axes, got {image.shape}"
            )
        t0 = time.perf_counter()
        with torch.inference_mode():
            x = torch.from_numpy(image).unsqueeze(0)
            code = self.encoder.encode(x)
            logits = self.net(x, code, "instance")
            probs, mask = decode_logits(logits)
        wall = time.perf_counter() - t0
        return EpisodeResult(
            instance.instance_id,
            mask[0].numpy().astype(np.int64),
            probs[0].numpy() if self.keep_probabilities else None,
            wall,
            _fingerprint_array(code),
        )


def adapt_and_segment(model: ModelCheckpoint, dpg: ModelCheckpoint, instance: TestInstance) -> EpisodeResult:
    """Segment one instance: encode its domain code, run one forward pass with
    per-instance feature statistics. Neither checkpoint is modified."""
    return EpisodicSegmenter(model, dpg, keep_probabilities=True)(instance)


def run_episodes(model: ModelCheckpoint, dpg: ModelCheckpoint, test_set: Sequence[TestInstance]) -> List[EpisodeResult]:
    segmenter = EpisodicSegmenter(model, dpg)
    return [segmenter(inst) for inst in test_set]


def episodic_eval(
    model: ModelCheckpoint,
    dpg: ModelCheckpoint,
    test_set: Sequence[TestInstance],
    regions=None,
    metadata: Optional[dict] = None,
) -> DiceReport:
    """Independent episodes over ``test_set``, scored against ground truth."""
    missing = [t.instance_id for t in test_set if t.ground_truth is None]
    if missing:
        raise ValidationError(f"instances without ground truth: {missing[:5]}")
    if not test_set:
        raise ValidationError("empty test set")
    results = run_episodes(model, dpg, test_set)
    meta = {
        "method": "adaptive-unet",
        "model_fingerprint": model.fingerprint,
        "dpg_fingerprint": dpg.fingerprint,
        "n_instances": len(test_set),
        "mean_episode_seconds": float(np.mean([r.wall_time for r in results])),
        **(metadata or {}),
    }
    return build_report(
        {r.instance_id: r.mask for r in results},
        {t.instance_id: t.ground_truth for t in test_set},
        ArchConfig.from_dict(model.config).num_classes,
        regions,
        meta,
    )


def instances_from_manifest(manifest, split: str = "test") -> List[TestInstance]:
    return [TestInstance(s.image, s.sample_id, s.mask) for s in manifest.iter_split(split)]


def predict_masks(net, images: np.ndarray, codes: Optional[torch.Tensor], stats_mode: str, batch_size: int = 8) -> np.ndarray:
    """Batched prediction for non-episodic evaluation (e.g. batch-statistics passes)."""
    out = []
    with torch.inference_mode():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.asarray(images[i : i + batch_size], dtype=np.float32))
            code = codes[i : i + batch_size] if codes is not None else None
            out.append(decode_logits(net(x, code, stats_mode))[1].numpy())
    return np.concatenate(out).astype(np.int64)
