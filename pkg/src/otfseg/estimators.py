"""scikit-learn style wrappers around the functional API.

Every estimator takes plain hyper-parameters in ``__init__`` (so
``get_params``/``set_params``/``clone`` work) and stores fitted state in
trailing-underscore attributes. Images are ``(N, C, *spatial)`` float arrays
in [0, 1]; masks are ``(N, *spatial)`` integer label maps.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .baselines import TentConfig, tent_adapt
from .checkpoint import ModelCheckpoint
from .dpg import DPGConfig, build_dpg, encode_batch, pretrain_dpg
from .evaluation import build_report
from .exceptions import ContractError, ShapeError, ValidationError
from .inference import EpisodicSegmenter, TestInstance, predict_masks
from .model import ArchConfig, build_model, to_module
from .training import TrainConfig, train_plain, train_source


# ---------------------------------------------------------------- validation


def check_images(X, dimensionality: Optional[int] = None, in_channels: Optional[int] = None) -> np.ndarray:
    """Validate an image stack and return it as contiguous float32."""
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise ValidationError(f"images must be numeric, got dtype {X.dtype}")
    if X.ndim not in (4, 5):
        raise ShapeError(f"images must be (N, C, H, W) or (N, C, D, H, W), got shape {X.shape}")
    if len(X) == 0:
        raise ValidationError("no images given")
    if dimensionality is not None and X.ndim - 2 != dimensionality:
        raise ShapeError(f"expected {dimensionality} spatial axes, got {X.ndim - 2}")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ShapeError(f"expected {in_channels} channels, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("images contain NaN or inf")
    if X.min() < 0 or X.max() > 1:
        raise ValidationError("image intensities must lie in [0, 1]")
    return np.ascontiguousarray(X, dtype=np.float32)


def check_masks(y, X: np.ndarray, num_classes: Optional[int] = None) -> np.ndarray:
    """Validate label maps against their images."""
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValidationError("masks must hold integer labels")
    if y.shape != (X.shape[0], *X.shape[2:]):
        raise ShapeError(f"masks of shape {y.shape} do not match images {X.shape}")
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise ValidationError(f"mask labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def _infer_classes(y: np.ndarray, num_classes: Optional[int]) -> int:
    return int(num_classes) if num_classes is not None else max(2, int(y.max()) + 1)


def _train_config(est) -> TrainConfig:
    return TrainConfig(lam=est.lam, lr_max=est.lr_max, lr_min=est.lr_min, batch_size=est.batch_size,
                       epochs=est.epochs, seed=est.seed)


def _mean_dice(pred: np.ndarray, y: np.ndarray, num_classes: int) -> float:
    ids = [str(i) for i in range(len(y))]
    return build_report(dict(zip(ids, pred)), dict(zip(ids, y)), num_classes).mean_dice


# ---------------------------------------------------------------- estimators


class DomainPriorEncoder(TransformerMixin, BaseEstimator):
    """Denoising autoencoder whose frozen encoder maps images to domain codes.

    ``fit`` pretrains on an unlabeled corpus; ``transform`` returns codes of
    shape ``(N, code_channels, *spatial / 2**depth)``.
    """

    def __init__(self, depth=2, base_channels=16, epochs=30, lr_max=2e-3, lr_min=1e-5, batch_size=8, seed=0):
        self.depth = depth
        self.base_channels = base_channels
        self.epochs = epochs
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        X = check_images(X)
        cfg = DPGConfig(dimensionality=X.ndim - 2, in_channels=X.shape[1], depth=self.depth,
                        base_channels=self.base_channels)
        train = TrainConfig(lr_max=self.lr_max, lr_min=self.lr_min, batch_size=self.batch_size,
                            epochs=self.epochs, seed=self.seed)
        self.checkpoint_ = pretrain_dpg(X, cfg, train) if self.epochs > 0 else build_dpg(cfg, self.seed)
        self.config_ = cfg
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "DomainPriorEncoder":
        if ckpt.kind != "dpg":
            raise ContractError(f"expected a DPG checkpoint, got kind={ckpt.kind!r}")
        cfg = DPGConfig.from_dict(ckpt.config)
        est = cls(depth=cfg.depth, base_channels=cfg.base_channels)
        est.checkpoint_, est.config_ = ckpt, cfg
        return est

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        X = check_images(X, self.config_.dimensionality, self.config_.in_channels)
        return encode_batch(self.checkpoint_, torch.from_numpy(X)).numpy()


class AdaptiveUNetSegmenter(BaseEstimator):
    """Adaptive UNet trained on source data against a fixed domain prior.

    ``predict`` runs one independent episode per image: encode the domain
    code, then a single forward pass with per-instance statistics. No
    weights change at prediction time.
    """

    def __init__(self, encoder: Optional[DomainPriorEncoder] = None, num_classes=None, base_channels=16,
                 lam=1.0, epochs=30, lr_max=1e-3, lr_min=1e-5, batch_size=8, seed=0):
        self.encoder = encoder
        self.num_classes = num_classes
        self.base_channels = base_channels
        self.lam = lam
        self.epochs = epochs
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        if self.encoder is None:
            raise ValidationError("AdaptiveUNetSegmenter needs a fitted DomainPriorEncoder")
        check_is_fitted(self.encoder, "checkpoint_")
        dpg_cfg = self.encoder.config_
        X = check_images(X, dpg_cfg.dimensionality, dpg_cfg.in_channels)
        y = check_masks(y, X, self.num_classes)
        k = _infer_classes(y, self.num_classes)
        arch = ArchConfig(X.ndim - 2, X.shape[1], k, self.base_channels, "adabn", dpg_cfg.code_channels)
        init = build_model(arch, self.seed)
        self.checkpoint_ = train_source(init, self.encoder.checkpoint_, (X, y), _train_config(self))
        self.classes_ = np.arange(k)
        return self

    def _episodes(self, X, keep_probabilities=False):
        check_is_fitted(self, "checkpoint_")
        arch = ArchConfig.from_dict(self.checkpoint_.config)
        X = check_images(X, arch.dimensionality, arch.in_channels)
        seg = EpisodicSegmenter(self.checkpoint_, self.encoder.checkpoint_, keep_probabilities)
        return [seg(TestInstance(x, str(i))) for i, x in enumerate(X)]

    def predict(self, X) -> np.ndarray:
        return np.stack([r.mask for r in self._episodes(X)])

    def predict_proba(self, X) -> np.ndarray:
        return np.stack([r.probabilities for r in self._episodes(X, keep_probabilities=True)])

    def score(self, X, y) -> float:
        """Mean foreground Dice over instances."""
        pred = self.predict(X)
        return _mean_dice(pred, check_masks(y, np.asarray(X), len(self.classes_)), len(self.classes_))


class PlainUNetSegmenter(BaseEstimator):
    """Plain batch-norm UNet; ``stats_mode`` picks running or per-batch statistics at predict time."""

    def __init__(self, num_classes=None, base_channels=16, lam=1.0, epochs=30, lr_max=1e-3, lr_min=1e-5,
                 batch_size=8, seed=0, stats_mode="running"):
        self.num_classes = num_classes
        self.base_channels = base_channels
        self.lam = lam
        self.epochs = epochs
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.batch_size = batch_size
        self.seed = seed
        self.stats_mode = stats_mode

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X, self.num_classes)
        k = _infer_classes(y, self.num_classes)
        arch = ArchConfig(X.ndim - 2, X.shape[1], k, self.base_channels, "bn")
        self.checkpoint_ = train_plain(build_model(arch, self.seed), (X, y), _train_config(self))
        self.classes_ = np.arange(k)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        arch = ArchConfig.from_dict(self.checkpoint_.config)
        X = check_images(X, arch.dimensionality, arch.in_channels)
        if self.stats_mode not in ("running", "batch"):
            raise ValidationError(f"stats_mode must be 'running' or 'batch', got {self.stats_mode!r}")
        return predict_masks(to_module(self.checkpoint_), X, None, self.stats_mode, self.batch_size)

    def score(self, X, y) -> float:
        pred = self.predict(X)
        return _mean_dice(pred, check_masks(y, np.asarray(X), len(self.classes_)), len(self.classes_))


class TentAdapter(BaseEstimator):
    """Entropy-minimisation baseline wrapped around a fitted :class:`PlainUNetSegmenter`.

    ``fit(X)`` adapts BN affine parameters on the unlabeled target stack for
    ``shots`` epochs; ``predict`` then uses per-batch statistics.
    """

    def __init__(self, base: Optional[PlainUNetSegmenter] = None, shots=1, lr=1e-3, batch_size=8):
        self.base = base
        self.shots = shots
        self.lr = lr
        self.batch_size = batch_size

    def fit(self, X, y=None):
        if self.base is None:
            raise ValidationError("TentAdapter needs a fitted PlainUNetSegmenter")
        check_is_fitted(self.base, "checkpoint_")
        arch = ArchConfig.from_dict(self.base.checkpoint_.config)
        X = check_images(X, arch.dimensionality, arch.in_channels)
        dummy = np.zeros((len(X), *X.shape[2:]), np.int64)
        test_set = [TestInstance(x, str(i), m) for i, (x, m) in enumerate(zip(X, dummy))]
        cfg = TentConfig(self.shots, self.lr, self.batch_size)
        self.checkpoint_, _ = tent_adapt(self.base.checkpoint_, test_set, cfg)
        self.classes_ = self.base.classes_
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        arch = ArchConfig.from_dict(self.checkpoint_.config)
        X = check_images(X, arch.dimensionality, arch.in_channels)
        return predict_masks(to_module(self.checkpoint_), X, None, "batch", self.batch_size)

    def score(self, X, y) -> float:
        pred = self.predict(X)
        return _mean_dice(pred, check_masks(y, np.asarray(X), len(self.classes_)), len(self.classes_))


__all__ = [
    "AdaptiveUNetSegmenter",
    "DomainPriorEncoder",
    "PlainUNetSegmenter",
    "TentAdapter",
    "check_images",
    "check_masks",
]
