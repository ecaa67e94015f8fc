"""Domain Prior Generator: a denoising autoencoder whose frozen encoder
turns any image into a domain code.

The autoencoder reuses the UNet conv block but has no skip connections, so
everything the decoder needs has to pass through the bottleneck.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .checkpoint import ModelCheckpoint, state_to_arrays
from .exceptions import ContractError, ShapeError, ValidationError
from .model import ConvBlock, _conv
from .normalization import DEFAULT_EPS, DomainCode
from .training import TrainConfig, run_epochs


@dataclass
class AugSpec:
    """Input corruption for denoising pretraining (intensities in [0, 1])."""

    gamma_range: Tuple[float, float] = (0.8, 1.25)
    noise_std: float = 0.02
    blur_sigma_range: Tuple[float, float] = (0.0, 0.5)
    flip_prob: float = 0.5

    def __post_init__(self):
        self.gamma_range = tuple(float(v) for v in self.gamma_range)
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ValidationError(f"gamma_range must satisfy 0 < lo <= hi, got {self.gamma_range}")
        lo, hi = self.blur_sigma_range
        if not 0 <= lo <= hi:
            raise ValidationError(f"blur_sigma_range must satisfy 0 <= lo <= hi, got {self.blur_sigma_range}")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")
        if not 0 <= self.flip_prob <= 1:
            raise ValidationError("flip_prob must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugSpec":
        return cls((1.0, 1.0), 0.0, (0.0, 0.0), 0.0)


@dataclass
class DPGConfig:
    dimensionality: int = 2
    in_channels: int = 1
    depth: int = 2
    base_channels: int = 16
    code_channels: Optional[int] = None
    convs_per_block: int = 2
    eps: float = DEFAULT_EPS
    momentum: float = 0.1
    augmentation: AugSpec = field(default_factory=AugSpec)

    # ConvBlock reads these
    norm = "bn"
    track_running_stats = False

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugSpec(**self.augmentation)
        if self.dimensionality not in (2, 3):
            raise ValidationError(f"dimensionality must be 2 or 3, got {self.dimensionality}")
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValidationError("depth, base_channels and in_channels must be positive")
        expected = self.base_channels * 2 ** (self.depth - 1)
        if self.code_channels is None:
            self.code_channels = expected
        elif self.code_channels != expected:
            raise ValidationError(
                f"code_channels must equal base_channels * 2**(depth-1) = {expected}, got {self.code_channels}"
            )

    @property
    def ladder(self):
        return [self.base_channels * 2**i for i in range(self.depth)]

    def code_shape(self, spatial) -> tuple:
        return (self.code_channels, *(s // 2**self.depth for s in spatial))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = asdict(self.augmentation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DPGConfig":
        return cls(**d)


class AutoEncoder(nn.Module):
    def __init__(self, cfg: DPGConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.ladder
        self.encoder = nn.ModuleDict()
        for i in range(cfg.depth):
            self.encoder[f"block{i}"] = ConvBlock(cfg, cfg.in_channels if i == 0 else ch[i - 1], ch[i])
        self.decoder = nn.ModuleDict()
        for i in range(cfg.depth - 1, -1, -1):
            self.decoder[f"block{i}"] = ConvBlock(cfg, ch[i], ch[max(i - 1, 0)])
        self.head = _conv(cfg.dimensionality)(ch[0], cfg.in_channels, 1)
        self._pool = F.max_pool2d if cfg.dimensionality == 2 else F.max_pool3d
        self._mode = "bilinear" if cfg.dimensionality == 2 else "trilinear"

    def _check(self, x):
        cfg = self.cfg
        if x.ndim != cfg.dimensionality + 2 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"DPG expects {cfg.dimensionality}D input with {cfg.in_channels} channel(s), got {tuple(x.shape)}")
        if any(s % 2**cfg.depth for s in x.shape[2:]):
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {2**cfg.depth}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        mode = "batch" if self.training else "running"
        for i in range(self.cfg.depth):
            x = self._pool(self.encoder[f"block{i}"](x, None, mode), 2)
        return x

    def decode(self, code: torch.Tensor) -> torch.Tensor:
        mode = "batch" if self.training else "running"
        x = code
        for i in range(self.cfg.depth - 1, -1, -1):
            x = F.interpolate(x, scale_factor=2, mode=self._mode, align_corners=False)
            x = self.decoder[f"block{i}"](x, None, mode)
        return torch.sigmoid(self.head(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def build_dpg(config: Union[DPGConfig, dict], seed: int = 0) -> ModelCheckpoint:
    cfg = config if isinstance(config, DPGConfig) else DPGConfig.from_dict(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = AutoEncoder(cfg)
    return ModelCheckpoint("dpg", cfg.to_dict(), state_to_arrays(net.state_dict()), metadata={"init_seed": seed})


def to_autoencoder(ckpt: ModelCheckpoint) -> AutoEncoder:
    if ckpt.kind != "dpg":
        raise ContractError(f"expected a DPG checkpoint, got kind={ckpt.kind!r}")
    net = AutoEncoder(DPGConfig.from_dict(ckpt.config))
    net.load_state_dict(ckpt.torch_state())
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


# ------------------------------------------------------------ augmentation


def _augment(image: np.ndarray, spec: AugSpec, rng: np.random.Generator):
    """Returns ``(corrupted_input, clean_target)``; flips hit both, intensity ops only the input."""
    spatial = tuple(range(1, image.ndim))
    clean = image
    for ax in spatial:
        if rng.random() < spec.flip_prob:
            clean = np.flip(clean, axis=ax)
    clean = np.ascontiguousarray(clean)
    x = clean.astype(np.float64)
    g = rng.uniform(*spec.gamma_range)
    if g != 1.0:
        x = np.power(x, g)
    sigma = rng.uniform(*spec.blur_sigma_range)
    if sigma > 0:
        x = np.stack([ndimage.gaussian_filter(c, sigma) for c in x])
    if spec.noise_std > 0:
        x = x + rng.normal(0, spec.noise_std, x.shape)
    return np.clip(x, 0, 1).astype(np.float32), clean.astype(np.float32)


def _check_unit_range(image: np.ndarray) -> None:
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise ValidationError("augment expects finite intensities in [0, 1]")


def augment(image: np.ndarray, spec: AugSpec, seed: int) -> np.ndarray:
    """Random flip, gamma, blur and additive noise on a ``(C, *spatial)`` image."""
    image = np.asarray(image, dtype=np.float32)
    _check_unit_range(image)
    return _augment(image, spec, np.random.default_rng(seed))[0]


def augment_batch(images: np.ndarray, spec: AugSpec, rng: np.random.Generator):
    pairs = [_augment(im, spec, rng) for im in images]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# ---------------------------------------------------------------- training


def _corpus_images(corpus) -> np.ndarray:
    if hasattr(corpus, "arrays"):
        parts = [corpus.arrays(s)[0] for s in corpus.splits if corpus.entries(s)]
        images = np.concatenate(parts) if parts else np.zeros((0,))
    elif isinstance(corpus, (list, tuple)) and corpus and hasattr(corpus[0], "arrays"):
        images = np.concatenate([_corpus_images(c) for c in corpus])
    else:
        images = np.asarray(corpus, dtype=np.float32)
    if images.size == 0 or len(images) == 0:
        raise ValidationError("DPG pretraining corpus is empty")
    _check_unit_range(images)
    return images.astype(np.float32)


def pretrain_dpg(
    corpus, config: Union[DPGConfig, dict], train: TrainConfig, init: Optional[ModelCheckpoint] = None
) -> ModelCheckpoint:
    """Fit the autoencoder to reconstruct clean images from augmented ones (MSE).

    ``corpus`` is a DatasetManifest, a list of them, or an image array;
    masks are ignored. Augmentation is drawn from a generator seeded with
    ``train.seed`` so repeated runs are identical.
    """
    cfg = config if isinstance(config, DPGConfig) else DPGConfig.from_dict(config)
    images = _corpus_images(corpus)
    if images.ndim != cfg.dimensionality + 2:
        raise ShapeError(f"corpus is {images.ndim - 2}D but the DPG is {cfg.dimensionality}D")
    ckpt = init.copy() if init is not None else build_dpg(cfg, train.seed)
    net = AutoEncoder(cfg)
    net.load_state_dict(ckpt.torch_state())
    aug_rng = np.random.default_rng([train.seed, 1])

    def batch_loss(idx):
        noisy, clean = augment_batch(images[idx], cfg.augmentation, aug_rng)
        recon = net(torch.from_numpy(noisy))
        return F.mse_loss(recon, torch.from_numpy(clean)), {}

    curve = run_epochs(net, len(images), train, batch_loss)
    ckpt.weights = state_to_arrays(net.state_dict())
    ckpt.metadata.update(
        {"epochs": train.epochs, "seed": train.seed, "train_config": train.to_dict(), "loss_curve": curve,
         "corpus_size": int(len(images))}
    )
    return ckpt


def reconstruction_mse(dpg: ModelCheckpoint, images, seed: int = 0, augmentation: Optional[AugSpec] = None) -> float:
    """Held-out MSE of reconstructing clean images from corrupted inputs."""
    net = to_autoencoder(dpg)
    spec = augmentation or DPGConfig.from_dict(dpg.config).augmentation
    images = _corpus_images(images)
    noisy, clean = augment_batch(images, spec, np.random.default_rng(seed))
    with torch.no_grad():
        recon = torch.cat([net(torch.from_numpy(noisy[i : i + 16])) for i in range(0, len(noisy), 16)])
    return float(F.mse_loss(recon, torch.from_numpy(clean)).item())


# ---------------------------------------------------------------- encoding


def encode_batch(dpg: Union[ModelCheckpoint, AutoEncoder], images: torch.Tensor, chunk: int = 32) -> torch.Tensor:
    """Codes ``(N, code_channels, *spatial_code)`` for a stack of images.

    Uses frozen running statistics, so each image's code is independent of
    the others in the stack.
    """
    net = to_autoencoder(dpg) if isinstance(dpg, ModelCheckpoint) else dpg
    images = torch.as_tensor(images, dtype=torch.float32)
    with torch.no_grad():
        return torch.cat([net.encode(images[i : i + chunk]) for i in range(0, len(images), chunk)])


def encode_domain(image, dpg: Union[ModelCheckpoint, AutoEncoder], fingerprint: Optional[str] = None) -> DomainCode:
    """Domain code of one ``(C, *spatial)`` image via a single frozen forward pass."""
    if isinstance(dpg, ModelCheckpoint):
        fingerprint = dpg.fingerprint
        dims = DPGConfig.from_dict(dpg.config).dimensionality
    else:
        dims = dpg.cfg.dimensionality
    image = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if image.ndim != dims + 1:
        raise ShapeError(f"DPG is {dims}D; expected a (C, *spatial) image with {dims} spatial axes, got {tuple(image.shape)}")
    code = encode_batch(dpg, image.unsqueeze(0))[0]
    return DomainCode(code, fingerprint)
