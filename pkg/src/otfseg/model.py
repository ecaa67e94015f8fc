"""Adaptive UNet (AdaBN in every conv block) and the plain-BN UNet baseline.

Both share one skeleton: five encoder blocks with channel widths
``base * 2**i``, four max-pools, five decoder blocks (conv, norm, ReLU,
then bilinear/trilinear upsampling), concatenative skips from each encoder
block's pre-pool output, and a 1x1 conv head emitting logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import ModelCheckpoint, state_to_arrays
from .exceptions import ContractError, ShapeError, ValidationError
from .normalization import DEFAULT_EPS, AdaptiveBatchNorm, BatchNorm, DomainCode

NUM_BLOCKS = 5
NORMS = ("adabn", "bn")


@dataclass
class ArchConfig:
    dimensionality: int = 2
    in_channels: int = 1
    num_classes: int = 2
    base_channels: int = 16
    norm: str = "adabn"
    code_channels: Optional[int] = None
    convs_per_block: int = 2
    eps: float = DEFAULT_EPS
    momentum: float = 0.1
    track_running_stats: bool = False
    blocks: int = NUM_BLOCKS

    def __post_init__(self):
        if self.dimensionality not in (2, 3):
            raise ValidationError(f"dimensionality must be 2 or 3, got {self.dimensionality}")
        if self.norm not in NORMS:
            raise ValidationError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.blocks != NUM_BLOCKS:
            raise ValidationError(f"the UNet has a fixed {NUM_BLOCKS} blocks per side")
        for name in ("in_channels", "num_classes", "base_channels", "convs_per_block"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.convs_per_block not in (1, 2):
            raise ValidationError("convs_per_block must be 1 or 2")
        if self.norm == "adabn" and (self.code_channels is None or self.code_channels < 1):
            raise ValidationError("norm='adabn' needs a positive code_channels (the DPG bottleneck width)")
        if self.norm == "bn":
            self.code_channels = None

    @property
    def channel_ladder(self) -> List[int]:
        return [self.base_channels * 2**i for i in range(self.blocks)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.blocks - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def _conv(dims: int):
    return nn.Conv2d if dims == 2 else nn.Conv3d


class ConvBlock(nn.Module):
    """``convs_per_block`` x (conv 3x3, norm, ReLU).

    ``cfg`` is anything exposing the ArchConfig norm/conv fields; the DPG
    reuses this block with ``norm='bn'``.
    """

    def __init__(self, cfg, cin: int, cout: int):
        super().__init__()
        self.adaptive = cfg.norm == "adabn"
        self.n = cfg.convs_per_block
        conv = _conv(cfg.dimensionality)
        for j in range(self.n):
            setattr(self, f"conv{j}", conv(cin if j == 0 else cout, cout, 3, padding=1, bias=False))
            if self.adaptive:
                norm = AdaptiveBatchNorm(cout, cfg.code_channels, cfg.eps, cfg.momentum, cfg.track_running_stats)
            else:
                norm = BatchNorm(cout, cfg.eps, cfg.momentum)
            setattr(self, f"norm{j}", norm)

    def forward(self, x, code, stats_mode):
        for j in range(self.n):
            x = getattr(self, f"conv{j}")(x)
            norm = getattr(self, f"norm{j}")
            x = norm(x, code, stats_mode) if self.adaptive else norm(x, stats_mode)
            x = F.relu(x)
        return x


class UNet(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channel_ladder
        self.encoder = nn.ModuleDict()
        for i in range(cfg.blocks):
            self.encoder[f"block{i}"] = ConvBlock(cfg, cfg.in_channels if i == 0 else ch[i - 1], ch[i])
        self.decoder = nn.ModuleDict()
        top = cfg.blocks - 1
        for i in range(top, -1, -1):
            cin = ch[top] if i == top else 2 * ch[i]
            cout = ch[max(i - 1, 0)]
            self.decoder[f"block{i}"] = ConvBlock(cfg, cin, cout)
        self.head = _conv(cfg.dimensionality)(ch[0], cfg.num_classes, 1)
        self._pool = F.max_pool2d if cfg.dimensionality == 2 else F.max_pool3d
        self._mode = "bilinear" if cfg.dimensionality == 2 else "trilinear"

    def default_stats_mode(self) -> str:
        if self.training:
            return "batch"
        return "instance" if self.cfg.norm == "adabn" else "running"

    def forward(self, x: torch.Tensor, code: Optional[torch.Tensor] = None, stats_mode: Optional[str] = None):
        cfg = self.cfg
        if x.ndim != cfg.dimensionality + 2 or x.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"expected input (batch, {cfg.in_channels}, {'D, ' if cfg.dimensionality == 3 else ''}H, W), "
                f"got {tuple(x.shape)}"
            )
        if any(s % cfg.divisor for s in x.shape[2:]):
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {cfg.divisor}")
        if cfg.norm == "adabn":
            if code is None:
                raise ContractError("an AdaBN model needs a domain code for every forward pass")
            if isinstance(code, DomainCode):
                code = code.batched()
            code = code.to(x.dtype)
        stats_mode = stats_mode or self.default_stats_mode()

        skips = []
        top = cfg.blocks - 1
        for i in range(cfg.blocks):
            x = self.encoder[f"block{i}"](x, code, stats_mode)
            if i < top:
                skips.append(x)
                x = self._pool(x, 2)
        for i in range(top, -1, -1):
            if i < top:
                x = torch.cat([x, skips[i]], dim=1)
            x = self.decoder[f"block{i}"](x, code, stats_mode)
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode=self._mode, align_corners=False)
        return self.head(x)


def norm_parameter_names(module: nn.Module, kinds=(BatchNorm,)) -> List[str]:
    """Dotted names of the gamma/beta parameters of every norm layer of the given kinds."""
    names = []
    for mname, m in module.named_modules():
        if isinstance(m, kinds):
            names += [f"{mname}.gamma", f"{mname}.beta"]
    return names


def build_model(config: Union[ArchConfig, dict], seed: int = 0) -> ModelCheckpoint:
    """Deterministically initialise an untrained UNet checkpoint."""
    cfg = config if isinstance(config, ArchConfig) else ArchConfig.from_dict(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet(cfg)
    return ModelCheckpoint(
        "unet", cfg.to_dict(), state_to_arrays(net.state_dict()), metadata={"init_seed": seed}
    )


def to_module(ckpt: ModelCheckpoint, dtype=torch.float32) -> UNet:
    if ckpt.kind != "unet":
        raise ContractError(f"expected a segmentation checkpoint, got kind={ckpt.kind!r}")
    net = UNet(ArchConfig.from_dict(ckpt.config))
    net.load_state_dict(ckpt.torch_state(dtype))
    net.to(dtype)
    net.eval()
    return net


def forward(
    model: Union[ModelCheckpoint, UNet],
    image: torch.Tensor,
    code: Union[DomainCode, torch.Tensor, None] = None,
    stats_mode: Optional[str] = None,
) -> torch.Tensor:
    """Logits for ``image``; never modifies the checkpoint's weights.

    A :class:`DomainCode` whose fingerprint disagrees with the model's
    recorded DPG is rejected.
    """
    if isinstance(model, ModelCheckpoint):
        expected = model.dpg_fingerprint
        net = to_module(model, image.dtype if image.is_floating_point() else torch.float32)
    else:
        expected, net = None, model
    if isinstance(code, DomainCode) and expected and code.source_fingerprint not in (None, expected):
        raise ContractError(
            f"domain code from DPG {code.source_fingerprint} but the model was trained with {expected}"
        )
    if not image.is_floating_point():
        image = image.float()
    return net(image, code, stats_mode)
