"""Batch normalization, AdaIN and code-conditioned adaptive batch normalization.

All functional ops take channel-first tensors ``(batch, channels, *spatial)``
with one, two or three spatial axes and return a tensor of the same shape.
Standard deviations are always ``sqrt(var + eps)`` with the biased (divide
by N) variance estimator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn

from .exceptions import NumericFloorError, ShapeError, ValidationError

DEFAULT_EPS = 1e-5

STATS_MODES = ("batch", "instance", "running")


@dataclass
class ChannelStats:
    """Per-channel mean and (floored) standard deviation.

    Shapes are ``(C,)`` for pooled statistics and ``(N, C)`` for
    per-instance statistics.
    """

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ShapeError(f"mean {tuple(self.mean.shape)} and std {tuple(self.std.shape)} differ")
        if not bool((self.std > 0).all()):
            raise NumericFloorError("channel std must be strictly positive")


@dataclass
class DomainCode:
    """Bottleneck feature map of one image, tagged with the encoder that made it.

    ``values`` has layout ``(code_channels, *spatial_code)``.
    """

    values: torch.Tensor
    source_fingerprint: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.values, torch.Tensor):
            self.values = torch.as_tensor(np.asarray(self.values))
        if self.values.ndim < 2:
            raise ShapeError("domain code needs a channel axis and at least one spatial axis")
        if not bool(torch.isfinite(self.values).all()):
            raise ValidationError("domain code contains non-finite entries")

    @property
    def code_channels(self) -> int:
        return int(self.values.shape[0])

    def batched(self) -> torch.Tensor:
        return self.values.unsqueeze(0)


@dataclass
class AdaBNState:
    """Learnable state of one AdaBN layer.

    ``code_projection`` is a ``(C, code_channels)`` matrix applied pointwise
    over the code grid before statistics are taken.
    """

    gamma: torch.Tensor
    beta: torch.Tensor
    code_projection: torch.Tensor
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ValidationError(f"AdaBN eps must be > 0, got {self.eps}")
        c = self.code_projection.shape[0]
        if self.gamma.shape != (c,) or self.beta.shape != (c,):
            raise ShapeError(
                f"gamma/beta must have length {c} to match the projection, "
                f"got {tuple(self.gamma.shape)} and {tuple(self.beta.shape)}"
            )

    @property
    def num_channels(self) -> int:
        return int(self.gamma.shape[0])


CodeLike = Union[DomainCode, torch.Tensor]


def _check_features(x: torch.Tensor, channels: Optional[int] = None) -> None:
    if x.ndim < 3:
        raise ShapeError(f"features must be (batch, channels, *spatial), got shape {tuple(x.shape)}")
    if min(x.shape) < 1:
        raise ShapeError(f"empty axis in feature shape {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {x.shape[1]}")


def _broadcast(v: torch.Tensor, ndim: int) -> torch.Tensor:
    # (C,) -> (1, C, 1, ...) ; (N, C) -> (N, C, 1, ...)
    if v.ndim == 1:
        v = v.unsqueeze(0)
    return v.reshape(*v.shape, *([1] * (ndim - 2)))


def _floored_std(var: torch.Tensor, eps: float) -> torch.Tensor:
    if eps < 0:
        raise ValidationError(f"eps must be non-negative, got {eps}")
    if eps == 0 and bool((var <= 0).any()):
        raise NumericFloorError("zero-variance channel with eps=0; use a positive eps")
    return torch.sqrt(var + eps)


def feature_stats(x: torch.Tensor, mode: str, eps: float = DEFAULT_EPS) -> ChannelStats:
    """Mean/std pooled over batch+spatial (``batch``) or spatial only (``instance``)."""
    if mode == "batch":
        dims = [0, *range(2, x.ndim)]
    elif mode == "instance":
        dims = list(range(2, x.ndim))
    else:
        raise ValidationError(f"feature_stats mode must be 'batch' or 'instance', got {mode!r}")
    mean = x.mean(dim=dims)
    var = x.var(dim=dims, unbiased=False)
    return ChannelStats(mean, _floored_std(var, eps))


def batch_norm(
    x: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    eps: float = DEFAULT_EPS,
    stats_mode: str = "batch",
    running: Optional[ChannelStats] = None,
) -> torch.Tensor:
    """``gamma * (x - mean) / std + beta`` per channel."""
    _check_features(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta length must equal channel count {c}")
    if stats_mode == "running":
        if running is None:
            raise ValidationError("stats_mode='running' needs running statistics")
        stats = running
    else:
        stats = feature_stats(x, stats_mode, eps)
    if stats.mean.shape[-1] != c:
        raise ShapeError(f"statistics have {stats.mean.shape[-1]} channels, features have {c}")
    mean, std = _broadcast(stats.mean, x.ndim), _broadcast(stats.std, x.ndim)
    return _broadcast(gamma, x.ndim) * (x - mean) / std + _broadcast(beta, x.ndim)


def ada_in(x: torch.Tensor, y: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Re-style ``x`` to carry the per-instance channel mean/std of ``y``."""
    _check_features(x)
    _check_features(y, x.shape[1])
    if y.shape[0] not in (1, x.shape[0]):
        raise ShapeError(f"style batch {y.shape[0]} does not broadcast to {x.shape[0]}")
    sx = feature_stats(x, "instance", eps)
    sy = feature_stats(y, "instance", eps)
    nx = (x - _broadcast(sx.mean, x.ndim)) / _broadcast(sx.std, x.ndim)
    return _broadcast(sy.std, x.ndim) * nx + _broadcast(sy.mean, x.ndim)


def _code_tensor(code: CodeLike) -> torch.Tensor:
    if isinstance(code, DomainCode):
        return code.batched()
    if code.ndim < 3:
        raise ShapeError(f"batched code must be (batch, code_channels, *spatial), got {tuple(code.shape)}")
    return code


def project_code(code: CodeLike, projection: torch.Tensor) -> torch.Tensor:
    """Apply a ``(C, code_channels)`` matrix at every position of the code grid."""
    values = _code_tensor(code)
    if values.shape[1] != projection.shape[1]:
        raise ShapeError(
            f"code has {values.shape[1]} channels but the projection expects {projection.shape[1]}"
        )
    return torch.einsum("oc,nc...->no...", projection.to(values.dtype), values)


def code_stats(code: CodeLike, state: AdaBNState) -> ChannelStats:
    """Target statistics for one AdaBN layer.

    Returns ``(C,)`` statistics for a single :class:`DomainCode` and
    ``(N, C)`` for a batched code tensor.
    """
    projected = project_code(code, state.code_projection)
    dims = list(range(2, projected.ndim))
    mean = projected.mean(dim=dims)
    std = _floored_std(projected.var(dim=dims, unbiased=False), state.eps)
    if isinstance(code, DomainCode):
        return ChannelStats(mean[0], std[0])
    return ChannelStats(mean, std)


def ada_bn_forward(
    x: torch.Tensor,
    code: CodeLike,
    state: AdaBNState,
    stats_mode: str = "batch",
    running: Optional[ChannelStats] = None,
) -> torch.Tensor:
    """Normalize ``x`` onto the statistics of the projected domain code, then scale and shift.

    ``stats_mode='batch'`` pools feature statistics over batch and space
    (training); ``'instance'`` pools over space only (one test image).
    ``'running'`` uses caller-supplied statistics. The code statistics are
    always per instance.
    """
    _check_features(x, state.num_channels)
    values = _code_tensor(code)
    if values.shape[0] not in (1, x.shape[0]):
        raise ShapeError(f"code batch {values.shape[0]} does not broadcast to feature batch {x.shape[0]}")
    target = code_stats(values, state)
    if stats_mode == "running":
        if running is None:
            raise ValidationError("stats_mode='running' needs running statistics")
        src = running
    else:
        src = feature_stats(x, stats_mode, state.eps)
    normed = (x - _broadcast(src.mean, x.ndim)) / _broadcast(src.std, x.ndim)
    aligned = _broadcast(target.std, x.ndim) * normed + _broadcast(target.mean, x.ndim)
    return _broadcast(state.gamma, x.ndim) * aligned + _broadcast(state.beta, x.ndim)


class BatchNorm(nn.Module):
    """Plain batch normalization for 1D/2D/3D features.

    Running statistics use the biased variance and are only updated in
    training mode with ``stats_mode='batch'``.
    """

    def __init__(self, num_channels: int, eps: float = DEFAULT_EPS, momentum: float = 0.1):
        super().__init__()
        self.num_channels = num_channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = nn.Parameter(torch.ones(num_channels))
        self.beta = nn.Parameter(torch.zeros(num_channels))
        self.register_buffer("running_mean", torch.zeros(num_channels))
        self.register_buffer("running_var", torch.ones(num_channels))

    def running_stats(self) -> ChannelStats:
        return ChannelStats(self.running_mean, torch.sqrt(self.running_var + self.eps))

    def _update_running(self, x: torch.Tensor) -> None:
        dims = [0, *range(2, x.ndim)]
        with torch.no_grad():
            m = self.momentum
            self.running_mean.mul_(1 - m).add_(m * x.mean(dim=dims).to(self.running_mean.dtype))
            self.running_var.mul_(1 - m).add_(m * x.var(dim=dims, unbiased=False).to(self.running_var.dtype))

    def forward(self, x: torch.Tensor, stats_mode: str = "batch") -> torch.Tensor:
        if stats_mode == "running":
            return batch_norm(x, self.gamma, self.beta, self.eps, "running", self.running_stats())
        if self.training and stats_mode == "batch":
            self._update_running(x)
        return batch_norm(x, self.gamma, self.beta, self.eps, stats_mode)

    def extra_repr(self) -> str:
        return f"{self.num_channels}, eps={self.eps}, momentum={self.momentum}"


class AdaptiveBatchNorm(nn.Module):
    """AdaBN layer conditioned on a domain code.

    Owns gamma, beta and a learned ``(C, code_channels)`` projection that maps
    the shared domain code onto this layer's channel count. Running feature
    statistics are kept only when ``track_running_stats`` is set.
    """

    def __init__(
        self,
        num_channels: int,
        code_channels: int,
        eps: float = DEFAULT_EPS,
        momentum: float = 0.1,
        track_running_stats: bool = False,
    ):
        super().__init__()
        self.num_channels = num_channels
        self.code_channels = code_channels
        self.eps = eps
        self.momentum = momentum
        self.track_running_stats = track_running_stats
        self.gamma = nn.Parameter(torch.ones(num_channels))
        self.beta = nn.Parameter(torch.zeros(num_channels))
        bound = 1.0 / np.sqrt(code_channels)
        self.code_projection = nn.Parameter(torch.empty(num_channels, code_channels).uniform_(-bound, bound))
        if track_running_stats:
            self.register_buffer("running_mean", torch.zeros(num_channels))
            self.register_buffer("running_var", torch.ones(num_channels))

    def state(self) -> AdaBNState:
        return AdaBNState(self.gamma, self.beta, self.code_projection, self.eps)

    def forward(self, x: torch.Tensor, code: CodeLike, stats_mode: str = "batch") -> torch.Tensor:
        running = None
        if stats_mode == "running":
            if not self.track_running_stats:
                raise ValidationError("this AdaBN layer keeps no running statistics")
            running = ChannelStats(self.running_mean, torch.sqrt(self.running_var + self.eps))
        elif self.training and stats_mode == "batch" and self.track_running_stats:
            dims = [0, *range(2, x.ndim)]
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(m * x.mean(dim=dims))
                self.running_var.mul_(1 - m).add_(m * x.var(dim=dims, unbiased=False))
        return ada_bn_forward(x, code, self.state(), stats_mode, running)

    def extra_repr(self) -> str:
        return f"{self.num_channels}, code_channels={self.code_channels}, eps={self.eps}"
