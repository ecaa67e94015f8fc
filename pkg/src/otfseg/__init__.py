"""Test-time domain adaptation for segmentation with an Adaptive UNet conditioned on a frozen domain prior."""

from .estimators import AdaptiveUNetSegmenter, DomainPriorEncoder, PlainUNetSegmenter, TentAdapter
from .exceptions import ContractError, NumericFloorError, OTFError, ShapeError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "AdaptiveUNetSegmenter",
    "ContractError",
    "DomainPriorEncoder",
    "NumericFloorError",
    "OTFError",
    "PlainUNetSegmenter",
    "ShapeError",
    "TentAdapter",
    "ValidationError",
]
