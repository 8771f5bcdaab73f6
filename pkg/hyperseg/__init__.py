"""Uncertainty-guided hypergraph refinement for lesion segmentation, on numpy."""

from .errors import ConfigError, ContractError, DatasetError, NonFiniteError, ParseError, ShapeError
from .net import NetworkSpec, SegmentationNet
from .ughr import BlockConfig, UGHRBlock

__version__ = "0.1.0"

__all__ = [
    "BlockConfig",
    "ConfigError",
    "ContractError",
    "DatasetError",
    "NetworkSpec",
    "NonFiniteError",
    "ParseError",
    "ShapeError",
    "UGHRBlock",
    "SegmentationNet",
]
