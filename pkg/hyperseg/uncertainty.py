"""Entropy-based uncertainty maps.

A ProbMap is an H x W Tensor with values in [0,1]; an UncertaintyMap is the
normalised binary entropy of one, also in [0,1].
"""

import math
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ContractError
from .tensor_core import Tensor, bilinear_resize, clip, log, mul, scalar_mul, sub

DEFAULT_EPS = 1e-8


def check_prob_map(m: Tensor, name: str = "probability map") -> None:
    if m.ndim != 2:
        raise ContractError(f"{name} must be H x W, got shape {m.shape}")
    if np.any(m.data < 0.0) or np.any(m.data > 1.0):
        raise ContractError(f"{name} values must lie in [0, 1]")


def entropy_uncertainty(m: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """U = -(m log(m+eps) + (1-m) log(1-m+eps)) / log 2, clamped to [0,1]."""
    if eps <= 0.0:
        raise ContractError(f"eps must be positive, got {eps}")
    complement = sub(1.0, m)
    entropy = mul(m, log(m, eps)) + mul(complement, log(complement, eps))
    return clip(scalar_mul(entropy, -1.0 / math.log(2.0)), 0.0, 1.0)


def resize_to_scale(m: Tensor, target: Tuple[int, int]) -> Tensor:
    """Bilinear resize of an H x W map; a convex combination, so [0,1] is preserved."""
    if m.shape == tuple(target):
        return m
    return bilinear_resize(m, target)



def scale_uncertainties(m: Tensor, targets: Sequence[Tuple[int, int]], eps: float = DEFAULT_EPS) -> List[Tensor]:
    """U_i for every refinement scale: resize, clamp to [0,1], then entropy."""
    return [entropy_uncertainty(clip(resize_to_scale(m, target), 0.0, 1.0), eps) for target in targets]
