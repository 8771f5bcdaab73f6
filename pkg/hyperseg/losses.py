"""Segmentation objectives: Dice + BCE and the two-term training loss."""

from typing import Optional

import numpy as np

from .errors import ShapeError
from .imgeo import BinaryMask
from .tensor_core import Tensor, clip, constant, log, mul, reduce_mean, reduce_sum, scalar_mul, sub

DICE_SMOOTH = 1.0
BCE_EPS = 1e-8


def _target(y, shape) -> Tensor:
    bits = y.bits if isinstance(y, BinaryMask) else np.asarray(y)
    if bits.shape != shape:
        raise ShapeError(f"prediction {shape} and target {bits.shape} disagree")
    return constant(bits.astype(np.float64))


def dice_term(y_hat: Tensor, y: Tensor) -> Tensor:
    overlap = reduce_sum(mul(y_hat, y))
    total = reduce_sum(y_hat) + reduce_sum(y)
    return sub(1.0, (scalar_mul(overlap, 2.0) + DICE_SMOOTH) / (total + DICE_SMOOTH))


def bce_term(y_hat: Tensor, y: Tensor) -> Tensor:
    # probabilities are clamped to [eps, 1-eps] before the log
    guarded = clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    per_pixel = mul(y, log(guarded)) + mul(sub(1.0, y), log(sub(1.0, guarded)))
    return scalar_mul(reduce_mean(per_pixel), -1.0)


def seg_loss(y_hat: Tensor, y) -> Tensor:
    """Dice (smooth 1.0) plus mean BCE, equally weighted."""
    target = _target(y, y_hat.shape)
    return dice_term(y_hat, target) + bce_term(y_hat, target)


def train_loss(y_hat: Tensor, y, m_hat_up: Tensor, lambda_aux: float) -> Tensor:
    """L_seg(Y_hat, Y) + lambda_aux * L_seg(M_hat upsampled, Y)."""
    main = seg_loss(y_hat, y)
    if lambda_aux == 0.0:
        return main
    return main + scalar_mul(seg_loss(m_hat_up, y), lambda_aux)


def pretrain_loss(y_hat_cp: Tensor, y_cp, l_nce: Optional[Tensor], lambda_ic: float) -> Tensor:
    """L_seg(Y_hat^cp, Y^cp) + lambda_ic * L_InfoNCE; the contrastive term may be absent."""
    seg = seg_loss(y_hat_cp, y_cp)
    if l_nce is None or lambda_ic == 0.0:
        return seg
    return seg + scalar_mul(l_nce, lambda_ic)
