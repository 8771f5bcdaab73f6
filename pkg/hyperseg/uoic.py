"""Instance contrastive pretraining objective.

A lesion (region A) and its scaled replica (region B) pooled from the same
feature map form the positive pair; every sample in the batch also contributes
one lesion-like background vector, pooled with the weight map
(1 - Y^cp) * Y_hat^cp, and all of those act as negatives for every anchor.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ShapeError
from .imgeo import AugmentedSample, BinaryMask
from .losses import pretrain_loss
from .tensor_core import (Tensor, area_downsample, concat, constant, logsumexp, matmul, mul,
                          reduce_mean, reduce_sum, reshape, scalar_mul, sqrt, stack, sub)

logger = logging.getLogger(__name__)

LESION_A = "lesion_a"
LESION_B = "lesion_b"
BACKGROUND_NEGATIVE = "background_hard_negative"
SOURCES = (LESION_A, LESION_B, BACKGROUND_NEGATIVE)

WMAP_EPS = 1e-8
MIN_NEGATIVE_WEIGHT = 1e-6
COSINE_EPS = 1e-12
MASK_THRESHOLD = 0.5

__all__ = [
    "InstanceEmbedding", "ContrastiveBatch", "InfoNCEResult", "SampleEmbeddings",
    "downsample_mask", "masked_avg_pool", "wmap", "mine_hard_negative", "cosine",
    "info_nce", "embed_sample", "tag_small_lesions", "pretrain_loss",
]


@dataclass
class InstanceEmbedding:
    """One exported vector with its provenance."""
    vector: np.ndarray
    source: str
    sample_index: int
    area: int = 0
    small: bool = False

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ContractError(f"unknown embedding source {self.source!r}; expected one of {SOURCES}")
        if not np.all(np.isfinite(self.vector)):
            raise ContractError("embedding vector must be finite")


@dataclass
class ContrastiveBatch:
    anchors: List[Tensor]
    positives: List[Tensor]
    negatives: List[Tensor]
    temperature: float = 0.10

    def __post_init__(self):
        if len(self.anchors) != len(self.positives):
            raise ContractError(
                f"{len(self.anchors)} anchors but {len(self.positives)} positives; they must pair up")
        if not self.temperature > 0.0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")


@dataclass
class InfoNCEResult:
    """Loss is None when no anchor had a usable positive or no negative survived."""
    loss: Optional[Tensor]
    dropped: int = 0
    terms: int = 0


@dataclass
class SampleEmbeddings:
    """Pooled vectors of one augmented sample; any entry may be None when skipped."""
    z_a: Optional[Tensor] = None
    z_b: Optional[Tensor] = None
    z_bg: Optional[Tensor] = None
    area_a: int = 0
    area_b: int = 0
    notes: List[str] = field(default_factory=list)


def downsample_mask(mask: BinaryMask, size: Tuple[int, int]) -> np.ndarray:
    """Area-average a full-resolution mask to ``size`` and threshold at 0.5."""
    height, width = mask.shape
    h, w = size
    if height % h or width % w or height // h != width // w:
        raise ShapeError(f"mask {mask.shape} does not reduce to {size} by an integer factor")
    factor = height // h
    if factor == 1:
        return mask.bits.astype(np.float64)
    fraction = mask.bits.astype(np.float64).reshape(h, factor, w, factor).mean(axis=(1, 3))
    return (fraction > MASK_THRESHOLD).astype(np.float64)


def _flat_features(features: Tensor) -> Tuple[Tensor, int, int, int]:
    if features.ndim != 3:
        raise ShapeError(f"feature map must be D x h x w, got {features.shape}")
    depth, h, w = features.shape
    return reshape(features, (depth, h * w)), depth, h, w


def masked_avg_pool(features: Tensor, mask: BinaryMask) -> Optional[Tensor]:
    """Mean feature vector inside ``mask``; None when the mask vanishes at feature resolution."""
    flat, depth, h, w = _flat_features(features)
    region = downsample_mask(mask, (h, w))
    count = region.sum()
    if count == 0:
        return None
    weights = constant((region / count).reshape(h * w, 1))
    return reshape(matmul(flat, weights), (depth,))


def wmap(features: Tensor, weights: Tensor) -> Tuple[Tensor, float]:
    """Weighted masked average pooling: sum(w F) / (sum(w) + eps). Returns (vector, sum(w))."""
    flat, depth, h, w = _flat_features(features)
    if weights.shape != (h, w):
        raise ShapeError(f"weights {weights.shape} do not match feature grid {(h, w)}")
    if np.any(weights.data < 0.0):
        raise ContractError("pooling weights must be non-negative")
    column = reshape(weights, (h * w, 1))
    total = reduce_sum(column)
    pooled = matmul(flat, column) / (total + WMAP_EPS)
    return reshape(pooled, (depth,)), float(total.item())


def mine_hard_negative(features: Tensor, mask_cp: BinaryMask, y_hat_cp: Tensor) -> Optional[Tensor]:
    """Lesion-like background vector, or None when the background weight sum is below 1e-6."""
    _, _, h, _ = _flat_features(features)
    height = mask_cp.height
    if y_hat_cp.shape != mask_cp.shape:
        raise ShapeError(f"prediction {y_hat_cp.shape} and mask {mask_cp.shape} disagree")
    background = downsample_mask(mask_cp.complement(), features.shape[1:])
    likeness = area_downsample(y_hat_cp, height // h)
    vector, total = wmap(features, mul(constant(background), likeness))
    if total < MIN_NEGATIVE_WEIGHT:
        return None
    return vector


def _norm(vector: Tensor) -> Tensor:
    return sqrt(reduce_sum(mul(vector, vector)))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    denom = (_norm(a) + COSINE_EPS) * (_norm(b) + COSINE_EPS)
    return reduce_sum(mul(a, b)) / denom


def _usable(vector: Tensor) -> bool:
    return float(np.linalg.norm(vector.data)) > 0.0


def info_nce(batch: ContrastiveBatch) -> InfoNCEResult:
    """Mean over anchors of -log(e^{s+} / (e^{s+} + sum_k e^{s-_k})) with s = cos / tau.

    Zero-norm vectors have no cosine; their terms are dropped and counted.
    """
    negatives = [n for n in batch.negatives if _usable(n)]
    dropped = len(batch.negatives) - len(negatives)
    if not negatives:
        return InfoNCEResult(loss=None, dropped=dropped + len(batch.anchors))

    inv_tau = 1.0 / batch.temperature
    terms = []
    for anchor, positive in zip(batch.anchors, batch.positives):
        if not (_usable(anchor) and _usable(positive)):
            dropped += 1
            continue
        s_pos = scalar_mul(cosine(anchor, positive), inv_tau)
        logits = [reshape(s_pos, (1,))]
        logits += [reshape(scalar_mul(cosine(anchor, n), inv_tau), (1,)) for n in negatives]
        terms.append(logsumexp(sub(concat(logits), s_pos)))

    if dropped:
        logger.debug("info_nce dropped %d zero-norm terms", dropped)
    if not terms:
        return InfoNCEResult(loss=None, dropped=dropped)
    return InfoNCEResult(loss=reduce_mean(stack(terms)), dropped=dropped, terms=len(terms))


def embed_sample(features: Tensor, sample: AugmentedSample, y_hat_cp: Tensor) -> SampleEmbeddings:
    """Pool z_A, z_B over regions A and B and mine z_bg for one augmented sample."""
    out = SampleEmbeddings()
    h, w = features.shape[1:]
    if sample.success:
        out.z_a = masked_avg_pool(features, sample.mask_a)
        out.z_b = masked_avg_pool(features, sample.mask_b)
        out.area_a = int(downsample_mask(sample.mask_a, (h, w)).sum())
        out.area_b = int(downsample_mask(sample.mask_b, (h, w)).sum())
        if out.z_a is None or out.z_b is None:
            out.notes.append("instance vanished at feature resolution")
            out.z_a = out.z_b = None
    else:
        out.notes.append("copy-paste fell back")
    out.z_bg = mine_hard_negative(features, sample.mask, y_hat_cp)
    if out.z_bg is None:
        out.notes.append("negative weight below threshold")
    return out


def contrastive_batch(samples: Sequence[SampleEmbeddings], temperature: float) -> ContrastiveBatch:
    anchors = [s.z_a for s in samples if s.z_a is not None and s.z_b is not None]
    positives = [s.z_b for s in samples if s.z_a is not None and s.z_b is not None]
    negatives = [s.z_bg for s in samples if s.z_bg is not None]
    return ContrastiveBatch(anchors=anchors, positives=positives, negatives=negatives,
                            temperature=temperature)


def tag_small_lesions(embeddings: List[InstanceEmbedding], fraction: float = 0.2) -> float:
    """Flag lesion embeddings whose area falls in the bottom ``fraction``; returns the area cut-off."""
    lesions = [e for e in embeddings if e.source != BACKGROUND_NEGATIVE]
    if not lesions:
        return 0.0
    cutoff = float(np.quantile([e.area for e in lesions], fraction))
    for embedding in lesions:
        embedding.small = embedding.area <= cutoff
    return cutoff


def mean_cosine(pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> float:
    values = []
    for a, b in pairs:
        denom = (np.linalg.norm(a) + COSINE_EPS) * (np.linalg.norm(b) + COSINE_EPS)
        values.append(float(np.dot(a, b) / denom))
    return float(np.mean(values)) if values else 0.0
