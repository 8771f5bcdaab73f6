"""Binary-image geometry for geometry-constrained copy-paste.

Masks are H x W arrays of {0,1}; images are C x H x W float arrays. The
copy-paste pipeline extracts 8-connected lesion instances, scales one of them
down, and pastes the replica at a centre whose distance to every existing
lesion pixel exceeds the replica's circumradius, so the replica can never
touch the original foreground.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

Pixel = Tuple[int, int]
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
MIN_REPLICA_SIDE = 2


@dataclass(frozen=True)
class BinaryMask:
    """H x W mask with values strictly in {0,1}."""
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ShapeError(f"mask must be a non-empty H x W array, got shape {bits.shape}")
        if not np.all((bits == 0) | (bits == 1)):
            raise ContractError("mask values must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()

    def union(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.bits | other.bits)

    def intersect(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.bits & other.bits)

    def complement(self) -> "BinaryMask":
        return BinaryMask(1 - self.bits)

    def is_disjoint(self, other: "BinaryMask") -> bool:
        return not np.any(self.bits & other.bits)

    def is_subset(self, other: "BinaryMask") -> bool:
        return not np.any(self.bits & (1 - other.bits))

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash(self.bits.tobytes())


@dataclass(frozen=True, eq=False)
class Instance:
    """One lesion: tight bounding box, its crop mask and (optionally) image patch."""
    bbox: Tuple[int, int, int, int]
    crop: np.ndarray
    patch: Optional[np.ndarray] = None
    image_shape: Optional[Tuple[int, int]] = None

    @property
    def height(self) -> int:
        return self.bbox[2]

    @property
    def width(self) -> int:
        return self.bbox[3]

    @property
    def pixels(self) -> frozenset:
        top, left = self.bbox[0], self.bbox[1]
        rows, cols = np.nonzero(self.crop)
        return frozenset((int(r) + top, int(c) + left) for r, c in zip(rows, cols))

    @property
    def area(self) -> int:
        return int(self.crop.sum())

    @property
    def mask(self) -> BinaryMask:
        if self.image_shape is None:
            raise ContractError("instance is not placed in an image")
        bits = np.zeros(self.image_shape, dtype=np.uint8)
        top, left, h, w = self.bbox
        bits[top:top + h, left:left + w] = self.crop
        return BinaryMask(bits)


@dataclass(frozen=True, eq=False)
class DistanceMap:
    """Euclidean distance of each pixel to the nearest foreground pixel."""
    dist: np.ndarray

    @property
    def height(self) -> int:
        return self.dist.shape[0]

    @property
    def width(self) -> int:
        return self.dist.shape[1]


@dataclass
class AugmentationRecord:
    """CSV log row of one copy-paste attempt sequence."""
    seed: int
    instance_index: int
    scale_factor: float
    center: Optional[Pixel]
    safety_radius: float
    success: bool
    attempts: int = 0


@dataclass
class AugmentedSample:
    """The quadruple (I^cp, Y^cp, M_A, M_B); masks A/B are None on fallback."""
    image: np.ndarray
    mask: BinaryMask
    mask_a: Optional[BinaryMask]
    mask_b: Optional[BinaryMask]
    record: AugmentationRecord = field(default=None)

    @property
    def success(self) -> bool:
        return self.mask_a is not None and self.mask_b is not None


def connected_components(mask: BinaryMask, image: Optional[np.ndarray] = None) -> List[Instance]:
    """8-connected foreground components ordered by their first pixel in row-major order."""
    labels, count = ndimage.label(mask.bits, structure=EIGHT_CONNECTED)
    if count == 0:
        return []
    flat = labels.ravel()
    positions = np.flatnonzero(flat)
    first_seen = {}
    for position in positions:
        label = int(flat[position])
        if label not in first_seen:
            first_seen[label] = position
    instances = []
    boxes = ndimage.find_objects(labels)
    for label in sorted(first_seen, key=first_seen.get):
        rows, cols = boxes[label - 1]
        crop = (labels[rows, cols] == label).astype(np.uint8)
        patch = None if image is None else np.array(image[:, rows, cols])
        bbox = (rows.start, cols.start, rows.stop - rows.start, cols.stop - cols.start)
        instances.append(Instance(bbox=bbox, crop=crop, patch=patch, image_shape=mask.shape))
    return instances


def edt(background_of: BinaryMask) -> DistanceMap:
    """Exact Euclidean distance transform of the background region 1 - Y.

    Foreground pixels get 0. A mask without foreground yields +inf everywhere.
    """
    if background_of.is_empty():
        return DistanceMap(np.full(background_of.shape, np.inf))
    background = background_of.bits == 0
    return DistanceMap(ndimage.distance_transform_edt(background).astype(np.float64))


def circumradius(height: int, width: int) -> float:
    if height < 1 or width < 1:
        raise ContractError(f"bounding box must be at least 1x1, got {height}x{width}")
    return math.hypot(height, width) / 2.0


def sample_paste_center(dmap: DistanceMap, r_s: float, rng: np.random.Generator) -> Optional[Pixel]:
    """Uniformly random pixel with dist >= r_s, or None when none qualifies.

    ``augment`` passes the next float above the circumradius, so the test it
    applies is the strict dist > r_s.
    """
    feasible = np.argwhere(dmap.dist >= r_s)
    if len(feasible) == 0:
        return None
    row, col = feasible[rng.integers(len(feasible))]
    return int(row), int(col)


def _tight(crop: np.ndarray, patch: Optional[np.ndarray], top: int = 0, left: int = 0):
    rows = np.flatnonzero(crop.any(axis=1))
    cols = np.flatnonzero(crop.any(axis=0))
    if len(rows) == 0:
        return None
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    crop = crop[r0:r1, c0:c1]
    if patch is not None:
        patch = patch[:, r0:r1, c0:c1]
    return (top + int(r0), left + int(c0), int(r1 - r0), int(c1 - c0)), crop, patch


def scale_instance(inst: Instance, factor: float) -> Optional[Instance]:
    """Nearest-neighbour downscale of mask and patch; None when a side drops below 2 px."""
    if not 0.0 < factor <= 1.0:
        raise ContractError(f"scale factor must lie in (0, 1], got {factor}")
    height, width = inst.height, inst.width
    new_h, new_w = int(round(height * factor)), int(round(width * factor))
    if new_h < MIN_REPLICA_SIDE or new_w < MIN_REPLICA_SIDE:
        return None
    rows = np.minimum(np.floor(np.arange(new_h) * height / new_h).astype(int), height - 1)
    cols = np.minimum(np.floor(np.arange(new_w) * width / new_w).astype(int), width - 1)
    crop = inst.crop[np.ix_(rows, cols)]
    patch = None if inst.patch is None else inst.patch[:, rows][:, :, cols]
    tightened = _tight(crop, patch)
    if tightened is None:
        return None
    bbox, crop, patch = tightened
    if bbox[2] < MIN_REPLICA_SIDE or bbox[3] < MIN_REPLICA_SIDE:
        return None
    top, left = inst.bbox[0] + bbox[0], inst.bbox[1] + bbox[1]
    return Instance(bbox=(top, left, bbox[2], bbox[3]), crop=crop, patch=patch,
                    image_shape=inst.image_shape)


def non_degenerate_range(inst: Instance, scale_range: Tuple[float, float]) -> Optional[Tuple[float, float]]:
    """Sub-range of ``scale_range`` whose rounded bbox keeps both sides >= 2 px, or None."""
    low, high = scale_range
    # round() sends side * f >= 1.5 to 2
    low = max(low, (MIN_REPLICA_SIDE - 0.5) / min(inst.height, inst.width))
    return (low, high) if low <= high else None


def placement(inst: Instance, center: Pixel) -> Tuple[int, int]:
    """Top-left corner that puts the bbox centre on ``center``, rounding toward top-left."""
    return center[0] - (inst.height - 1) // 2, center[1] - (inst.width - 1) // 2


def paste(image: np.ndarray, mask: BinaryMask, inst: Instance,
          center: Pixel) -> Tuple[np.ndarray, BinaryMask, BinaryMask]:
    """Overwrite the replica's pixels into a copy of ``image`` and merge its mask.

    Parts of the replica falling outside the image are clipped. Raises
    ContractError when the replica would touch existing foreground or when
    nothing of it remains inside the image.
    """
    if inst.patch is None:
        raise ContractError("instance has no image patch to paste")
    if image.shape[1:] != mask.shape:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} disagree")
    height, width = mask.shape
    top, left = placement(inst, center)
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + inst.height, height), min(left + inst.width, width)
    if r0 >= r1 or c0 >= c1:
        raise ContractError(f"replica at {center} lies outside the image")

    crop = inst.crop[r0 - top:r1 - top, c0 - left:c1 - left].astype(bool)
    if not crop.any():
        raise ContractError(f"replica at {center} is clipped away entirely")
    bits_b = np.zeros(mask.shape, dtype=np.uint8)
    bits_b[r0:r1, c0:c1] = crop
    mask_b = BinaryMask(bits_b)
    if not mask_b.is_disjoint(mask):
        raise ContractError(f"replica at {center} overlaps existing foreground")

    pasted = np.array(image, dtype=np.float64)
    region = pasted[:, r0:r1, c0:c1]
    source = inst.patch[:, r0 - top:r1 - top, c0 - left:c1 - left]
    region[:, crop] = source[:, crop]
    return pasted, mask.union(mask_b), mask_b


def augment(image: np.ndarray, mask: BinaryMask, rng: np.random.Generator,
            scale_range: Tuple[float, float] = (0.3, 0.7), max_retries: int = 3,
            seed: int = 0) -> AugmentedSample:
    """Geometry-constrained copy-paste of one randomly chosen lesion.

    A degenerate replica (a side under 2 px) redraws the factor from the part of
    ``scale_range`` that keeps it at least 2 x 2. When no feasible centre exists
    the factor is halved instead. Both count against ``max_retries``; after that
    the un-augmented sample is returned with ``success`` False so the caller can
    skip its contrastive term.
    """
    instances = connected_components(mask, image)
    record = AugmentationRecord(seed=seed, instance_index=-1, scale_factor=0.0,
                                center=None, safety_radius=0.0, success=False)
    fallback = AugmentedSample(image=np.array(image, dtype=np.float64), mask=mask,
                               mask_a=None, mask_b=None, record=record)
    if not instances:
        logger.debug("seed %d: no lesion instance, skipping copy-paste", seed)
        return fallback

    index = int(rng.integers(len(instances)))
    lesion_a = instances[index]
    factor = float(rng.uniform(*scale_range))
    record.instance_index = index
    record.scale_factor = factor
    dmap = edt(mask)

    halved = False
    for attempt in range(max_retries + 1):
        record.attempts = attempt + 1
        replica = scale_instance(lesion_a, factor)
        if replica is None:
            # after a halving nothing smaller can fit either
            window = None if halved else non_degenerate_range(lesion_a, scale_range)
            if window is None:
                logger.debug("seed %d: replica degenerate at factor %.4f", seed, factor)
                break
            logger.debug("seed %d: replica degenerate at factor %.4f, resampling", seed, factor)
            factor = float(rng.uniform(*window))
            record.scale_factor = factor
            continue
        r_s = circumradius(replica.height, replica.width)
        record.scale_factor, record.safety_radius = factor, r_s
        # one ulp above r_s: a replica corner exactly r_s away may not land on a lesion pixel
        center = sample_paste_center(dmap, np.nextafter(r_s, np.inf), rng)
        if center is not None:
            top, left = placement(replica, center)
            r0, c0 = max(top, 0), max(left, 0)
            r1, c1 = min(top + replica.height, mask.height), min(left + replica.width, mask.width)
            if replica.crop[r0 - top:r1 - top, c0 - left:c1 - left].any():
                image_cp, mask_cp, mask_b = paste(image, mask, replica, center)
                record.center, record.success = center, True
                return AugmentedSample(image=image_cp, mask=mask_cp, mask_a=lesion_a.mask,
                                       mask_b=mask_b, record=record)
        factor /= 2.0
        halved = True

    logger.debug("seed %d: copy-paste fell back after %d attempts", seed, record.attempts)
    record.center = None
    return fallback


def flip_pair(image: np.ndarray, mask: BinaryMask, horizontal: bool,
              vertical: bool) -> Tuple[np.ndarray, BinaryMask]:
    bits = mask.bits
    if horizontal:
        image, bits = image[:, :, ::-1], bits[:, ::-1]
    if vertical:
        image, bits = image[:, ::-1, :], bits[::-1, :]
    return np.ascontiguousarray(image), BinaryMask(np.ascontiguousarray(bits))
