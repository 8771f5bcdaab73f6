"""Synthetic lesion scenes and the on-disk dataset format.

A scene is a smooth noise texture with one or more soft-edged elliptical
lesions (the ground truth) and optional lesion-like distractor blobs at lower
contrast that stay out of the mask. A dataset directory holds ``images/``,
``masks/`` (8-bit netpbm), ``manifest.csv`` and ``scene.json``.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .codecs import from_bytes_image, read_netpbm, to_bytes_image, write_netpbm
from .errors import ConfigError, DatasetError, ParseError
from .imgeo import BinaryMask, edt

logger = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
SCENE_FILE = "scene.json"
SPLITS = ("train", "val")
TINTS = (1.0, 0.8, 0.65)


@dataclass
class SceneSpec:
    """Generator settings; radii in pixels, contrasts as intensity offsets."""
    size: int = 64
    channels: int = 1
    lesions: Tuple[int, int] = (1, 3)
    radius: Tuple[float, float] = (3.0, 10.0)
    small_radius: Tuple[float, float] = (3.0, 4.5)
    small_fraction: float = 0.3
    distractors: Tuple[int, int] = (0, 3)
    lesion_contrast: float = 0.45
    distractor_contrast: float = 0.2
    noise: float = 0.08
    texture_sigma: float = 2.0
    edge_softness: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.lesions = tuple(int(v) for v in self.lesions)
        self.distractors = tuple(int(v) for v in self.distractors)
        self.radius = tuple(float(v) for v in self.radius)
        self.small_radius = tuple(float(v) for v in self.small_radius)
        self.validate()

    def validate(self) -> None:
        if self.size < 8:
            raise ConfigError(f"scene size must be at least 8, got {self.size}")
        if self.channels not in (1, 3):
            raise ConfigError(f"scene channels must be 1 or 3, got {self.channels}")
        for name in ("lesions", "distractors", "radius", "small_radius"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is empty: ({lo}, {hi})")
        if self.lesions[0] < 1:
            raise ConfigError(f"every scene needs at least one lesion, got {self.lesions}")
        if self.distractors[0] < 0:
            raise ConfigError(f"distractor count cannot be negative, got {self.distractors}")
        if min(self.radius[0], self.small_radius[0]) < 2.0:
            raise ConfigError("lesion radii must be at least 2 px")
        if 2 * max(self.radius[1], self.small_radius[1]) + 2 >= self.size:
            raise ConfigError(f"radius {self.radius[1]} does not fit a {self.size} px scene")
        if not 0.0 <= self.small_fraction <= 1.0:
            raise ConfigError(f"small_fraction must lie in [0, 1], got {self.small_fraction}")
        if not 0.0 < self.lesion_contrast <= 1.0:
            raise ConfigError(f"lesion_contrast must lie in (0, 1], got {self.lesion_contrast}")
        if not 0.0 <= self.distractor_contrast < self.lesion_contrast:
            raise ConfigError("distractor_contrast must be non-negative and strictly below lesion_contrast")
        if self.noise < 0.0 or self.texture_sigma <= 0.0 or self.edge_softness <= 0.0:
            raise ConfigError("noise must be >= 0; texture_sigma and edge_softness must be > 0")


@dataclass
class Sample:
    name: str
    image: np.ndarray
    mask: BinaryMask


@dataclass
class DatasetManifest:
    split: str
    entries: List[Tuple[str, str, str]] = field(default_factory=list)
    scene: Optional[SceneSpec] = None
    seed: int = 0
    root: Optional[Path] = None


def scene_seed(base_seed: int, split: str, index: int) -> int:
    """Per-scene seed; the split bit keeps train and val seeds disjoint."""
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    return (base_seed * 2 + SPLITS.index(split)) * 1_000_000 + index


def _blob_weight(shape: Tuple[int, int], center: Tuple[float, float], radii: Tuple[float, float],
                 angle: float, softness: float) -> np.ndarray:
    """Logistic radial ramp of a rotated ellipse; 0.5 exactly on the boundary."""
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = rows - center[0], cols - center[1]
    cos, sin = math.cos(angle), math.sin(angle)
    u = (dx * cos + dy * sin) / radii[1]
    v = (-dx * sin + dy * cos) / radii[0]
    reach = np.sqrt(u * u + v * v)
    return expit((1.0 - reach) * min(radii) / softness)


def _radii(spec: SceneSpec, rng: np.random.Generator) -> Tuple[float, float]:
    bounds = spec.small_radius if rng.random() < spec.small_fraction else spec.radius
    return float(rng.uniform(*bounds)), float(rng.uniform(*bounds))


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> Tuple[np.ndarray, BinaryMask]:
    """One C x H x W image in [0,1] (quantised to k/255) and its lesion mask."""
    size = spec.size
    shape = (size, size)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), spec.texture_sigma)
    texture /= max(float(np.std(texture)), 1e-12)
    base = 0.3 + spec.noise * texture

    lesion = np.zeros(shape)
    for _ in range(int(rng.integers(spec.lesions[0], spec.lesions[1] + 1))):
        radii = _radii(spec, rng)
        reach = max(radii) + 1.0
        center = (float(rng.uniform(reach, size - 1 - reach)), float(rng.uniform(reach, size - 1 - reach)))
        weight = _blob_weight(shape, center, radii, float(rng.uniform(0.0, math.pi)), spec.edge_softness)
        lesion = np.maximum(lesion, weight)
    mask = BinaryMask((lesion > 0.5).astype(np.uint8))

    distractor = np.zeros(shape)
    clearance = edt(mask).dist
    for _ in range(int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))):
        radii = _radii(spec, rng)
        # keep the ramp tail well away from lesion pixels
        feasible = np.argwhere(clearance > max(radii) + 3.0 * spec.edge_softness + 2.0)
        if len(feasible) == 0:
            continue
        row, col = feasible[rng.integers(len(feasible))]
        weight = _blob_weight(shape, (float(row), float(col)), radii, float(rng.uniform(0.0, math.pi)),
                              spec.edge_softness)
        distractor = np.maximum(distractor, weight)

    intensity = base + spec.lesion_contrast * lesion + spec.distractor_contrast * distractor
    image = np.stack([np.clip(intensity * TINTS[c], 0.0, 1.0) for c in range(spec.channels)])
    image = np.floor(image * 255.0 + 0.5) / 255.0
    return image, mask


def generate_split(spec: SceneSpec, split: str, count: int) -> List[Sample]:
    samples = []
    for index in range(count):
        rng = np.random.default_rng(scene_seed(spec.seed, split, index))
        image, mask = generate_scene(spec, rng)
        samples.append(Sample(name=f"{split}_{index:05d}", image=image, mask=mask))
    return samples


def write_dataset(manifest: DatasetManifest, samples: Sequence[Sample], directory: Path) -> DatasetManifest:
    """Write images, masks, manifest.csv and scene.json; returns the manifest as written."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in samples:
        suffix = "pgm" if sample.image.shape[0] == 1 else "ppm"
        image_path = f"images/{sample.name}.{suffix}"
        mask_path = f"masks/{sample.name}.pgm"
        write_netpbm(directory / image_path, to_bytes_image(sample.image))
        write_netpbm(directory / mask_path, (sample.mask.bits * 255).astype(np.uint8))
        entries.append((sample.name, image_path, mask_path))

    with open(directory / MANIFEST, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["split", "name", "image", "mask"])
        for name, image_path, mask_path in entries:
            writer.writerow([manifest.split, name, image_path, mask_path])
    scene = asdict(manifest.scene) if manifest.scene is not None else None
    (directory / SCENE_FILE).write_text(json.dumps({"split": manifest.split, "seed": manifest.seed,
                                                    "scene": scene}, indent=2, sort_keys=True))
    return DatasetManifest(split=manifest.split, entries=entries, scene=manifest.scene,
                           seed=manifest.seed, root=directory)


def _read_mask(path: Path) -> BinaryMask:
    pixels = read_netpbm(path)
    if pixels.ndim != 2:
        raise ParseError("mask must be a single-channel P5 image", str(path), 0)
    if not np.all((pixels == 0) | (pixels == 255)):
        raise DatasetError(f"{path}: mask pixels must be 0 or 255")
    return BinaryMask((pixels == 255).astype(np.uint8))


def read_dataset(directory: Path) -> DatasetManifest:
    """Load and check a dataset directory: every listed file must exist and parse."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise DatasetError(f"dataset manifest not found: {manifest_path}")
    meta = {}
    if (directory / SCENE_FILE).is_file():
        meta = json.loads((directory / SCENE_FILE).read_text())
    scene = SceneSpec(**meta["scene"]) if meta.get("scene") else None

    entries, split = [], meta.get("split", "")
    missing = []
    with open(manifest_path, newline="") as handle:
        for row in csv.DictReader(handle):
            split = row.get("split", split)
            for key in ("image", "mask"):
                if not (directory / row[key]).is_file():
                    missing.append(str(directory / row[key]))
            entries.append((row["name"], row["image"], row["mask"]))
    if missing:
        raise DatasetError(f"dataset files missing: {', '.join(missing)}")
    for _, image_path, mask_path in entries:
        read_netpbm(directory / image_path)
        _read_mask(directory / mask_path)
    return DatasetManifest(split=split, entries=entries, scene=scene, seed=int(meta.get("seed", 0)),
                           root=directory)


def load_samples(manifest: DatasetManifest) -> List[Sample]:
    if manifest.root is None:
        raise DatasetError("manifest has no root directory")
    samples = []
    for name, image_path, mask_path in manifest.entries:
        image = from_bytes_image(read_netpbm(manifest.root / image_path))
        mask = _read_mask(manifest.root / mask_path)
        if image.shape[1:] != mask.shape:
            raise DatasetError(f"{name}: image {image.shape[1:]} and mask {mask.shape} sizes differ")
        samples.append(Sample(name=name, image=image, mask=mask))
    logger.debug("loaded %d samples from %s", len(samples), manifest.root)
    return samples
