"""
Synthetic Data Module
---------------------
Generates the synthetic fine-grained dataset and reads/writes the binary
dataset container.

Every class is the same ellipse "body"; classes differ only in small parts
(number of spots, an optional corner marker, a slight hue shift). Pose and
background nuisances are drawn independently of the class.

File layout (little-endian): header ``<4sIIIIIIB`` (magic "C2FD", version,
num_samples, channels, height, width, num_classes, has_boxes), then all
images as float32 CHW, then all labels as uint32, then, if has_boxes, four
uint32 per sample (x_min, y_min, x_max, y_max).
"""
import logging
import math
import struct
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from config import DATA_DEFAULTS
from modules.errors import (
    BadMagicError, ConfigError, DatasetInvariantError, FormatError, LengthMismatchError, TruncatedError,
)

logger = logging.getLogger(__name__)

MAGIC = b"C2FD"
VERSION = 1
HEADER = struct.Struct("<4sIIIIIIB")
SUPERSAMPLE = 4

BODY_AXES = (0.45, 0.28)
BODY_COLOR = (0.80, 0.55, 0.30)
SPOT_COLOR = (0.15, 0.10, 0.10)
SPOT_RADIUS = 0.06
MARKER_COLOR = (0.95, 0.95, 0.90)
MARKER_CENTER = (0.30, 0.15)
MARKER_HALF = 0.05


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = DATA_DEFAULTS["num_classes"]
    train_per_class: int = DATA_DEFAULTS["train_per_class"]
    test_per_class: int = DATA_DEFAULTS["test_per_class"]
    channels: int = DATA_DEFAULTS["channels"]
    image_size: int = DATA_DEFAULTS["image_size"]
    min_spots: int = DATA_DEFAULTS["min_spots"]
    max_spots: int = DATA_DEFAULTS["max_spots"]
    use_marker: bool = DATA_DEFAULTS["use_marker"]
    hue_shift: float = DATA_DEFAULTS["hue_shift"]
    max_translation: float = DATA_DEFAULTS["max_translation"]
    max_rotation: float = DATA_DEFAULTS["max_rotation"]
    min_scale: float = DATA_DEFAULTS["min_scale"]
    max_scale: float = DATA_DEFAULTS["max_scale"]
    noise_sigma: float = DATA_DEFAULTS["noise_sigma"]
    seed: int = DATA_DEFAULTS["seed"]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("Need at least 2 classes")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ConfigError("train_per_class must be >= 1 and test_per_class >= 0")
        if self.channels < 1 or self.image_size < 8:
            raise ConfigError(f"Invalid image shape: {self.channels}x{self.image_size}x{self.image_size}")
        if not 0 <= self.min_spots <= self.max_spots:
            raise ConfigError(f"Invalid spot range: {self.min_spots}..{self.max_spots}")
        if not 0.0 <= self.hue_shift <= 0.05:
            raise ConfigError(f"hue_shift must be in [0, 0.05], got {self.hue_shift}")
        if not 0.0 < self.min_scale <= self.max_scale:
            raise ConfigError(f"Invalid scale range: {self.min_scale}..{self.max_scale}")
        if not 0.0 <= self.max_translation < 0.5 or self.max_rotation < 0 or self.noise_sigma < 0:
            raise ConfigError("Nuisance ranges must be non-negative (translation < 0.5)")


@dataclass(frozen=True)
class ClassRecipe:
    spots: int
    marker: bool
    hue: float


def class_recipes(config: SynthConfig) -> List[ClassRecipe]:
    """
    One distinct part recipe per class.

    Spot counts vary fastest, then the marker, then hue levels spread over
    [0, hue_shift].
    """
    spot_counts = list(range(config.min_spots, config.max_spots + 1))
    markers = [False, True] if config.use_marker else [False]
    per_level = len(spot_counts) * len(markers)
    levels = math.ceil(config.num_classes / per_level)
    if levels > 1 and config.hue_shift == 0.0:
        raise ConfigError(f"{config.num_classes} classes need hue_shift > 0 "
                          f"(only {per_level} spot/marker combinations)")
    recipes = []
    for i in range(config.num_classes):
        level = i // per_level
        hue = config.hue_shift * level / (levels - 1) if levels > 1 else config.hue_shift * (i % 2)
        recipes.append(ClassRecipe(spot_counts[i % len(spot_counts)], markers[(i // len(spot_counts)) % len(markers)], hue))
    return recipes


# ============================================================================
# DATASET CONTAINER
# ============================================================================

@dataclass
class Dataset:
    """
    Images, labels and optional ground-truth boxes.

    Attributes:
        images: float32 [n, C, H, W] in [0, 1]
        labels: uint32 [n]
        num_classes: number of classes
        boxes: uint32 [n, 4] (x_min, y_min, x_max, y_max) inclusive, or None
    """
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    boxes: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    @property
    def height(self) -> int:
        return int(self.images.shape[2])

    @property
    def width(self) -> int:
        return int(self.images.shape[3])

    @property
    def image_size(self) -> int:
        if self.height != self.width:
            raise DatasetInvariantError(f"Images are not square: {self.height}x{self.width}")
        return self.height

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        boxes = None if self.boxes is None else self.boxes[indices]
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, boxes)


@dataclass
class DatasetSplits:
    train: Dataset
    test: Dataset


def validate_dataset(dataset: Dataset) -> Tuple[bool, List[str]]:
    """
    Check a dataset against the container invariants.

    Returns:
        Tuple of (is_valid, list_of_issues)
    """
    issues = []
    n = len(dataset)
    if dataset.images.ndim != 4 or dataset.images.shape[0] != n:
        issues.append(f"Images shape {dataset.images.shape} does not match {n} labels")
        return False, issues
    if n and not np.all(np.isfinite(dataset.images)):
        issues.append("Images contain NaN/Inf")
    elif n and (dataset.images.min() < 0.0 or dataset.images.max() > 1.0):
        issues.append("Pixel values outside [0, 1]")
    if n and int(dataset.labels.max()) >= dataset.num_classes:
        issues.append(f"Labels out of range [0, {dataset.num_classes})")
    if dataset.boxes is not None:
        boxes = dataset.boxes.astype(np.int64)
        if boxes.shape != (n, 4):
            issues.append(f"Boxes shape {boxes.shape}, expected ({n}, 4)")
        elif n:
            if np.any(boxes[:, 0] > boxes[:, 2]) or np.any(boxes[:, 1] > boxes[:, 3]):
                issues.append("Inverted boxes")
            if np.any(boxes[:, 2] >= dataset.width) or np.any(boxes[:, 3] >= dataset.height):
                issues.append("Boxes outside image bounds")
    return len(issues) == 0, issues


def write(dataset: Dataset, path) -> None:
    """
    Write a dataset file.

    Raises:
        DatasetInvariantError: if the dataset violates the container invariants
    """
    is_valid, issues = validate_dataset(dataset)
    if not is_valid:
        raise DatasetInvariantError("; ".join(issues))
    n, c, h, w = dataset.images.shape
    has_boxes = dataset.boxes is not None
    header = HEADER.pack(MAGIC, VERSION, n, c, h, w, dataset.num_classes, int(has_boxes))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())
        if has_boxes:
            f.write(np.ascontiguousarray(dataset.boxes, dtype="<u4").tobytes())


def read(path) -> Dataset:
    """
    Read a dataset file.

    Raises:
        FileNotFoundError: if the file doesn't exist
        BadMagicError: wrong magic bytes
        TruncatedError: header cut short or payload not a whole number of records
        LengthMismatchError: payload holds a different number of samples than the header
        DatasetInvariantError: labels or boxes violate the invariants
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedError(f"{path}: {len(raw)} bytes is shorter than the {HEADER.size}-byte header")
    magic, version, n, c, h, w, num_classes, has_boxes = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if has_boxes not in (0, 1):
        raise FormatError(f"{path}: has_boxes flag is {has_boxes}")

    image_bytes = 4 * c * h * w
    record = image_bytes + 4 + (16 if has_boxes else 0)
    payload = len(raw) - HEADER.size
    if payload != n * record:
        if payload % record:
            raise TruncatedError(f"{path}: payload of {payload} bytes is not a whole number of {record}-byte samples")
        raise LengthMismatchError(f"{path}: header claims {n} samples, payload holds {payload // record}")

    offset = HEADER.size
    images = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=offset)
    offset += n * image_bytes
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=offset)
    offset += 4 * n
    boxes = None
    if has_boxes:
        boxes = np.frombuffer(raw, dtype="<u4", count=4 * n, offset=offset).reshape(n, 4).astype(np.uint32)
    dataset = Dataset(images.reshape(n, c, h, w).astype(np.float32), labels.astype(np.uint32), num_classes, boxes)
    is_valid, issues = validate_dataset(dataset)
    if not is_valid:
        raise DatasetInvariantError(f"{path}: " + "; ".join(issues))
    return dataset


# ============================================================================
# RENDERING
# ============================================================================

def _grid(size: int, oversample: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized coordinates in [-1, 1] of every subpixel sample, indexed [y, x]."""
    coords = (np.arange(size * oversample) + 0.5) / oversample
    norm = (coords - size / 2.0) / (size / 2.0)
    return np.meshgrid(norm, norm, indexing="xy")


def _downsample(values: np.ndarray, oversample: int) -> np.ndarray:
    *lead, hs, ws = values.shape
    return values.reshape(*lead, hs // oversample, oversample, ws // oversample, oversample).mean(axis=(-3, -1))


def spot_positions(max_spots: int) -> List[Tuple[float, float]]:
    """Canonical spot centers along the body's long axis."""
    if max_spots <= 1:
        return [(0.0, 0.0)]
    return [(-0.25 + 0.5 * j / (max_spots - 1), 0.0) for j in range(max_spots)]


def render_canonical(recipe: ClassRecipe, config: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Anti-aliased canonical body of one class.

    Returns:
        (premultiplied color [C, S, S], coverage [S, S]); coverage is the
        body's area fraction per pixel from 4x4 subpixel samples
    """
    size = config.image_size
    u, v = _grid(size, SUPERSAMPLE)
    body = (u / BODY_AXES[0]) ** 2 + (v / BODY_AXES[1]) ** 2 <= 1.0
    base = np.array(BODY_COLOR) + recipe.hue * np.array([1.0, 0.0, -1.0])
    layers = np.empty((config.channels,) + u.shape)
    for c in range(config.channels):
        layers[c] = base[c % 3]
    for su, sv in spot_positions(config.max_spots)[:recipe.spots]:
        spot = (u - su) ** 2 + (v - sv) ** 2 <= SPOT_RADIUS ** 2
        for c in range(config.channels):
            layers[c][spot] = SPOT_COLOR[c % 3]
    if recipe.marker:
        marker = (np.abs(u - MARKER_CENTER[0]) <= MARKER_HALF) & (np.abs(v - MARKER_CENTER[1]) <= MARKER_HALF)
        for c in range(config.channels):
            layers[c][marker] = MARKER_COLOR[c % 3]
    coverage = _downsample(body.astype(np.float64), SUPERSAMPLE)
    color = _downsample(layers * body, SUPERSAMPLE)
    return color, coverage


def bilinear_sample(values: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample [C, H, W] at fractional pixel positions; zero outside the image."""
    _, h, w = values.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx, fy = xs - x0, ys - y0
    out = np.zeros((values.shape[0],) + xs.shape)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            picked = values[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += picked * (wx * wy * inside)
    return out


@dataclass(frozen=True)
class Pose:
    """Translation in pixels, rotation in radians and scale of one posed body."""
    tx: float
    ty: float
    angle: float
    scale: float


def draw_pose(config: SynthConfig, rng: np.random.Generator) -> Pose:
    size = config.image_size
    tx, ty = rng.uniform(-config.max_translation, config.max_translation, size=2) * size
    angle = math.radians(rng.uniform(-config.max_rotation, config.max_rotation))
    return Pose(float(tx), float(ty), angle, float(rng.uniform(config.min_scale, config.max_scale)))


def _source_coords(pose: Pose, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Canonical pixel position that every output pixel samples, indexed [y, x]."""
    center = (size - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    dx, dy = xs - center - pose.tx, ys - center - pose.ty
    cos, sin = math.cos(pose.angle), math.sin(pose.angle)
    return center + (cos * dx + sin * dy) / pose.scale, center + (-sin * dx + cos * dy) / pose.scale


def body_mask(pose: Pose, config: SynthConfig) -> np.ndarray:
    """Pixels whose centers fall inside the posed body ellipse (no anti-aliasing)."""
    size = config.image_size
    src_x, src_y = _source_coords(pose, size)
    u = (src_x + 0.5 - size / 2.0) / (size / 2.0)
    v = (src_y + 0.5 - size / 2.0) / (size / 2.0)
    return (u / BODY_AXES[0]) ** 2 + (v / BODY_AXES[1]) ** 2 <= 1.0


def render_sample(color: np.ndarray, coverage: np.ndarray, config: SynthConfig,
                  rng: np.random.Generator, pose: Optional[Pose] = None
                  ) -> Tuple[np.ndarray, Tuple[int, int, int, int]]:
    """
    Pose the canonical body over a noise background.

    The pose is drawn from rng unless given; the background always is.

    Returns:
        (image [C, S, S] in [0, 1], tight box of pixels with body coverage > 0.5)
    """
    size = config.image_size
    if pose is None:
        pose = draw_pose(config, rng)
    background = np.clip(rng.normal(0.5, config.noise_sigma, size=(config.channels, size, size)), 0.0, 1.0)

    src_x, src_y = _source_coords(pose, size)
    warped = bilinear_sample(np.concatenate([color, coverage[None]]), src_x, src_y)
    alpha = np.clip(warped[-1], 0.0, 1.0)
    image = np.clip(warped[:-1] + (1.0 - alpha) * background, 0.0, 1.0)

    rows, cols = np.nonzero(alpha > 0.5)
    if rows.size == 0:
        raise DatasetInvariantError("Posed body left the image")
    return image.astype(np.float32), (int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def _generate_split(per_class: int, canon: list, config: SynthConfig, rng: np.random.Generator) -> Dataset:
    labels = rng.permutation(np.repeat(np.arange(config.num_classes), per_class)).astype(np.uint32)
    n = labels.shape[0]
    images = np.zeros((n, config.channels, config.image_size, config.image_size), dtype=np.float32)
    boxes = np.zeros((n, 4), dtype=np.uint32)
    for i, label in enumerate(labels):
        color, coverage = canon[int(label)]
        images[i], boxes[i] = render_sample(color, coverage, config, rng)
    return Dataset(images, labels, config.num_classes, boxes)


def generate(config: SynthConfig) -> DatasetSplits:
    """
    Generate the train and test splits; a pure function of the config.

    Returns:
        DatasetSplits with exactly train_per_class / test_per_class samples
        per class, in shuffled order, with ground-truth boxes
    """
    canon = [render_canonical(recipe, config) for recipe in class_recipes(config)]
    rng = np.random.default_rng(config.seed)
    train = _generate_split(config.train_per_class, canon, config, rng)
    test = _generate_split(config.test_per_class, canon, config, rng)
    logger.info("Generated %d train / %d test samples over %d classes", len(train), len(test), config.num_classes)
    return DatasetSplits(train, test)


def print_dataset_summary(dataset: Dataset, title: str = "DATASET SUMMARY") -> None:
    """Print shape, class balance and box statistics of a split."""
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    print(f"Samples: {len(dataset):,}")
    print(f"Image shape: {dataset.channels}x{dataset.height}x{dataset.width}")
    print(f"Classes: {dataset.num_classes}")
    if len(dataset):
        print(f"Pixel range: [{dataset.images.min():.3f}, {dataset.images.max():.3f}]")

    counts = pd.Series(dataset.labels.astype(np.int64)).value_counts().reindex(
        range(dataset.num_classes), fill_value=0)
    print("\n" + "-" * 60)
    print(f"{'Class':<10} {'Samples':<10}")
    print("-" * 60)
    for label, count in counts.items():
        print(f"{label:<10} {count:<10}")

    if dataset.boxes is not None and len(dataset):
        boxes = pd.DataFrame(dataset.boxes.astype(np.int64), columns=["x_min", "y_min", "x_max", "y_max"])
        widths = boxes["x_max"] - boxes["x_min"] + 1
        heights = boxes["y_max"] - boxes["y_min"] + 1
        print("-" * 60)
        print(f"Box width:  mean {widths.mean():.1f}  min {widths.min()}  max {widths.max()}")
        print(f"Box height: mean {heights.mean():.1f}  min {heights.min()}  max {heights.max()}")
    print("=" * 60 + "\n")
