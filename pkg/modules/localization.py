"""
Localization Module
-------------------
Weakly supervised object localization: attention maps become a binary mask
(average, upsample, smooth, threshold), the mask becomes a box, and boxes are
scored against ground truth with IoU.

Models without attention use a class activation map of the predicted class
instead of the attention maps.
"""
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from modules.coarse2fine import ModelGraph, predict_all
from modules.deconv_upsampler import reference_interpolate, upsample
from modules.errors import ConfigError, DatasetInvariantError, DimensionError, NoDetectionError
from modules.tensor_core import Tensor, no_grad

logger = logging.getLogger(__name__)

Upsampler = Callable[[Tensor], Tensor]

RESULT_COLUMNS = ["sample_id", "pred_class", "true_class", "iou", "correct"]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box of inclusive pixel indices; masks are indexed [y, x]."""
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise DimensionError(f"Inverted box: {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise DimensionError(f"Negative box coordinates: {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def fits(self, width: int, height: int) -> bool:
        return self.x_max < width and self.y_max < height

    @classmethod
    def from_array(cls, values) -> "Box":
        x_min, y_min, x_max, y_max = (int(v) for v in values)
        return cls(x_min, y_min, x_max, y_max)

    def as_tuple(self) -> tuple:
        return self.x_min, self.y_min, self.x_max, self.y_max


@dataclass
class LocalizationResult:
    sample_id: int
    box: Optional[Box]
    pred_class: int
    true_class: int
    iou: float
    correct: bool


# ============================================================================
# MASKS AND BOXES
# ============================================================================

def box_filter(map_: np.ndarray) -> np.ndarray:
    """3x3 uniform average with edge-clamped borders."""
    padded = np.pad(map_, 1, mode="edge")
    return sliding_window_view(padded, (3, 3)).mean(axis=(-2, -1))


def attention_to_mask(attentions: Union[Tensor, np.ndarray], upsampler: Upsampler,
                      threshold_frac: float = 0.5) -> np.ndarray:
    """
    Binary object mask from attention maps.

    Mean over the M maps, upsample, 3x3 average, then keep pixels strictly
    above threshold_frac times the smoothed maximum.

    Args:
        attentions: [M, H, W] attention maps
        upsampler: maps a [1, H, W] tensor to [1, H_img, W_img]
        threshold_frac: fraction of the maximum, in (0, 1)

    Returns:
        Boolean [H_img, W_img] mask; all False when the maps carry no
        positive signal (logged, not raised)
    """
    if not 0.0 < threshold_frac < 1.0:
        raise ConfigError(f"threshold_frac must be in (0, 1), got {threshold_frac}")
    values = attentions.data if isinstance(attentions, Tensor) else np.asarray(attentions)
    if values.ndim != 3:
        raise DimensionError(f"attention_to_mask expects [M, H, W], got {values.shape}")
    with no_grad():
        up = upsampler(Tensor(values.mean(axis=0, keepdims=True))).data[0]
    smoothed = box_filter(up.astype(np.float64))
    peak = smoothed.max()
    if not peak > 0:
        logger.warning("Attention maps carry no positive signal; empty mask")
        return np.zeros(smoothed.shape, dtype=bool)
    return smoothed > threshold_frac * peak


def mask_to_box(mask: np.ndarray) -> Box:
    """
    Smallest box containing every true pixel of a [H, W] mask.

    Raises:
        NoDetectionError: if the mask is empty
    """
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise NoDetectionError("Empty mask has no bounding box")
    return Box(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def iou(a: Box, b: Box) -> float:
    """Intersection over union with inclusive pixel counting."""
    width = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    height = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if width <= 0 or height <= 0:
        return 0.0
    inter = width * height
    return inter / (a.area + b.area - inter)


# ============================================================================
# MODEL-LEVEL LOCALIZATION
# ============================================================================

def model_upsampler(model: ModelGraph) -> Upsampler:
    """The model's attention upsampler, without mask normalization."""
    if model.config.upsampler == "deconv" and model.config.attention:
        return lambda attn: upsample(attn, model.params, model.upsampler)
    return lambda attn: reference_interpolate(attn, "bilinear", model.backbone.input_size)


def class_activation_map(model: ModelGraph, image: np.ndarray, class_index: int) -> np.ndarray:
    """relu(sum_n w[class, n] * features[n]) for the GAP classifier -> [1, H, W]."""
    with no_grad():
        features = model.head_forward(Tensor(image), "coarse").features.data
    weight = model.params["coarse.classifier.weight"].data[class_index]
    cam = np.tensordot(weight, features, axes=([0], [0]))
    return np.maximum(cam, 0.0)[None]


def sample_mask(model: ModelGraph, image: np.ndarray, pred_class: int, threshold_frac: float) -> np.ndarray:
    """Localization mask of one image from attention maps, or a CAM without attention."""
    if model.config.attention:
        with no_grad():
            maps = model.head_forward(Tensor(image), "coarse").attentions.data
    else:
        maps = class_activation_map(model, image, pred_class)
    return attention_to_mask(maps, model_upsampler(model), threshold_frac)


def localize_sample(model: ModelGraph, image: np.ndarray, true_class: int, true_box: Box,
                    sample_id: int = 0, threshold_frac: float = 0.5, mode: str = "average",
                    iou_threshold: float = 0.5) -> LocalizationResult:
    """
    Predict class and box for one image and score it.

    A sample is correct when IoU > iou_threshold and the class matches.
    An empty mask counts as a miss with IoU 0.
    """
    pred_class = predict_all(image, model)[mode].label
    mask = sample_mask(model, image, pred_class, threshold_frac)
    try:
        box = mask_to_box(mask)
    except NoDetectionError:
        logger.warning("Sample %d: no detection", sample_id)
        return LocalizationResult(sample_id, None, pred_class, int(true_class), 0.0, False)
    overlap = iou(box, true_box)
    correct = overlap > iou_threshold and pred_class == int(true_class)
    return LocalizationResult(sample_id, box, pred_class, int(true_class), overlap, correct)


def localize_dataset(model: ModelGraph, dataset, threshold_frac: float = 0.5, mode: str = "average",
                     iou_threshold: float = 0.5) -> List[LocalizationResult]:
    """Per-sample localization results over a dataset with ground-truth boxes."""
    if dataset.boxes is None:
        raise DatasetInvariantError("Localization needs a dataset with ground-truth boxes")
    return [
        localize_sample(model, image, int(label), Box.from_array(box), i, threshold_frac, mode, iou_threshold)
        for i, (image, label, box) in enumerate(zip(dataset.images, dataset.labels, dataset.boxes))
    ]


def error_from_results(results: List[LocalizationResult]) -> float:
    """100 * (1 - fraction of correct samples)."""
    if not results:
        raise DimensionError("No localization results")
    return 100.0 * (1.0 - sum(r.correct for r in results) / len(results))


def localization_error(model: ModelGraph, dataset, threshold_frac: float = 0.5, mode: str = "average",
                       iou_threshold: float = 0.5) -> float:
    """
    Localization error in percent over a dataset with boxes.

    Args:
        model: trained model
        dataset: split carrying ground-truth boxes
        threshold_frac: mask threshold as a fraction of the smoothed max
        mode: inference mode that supplies the predicted class
        iou_threshold: minimum IoU (exclusive) for a hit

    Returns:
        Error in [0, 100]

    Raises:
        DatasetInvariantError: if the dataset has no boxes
    """
    return error_from_results(localize_dataset(model, dataset, threshold_frac, mode, iou_threshold))


def results_frame(results: List[LocalizationResult]) -> pd.DataFrame:
    """Per-sample rows ``sample_id, pred_class, true_class, iou, correct``."""
    return pd.DataFrame(
        [[r.sample_id, r.pred_class, r.true_class, r.iou, r.correct] for r in results],
        columns=RESULT_COLUMNS,
    )
