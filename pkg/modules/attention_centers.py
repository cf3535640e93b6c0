"""
Attention Centers Module
------------------------
Center loss on feature matrices and the moving-average update of the
per-class center matrices.

Centers are plain state (numpy arrays), not parameters: the loss sends
gradients to the feature matrix only, and the optimizer never sees them.
"""
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from modules.errors import ConfigError, DimensionError, LabelError
from modules.tensor_core import Function, Tensor, get_dtype


@dataclass
class CenterBank:
    """
    C center matrices of shape [rows, cols], all starting at zero.

    Attributes:
        num_classes: number of classes C
        rows: attention maps M
        cols: feature-matrix row length
        beta: moving-average momentum in (0, 1]
    """
    num_classes: int
    rows: int
    cols: int
    beta: float = 0.05
    centers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if self.num_classes < 1 or self.rows < 1 or self.cols < 1:
            raise ConfigError(f"Invalid center bank shape: {self.num_classes}x{self.rows}x{self.cols}")
        self.centers = np.zeros((self.num_classes, self.rows, self.cols), dtype=get_dtype())

    @property
    def matrix_shape(self):
        return self.rows, self.cols

    def check(self, feature_shape: Sequence[int], label: int) -> None:
        if tuple(feature_shape) != self.matrix_shape:
            raise DimensionError(f"Feature matrix {tuple(feature_shape)} does not match centers {self.matrix_shape}")
        if not 0 <= label < self.num_classes:
            raise LabelError(f"Label {label} out of range [0, {self.num_classes})")

    def to_named(self, prefix: str) -> Dict[str, np.ndarray]:
        """Centers as ``<prefix>.<class>`` arrays (checkpoint naming)."""
        return {f"{prefix}.{i}": self.centers[i] for i in range(self.num_classes)}

    def load_named(self, prefix: str, arrays: Dict[str, np.ndarray]) -> None:
        for i in range(self.num_classes):
            key = f"{prefix}.{i}"
            if key not in arrays:
                raise DimensionError(f"Missing center tensor: {key}")
            value = np.asarray(arrays[key])
            if value.shape != self.matrix_shape:
                raise DimensionError(f"Center {key} has shape {value.shape}, expected {self.matrix_shape}")
            self.centers[i] = value


class CenterLoss(Function):
    def forward(self, feature, center=None):
        self.diff = feature - center
        return np.asarray((self.diff * self.diff).sum())

    def backward(self, grad):
        return (2.0 * self.diff * grad.reshape(-1)[0],)


def center_loss(feature: Tensor, label: int, bank: CenterBank) -> Tensor:
    """
    Squared Frobenius distance between a feature matrix and its class center.

    Args:
        feature: [M, L] feature matrix
        label: class index
        bank: center bank (read only)

    Returns:
        Scalar tensor; gradient 2 * (feature - center) flows to feature only
    """
    bank.check(feature.shape, label)
    return CenterLoss.apply(feature, center=bank.centers[label].astype(feature.data.dtype))


def batch_center_loss(features: Sequence[Tensor], labels: Sequence[int], bank: CenterBank) -> Tensor:
    """Per-sample center loss averaged over a batch."""
    if not features:
        raise DimensionError("batch_center_loss needs at least one sample")
    total = None
    for feature, label in zip(features, labels):
        loss = center_loss(feature, label, bank)
        total = loss if total is None else total + loss
    return total * (1.0 / len(features))


def update_centers(feature, label: int, bank: CenterBank) -> None:
    """
    Moving-average update: c[label] <- (1 - beta) * c[label] + beta * feature.

    Other classes are untouched.
    """
    values = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    bank.check(values.shape, label)
    beta = bank.beta
    bank.centers[label] = (1.0 - beta) * bank.centers[label] + beta * values
