"""
Backbone Module
---------------
Small convolutional feature extractor, the 1x1-conv attention head, the
classification head, and the SVD-based orthogonal initialization of the
attention weights.
"""
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from modules.bilinear_pooling import BAP_MODES, FeatureMatrix, bap, feature_matrix_shape
from modules.errors import ConfigError, DimensionError, NumericalError
from modules.tensor_core import (
    Tensor, conv2d, dense, flatten, l2_normalize, mean, pool2d, relu, scale,
)

logger = logging.getLogger(__name__)

Params = Dict[str, Tensor]

# images in [0, 1] are shifted and scaled to roughly zero mean, unit spread
INPUT_MEAN = 0.5
INPUT_STD = 0.25


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class StageSpec:
    """One conv stage: 3x3 conv (same padding) -> relu -> max pool."""
    out_channels: int
    kernel: int = 3
    pool_stride: int = 2


@dataclass(frozen=True)
class BackboneConfig:
    """
    Shapes of the feature network and its heads.

    The last stage's width is the feature channel count N.
    """
    input_channels: int = 3
    input_size: int = 64
    stages: Tuple[StageSpec, ...] = (StageSpec(8), StageSpec(16), StageSpec(32))
    attention_maps: int = 8
    num_classes: int = 10

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("Backbone needs at least one stage")
        if self.attention_maps < 1:
            raise ConfigError(f"attention_maps must be >= 1, got {self.attention_maps}")
        if self.feature_channels < self.attention_maps:
            raise ConfigError(
                f"feature channels N={self.feature_channels} must be >= attention maps M={self.attention_maps}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        size = self.input_size
        for stage in self.stages:
            if stage.kernel % 2 == 0 or size % stage.pool_stride:
                raise ConfigError(f"Stage {stage} does not tile a {size}x{size} map")
            size //= stage.pool_stride
        if size < 2:
            raise ConfigError(f"Final feature map {size}x{size} is smaller than 2x2")

    @property
    def feature_channels(self) -> int:
        return self.stages[-1].out_channels

    @property
    def feature_size(self) -> int:
        size = self.input_size
        for stage in self.stages:
            size //= stage.pool_stride
        return size

    def matrix_shape(self, bap_mode: str = "per_location") -> Tuple[int, int]:
        side = self.feature_size
        return feature_matrix_shape(self.feature_channels, self.attention_maps, side, side, bap_mode)

    @classmethod
    def from_widths(cls, widths: Sequence[int], **kwargs) -> "BackboneConfig":
        return cls(stages=tuple(StageSpec(int(w)) for w in widths), **kwargs)


@dataclass
class BackboneOutput:
    """
    Result of one head's forward pass.

    Attributes:
        features: [N, H, W] feature maps
        attentions: [M, H, W] non-negative attention maps (None without attention)
        feature_matrix: BAP output scaled to unit Frobenius norm (None without attention)
        logits: [C] class scores
    """
    features: Tensor
    attentions: Optional[Tensor]
    feature_matrix: Optional[FeatureMatrix]
    logits: Tensor


# ============================================================================
# PARAMETERS
# ============================================================================

def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_backbone_params(config: BackboneConfig, rng: np.random.Generator) -> Params:
    """He-initialized conv stages named ``backbone.stage<i>.weight/bias``."""
    params: Params = {}
    in_channels = config.input_channels
    for i, stage in enumerate(config.stages):
        k = stage.kernel
        shape = (stage.out_channels, in_channels, k, k)
        params[f"backbone.stage{i}.weight"] = Tensor(
            _he_normal(rng, shape, in_channels * k * k), requires_grad=True, name=f"backbone.stage{i}.weight")
        params[f"backbone.stage{i}.bias"] = Tensor(
            np.zeros(stage.out_channels), requires_grad=True, name=f"backbone.stage{i}.bias")
        in_channels = stage.out_channels
    return params


def init_head_params(config: BackboneConfig, rng: np.random.Generator, head: str,
                     bap_mode: str = "per_location", use_bap: bool = True) -> Params:
    """
    Attention and classifier parameters for one head ("coarse" or "fine").

    With use_bap the head owns ``<head>.attention.weight`` [M, N, 1, 1] and a
    classifier over the flattened feature matrix; without it the classifier
    reads globally averaged features [N].
    """
    params: Params = {}
    n, m = config.feature_channels, config.attention_maps
    if use_bap:
        params[f"{head}.attention.weight"] = Tensor(
            _he_normal(rng, (m, n, 1, 1), n), requires_grad=True, name=f"{head}.attention.weight")
        rows, cols = config.matrix_shape(bap_mode)
        fan_in = rows * cols
    else:
        fan_in = n
    params[f"{head}.classifier.weight"] = Tensor(
        rng.normal(0.0, math.sqrt(1.0 / fan_in), size=(config.num_classes, fan_in)),
        requires_grad=True, name=f"{head}.classifier.weight")
    params[f"{head}.classifier.bias"] = Tensor(
        np.zeros(config.num_classes), requires_grad=True, name=f"{head}.classifier.bias")
    return params


# ============================================================================
# FORWARD
# ============================================================================

def extract_features(image: Tensor, params: Params, config: BackboneConfig) -> Tensor:
    """
    Run the conv stages on a [C_img, H_img, W_img] image -> [N, H, W].

    The image is first mapped to (image - INPUT_MEAN) / INPUT_STD, so a
    uniform mid-grey input reaches the first conv as zeros.
    """
    expected = (config.input_channels, config.input_size, config.input_size)
    if image.shape != expected:
        raise DimensionError(f"Image shape {image.shape} does not match backbone input {expected}")
    x = scale(image - INPUT_MEAN, 1.0 / INPUT_STD)
    for i, stage in enumerate(config.stages):
        x = conv2d(x, params[f"backbone.stage{i}.weight"], params[f"backbone.stage{i}.bias"],
                   stride=1, padding=stage.kernel // 2)
        x = relu(x)
        x = pool2d(x, kind="max", window=stage.pool_stride, stride=stage.pool_stride)
    return x


def attention_maps(features: Tensor, params: Params, head: str) -> Tensor:
    """relu(1x1 conv) of the features -> [M, H, W], elementwise >= 0."""
    return relu(conv2d(features, params[f"{head}.attention.weight"]))


def forward(image: Tensor, params: Params, config: BackboneConfig, head: str = "coarse",
            pool: str = "avg", bap_mode: str = "per_location", use_bap: bool = True) -> BackboneOutput:
    """
    Features, attention maps and logits of one head for a single image.

    Args:
        image: [C_img, H_img, W_img] tensor with values in [0, 1]
        params: parameter store holding ``backbone.*`` and ``<head>.*``
        config: backbone shapes
        head: parameter prefix of the head
        pool: BAP pooling kind
        bap_mode: BAP mode
        use_bap: False selects the global-average-pooling head

    Returns:
        BackboneOutput
    """
    if bap_mode not in BAP_MODES:
        raise ConfigError(f"Unknown bap_mode: {bap_mode}")
    features = extract_features(image, params, config)
    weight = params[f"{head}.classifier.weight"]
    bias = params[f"{head}.classifier.bias"]
    if not use_bap:
        pooled = mean(features, axis=(1, 2))
        return BackboneOutput(features, None, None, dense(pooled, weight, bias))
    attentions = attention_maps(features, params, head)
    matrix = l2_normalize(bap(features, attentions, pool=pool, mode=bap_mode))
    # unit-norm matrix times sqrt(M*L) gives entries of unit RMS at the classifier
    flat = scale(flatten(matrix), math.sqrt(matrix.size))
    return BackboneOutput(features, attentions, matrix, dense(flat, weight, bias))


# ============================================================================
# SVD AND ORTHOGONAL INITIALIZATION
# ============================================================================

def _complete_columns(u: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid columns of u with unit vectors orthogonal to the rest."""
    u = u.copy()
    basis = [u[:, j] for j in range(u.shape[1]) if valid[j]]
    candidates = iter(np.eye(u.shape[0]))
    for j in range(u.shape[1]):
        if valid[j]:
            continue
        for e in candidates:
            v = e - sum((b @ e) * b for b in basis) if basis else e.copy()
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                u[:, j] = v / norm
                basis.append(u[:, j])
                break
    return u


def svd(x: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Thin singular value decomposition by one-sided Jacobi rotations.

    Args:
        x: [m, n] finite matrix
        tol: stop once every column pair's normalized inner product is below tol
        max_sweeps: iteration cap

    Returns:
        (U [m, k], S [k], Vt [k, n]) with k = min(m, n), S non-increasing,
        x == U @ diag(S) @ Vt

    Raises:
        NumericalError: non-finite input or no convergence within max_sweeps
    """
    a = np.array(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"svd expects a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("svd input has non-finite entries")
    m, n = a.shape
    if m < n:
        u, s, vt = svd(a.T, tol, max_sweeps)
        return vt.T, s, u.T

    b = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = b[:, i] @ b[:, i]
                beta = b[:, j] @ b[:, j]
                gamma = b[:, i] @ b[:, j]
                if alpha == 0.0 or beta == 0.0 or gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                bi = b[:, i].copy()
                b[:, i] = c * bi - s * b[:, j]
                b[:, j] = s * bi + c * b[:, j]
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if off < tol:
            break
    else:
        raise NumericalError(f"svd did not converge in {max_sweeps} sweeps")

    sigma = np.linalg.norm(b, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    b = b[:, order]
    v = v[:, order]
    scale = sigma[0] if sigma.size and sigma[0] > 0 else 1.0
    valid = sigma > 1e-14 * scale
    u = np.zeros_like(b)
    u[:, valid] = b[:, valid] / sigma[valid]
    if not valid.all():
        u = _complete_columns(u, valid)
    return u, sigma, v.T


def orthogonal_init_attention(weight, rng: np.random.Generator, max_attempts: int = 5) -> np.ndarray:
    """
    Replace an [M, N] attention weight by its first M right singular vectors.

    The rows of the result are the first M rows of Vt for weight = U S Vt,
    hence orthonormal. A rank-deficient draw is replaced by a fresh normal
    draw from rng, up to max_attempts attempts in total.

    Args:
        weight: [M, N] matrix (the 1x1 conv weight viewed as a matrix)
        rng: generator used only for redraws

    Returns:
        [M, N] array with W @ W.T == I_M
    """
    draw = np.array(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
    if draw.ndim != 2:
        raise DimensionError(f"Attention weight must be a matrix, got shape {draw.shape}")
    m, n = draw.shape
    if m > n:
        raise DimensionError(f"Orthogonal init needs M <= N, got {m}x{n}")
    for attempt in range(1, max_attempts + 1):
        try:
            _, sigma, vt = svd(draw)
            if sigma[-1] <= 1e-10 * max(sigma[0], 1e-300):
                raise NumericalError("rank-deficient attention weight")
            return vt[:m]
        except NumericalError as e:
            logger.warning("Orthogonal init attempt %d/%d failed: %s", attempt, max_attempts, e)
            draw = rng.normal(0.0, 1.0, size=(m, n))
    raise NumericalError(f"Orthogonal init failed after {max_attempts} attempts")


def apply_orthogonal_init(params: Params, head: str, rng: np.random.Generator) -> None:
    """Orthogonally re-initialize ``<head>.attention.weight`` in place."""
    tensor = params[f"{head}.attention.weight"]
    m, n = tensor.shape[:2]
    ortho = orthogonal_init_attention(tensor.data.reshape(m, n), rng)
    tensor.data[...] = ortho.reshape(tensor.shape)
