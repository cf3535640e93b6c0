"""
Deconv Upsampler Module
-----------------------
Learnable transposed-convolution network that maps an attention map from
feature resolution to image resolution, the classical interpolators it is
pretrained to imitate, and the pretraining procedure itself.
"""
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from config import SHOW_PROGRESS
from modules.errors import ConfigError, DimensionError, NumericalError
from modules.tensor_core import (
    Function, Tensor, conv2d_transpose, gradients, mse_loss, no_grad, relu,
)

logger = logging.getLogger(__name__)

Params = Dict[str, Tensor]

INTERP_METHODS = ("bilinear", "cubic", "nearest")
CATMULL_ROM_A = -0.5


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class UpsamplerConfig:
    """
    Stack of stride-2 transposed convs (kernel 4) with relu between and a
    linear last layer; each layer doubles the spatial size.

    Every layer sees its input edge-replicated by one pixel and crops three
    pixels from each side of its output, which makes channel 0 at
    initialization an exact edge-clamped bilinear 2x upsampler.
    """
    in_size: int = 8
    out_size: int = 64
    width: int = 8

    def __post_init__(self):
        if self.in_size < 1 or self.out_size < self.in_size:
            raise ConfigError(f"Upsampler sizes invalid: {self.in_size} -> {self.out_size}")
        factor = self.out_size // self.in_size
        if self.out_size % self.in_size or factor & (factor - 1) or factor < 2:
            raise ConfigError(f"out_size / in_size must be a power of two >= 2, got {self.out_size}/{self.in_size}")
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")

    @property
    def num_layers(self) -> int:
        return int(round(math.log2(self.out_size // self.in_size)))


BILINEAR_TAPS = np.array([0.25, 0.75, 0.75, 0.25])
INIT_NOISE = 0.01


def init_upsampler_params(config: UpsamplerConfig, rng: np.random.Generator) -> Params:
    """
    ``upsampler.layer<i>.weight/bias`` starting as a bilinear upsampler.

    Channel 0 -> 0 of every layer holds the separable bilinear kernel, so the
    untrained stack already maps maps to smooth upsampled maps; every other
    weight is small Gaussian noise and biases are zero.
    """
    params: Params = {}
    layers = config.num_layers
    kernel = np.outer(BILINEAR_TAPS, BILINEAR_TAPS)
    for i in range(layers):
        c_in = 1 if i == 0 else config.width
        c_out = 1 if i == layers - 1 else config.width
        weight = rng.normal(0.0, INIT_NOISE, size=(c_in, c_out, 4, 4))
        weight[0, 0] = kernel
        params[f"upsampler.layer{i}.weight"] = Tensor(weight, requires_grad=True, name=f"upsampler.layer{i}.weight")
        params[f"upsampler.layer{i}.bias"] = Tensor(
            np.zeros(c_out), requires_grad=True, name=f"upsampler.layer{i}.bias")
    return params


def edge_pad_matrix(size: int) -> np.ndarray:
    """[size + 2, size] matrix repeating the first and last entry once."""
    matrix = np.zeros((size + 2, size))
    matrix[np.arange(1, size + 1), np.arange(size)] = 1.0
    matrix[0, 0] = matrix[-1, -1] = 1.0
    return matrix


def upsample(attn: Tensor, params: Params, config: UpsamplerConfig) -> Tensor:
    """
    Map a [1, H, W] attention map to a [1, H_img, W_img] mask.

    Raises:
        DimensionError: if attn is not [1, in_size, in_size]
    """
    if attn.shape != (1, config.in_size, config.in_size):
        raise DimensionError(f"Upsampler expects (1, {config.in_size}, {config.in_size}), got {attn.shape}")
    x = attn
    layers = config.num_layers
    for i in range(layers):
        pad = edge_pad_matrix(x.shape[1])
        x = SeparableResample.apply(x, rows=pad, cols=pad)
        x = conv2d_transpose(x, params[f"upsampler.layer{i}.weight"], params[f"upsampler.layer{i}.bias"],
                             stride=2, padding=3)
        if i < layers - 1:
            x = relu(x)
    return x


# ============================================================================
# CLASSICAL INTERPOLATION
# ============================================================================

def _cubic_weight(t: np.ndarray) -> np.ndarray:
    a = CATMULL_ROM_A
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def interpolation_matrix(in_size: int, out_size: int, method: str) -> np.ndarray:
    """
    [out_size, in_size] matrix of a 1-D interpolator (half-pixel centers,
    edge-clamped), so that ``R @ signal`` resamples a signal.
    """
    if method not in INTERP_METHODS:
        raise ValueError(f"Unknown interpolation method: {method} (expected one of {INTERP_METHODS})")
    ratio = in_size / out_size
    matrix = np.zeros((out_size, in_size))
    for o in range(out_size):
        if method == "nearest":
            matrix[o, min(int(math.floor((o + 0.5) * ratio)), in_size - 1)] = 1.0
            continue
        src = (o + 0.5) * ratio - 0.5
        base = math.floor(src)
        if method == "bilinear":
            frac = src - base
            for offset, weight in ((0, 1.0 - frac), (1, frac)):
                matrix[o, min(max(base + offset, 0), in_size - 1)] += weight
        else:
            offsets = np.arange(-1, 3)
            weights = _cubic_weight(src - (base + offsets))
            for offset, weight in zip(offsets, weights):
                matrix[o, min(max(base + offset, 0), in_size - 1)] += weight
    return matrix


class SeparableResample(Function):
    """out[c] = Rh @ x[c] @ Rw.T for fixed interpolation matrices."""

    def forward(self, x, rows=None, cols=None):
        self.rows = rows.astype(x.dtype)
        self.cols = cols.astype(x.dtype)
        return np.einsum("oh,chw,pw->cop", self.rows, x, self.cols)

    def backward(self, grad):
        return (np.einsum("oh,cop,pw->chw", self.rows, grad, self.cols),)


def reference_interpolate(map_: Tensor, method: str, out_size: int) -> Tensor:
    """
    Classical interpolation of a [C, H, W] map to [C, out_size, out_size].

    Bilinear and nearest use half-pixel centers; cubic is Catmull-Rom
    (a = -0.5). Borders are edge-clamped. The result is differentiable (a
    fixed linear operator), so it also serves as a non-learnable upsampler.
    """
    if map_.ndim != 3:
        raise DimensionError(f"reference_interpolate expects [C, H, W], got {map_.shape}")
    _, h, w = map_.shape
    if out_size < h or out_size < w:
        raise DimensionError(f"out_size {out_size} is smaller than input {h}x{w}")
    return SeparableResample.apply(map_, rows=interpolation_matrix(h, out_size, method),
                                   cols=interpolation_matrix(w, out_size, method))


# ============================================================================
# PRETRAINING DATA
# ============================================================================

@dataclass
class InterpPairSet:
    """
    Random smooth maps and their classically upsampled versions.

    Attributes:
        inputs: [count, 1, H, W] maps in [0, 1]
        targets: [count, 1, H_img, W_img]
        methods: interpolator used for each pair
    """
    inputs: np.ndarray
    targets: np.ndarray
    methods: List[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.inputs.shape[0])

    def split(self, held_out: int) -> tuple:
        """First ``count - held_out`` pairs for training, the rest held out."""
        if not 0 <= held_out < self.count:
            raise ConfigError(f"held_out must be in [0, {self.count}), got {held_out}")
        cut = self.count - held_out
        return (InterpPairSet(self.inputs[:cut], self.targets[:cut], self.methods[:cut]),
                InterpPairSet(self.inputs[cut:], self.targets[cut:], self.methods[cut:]))


def random_smooth_map(rng: np.random.Generator, size: int, seed_size: int = 4, noise: float = 0.05) -> np.ndarray:
    """Low-frequency map in [0, 1]: a random seed grid blown up bilinearly, then perturbed."""
    seed = rng.uniform(0.0, 1.0, size=(seed_size, seed_size))
    r = interpolation_matrix(seed_size, size, "bilinear")
    smooth = r @ seed @ r.T
    return np.clip(smooth + rng.normal(0.0, noise, size=(size, size)), 0.0, 1.0)


def make_pairs(config: UpsamplerConfig, count: int, rng: np.random.Generator) -> InterpPairSet:
    """Generate ``count`` (map, upsampled map) pairs, methods drawn uniformly."""
    if count < 1:
        raise ConfigError("make_pairs needs count >= 1")
    inputs = np.zeros((count, 1, config.in_size, config.in_size), dtype=np.float32)
    targets = np.zeros((count, 1, config.out_size, config.out_size), dtype=np.float32)
    methods: List[str] = []
    matrices = {m: interpolation_matrix(config.in_size, config.out_size, m) for m in INTERP_METHODS}
    for i in range(count):
        method = INTERP_METHODS[int(rng.integers(len(INTERP_METHODS)))]
        source = random_smooth_map(rng, config.in_size)
        r = matrices[method]
        inputs[i, 0] = source
        targets[i, 0] = r @ source @ r.T
        methods.append(method)
    return InterpPairSet(inputs, targets, methods)


# ============================================================================
# PRETRAINING
# ============================================================================

@dataclass
class PretrainResult:
    params: Params
    epoch_losses: List[float]


def evaluate_mse(params: Params, config: UpsamplerConfig, pairs: InterpPairSet) -> float:
    """Mean squared error of the upsampler over a pair set."""
    total = 0.0
    with no_grad():
        for i in range(pairs.count):
            total += mse_loss(upsample(Tensor(pairs.inputs[i]), params, config), pairs.targets[i]).item()
    return total / pairs.count


def upsampler_baseline_mse(pairs: InterpPairSet, out_size: int) -> float:
    """MSE of nearest-neighbor versus bilinear upsampling of the pair inputs."""
    nearest = interpolation_matrix(pairs.inputs.shape[-1], out_size, "nearest")
    bilinear = interpolation_matrix(pairs.inputs.shape[-1], out_size, "bilinear")
    errors = [np.mean((nearest @ x[0] @ nearest.T - bilinear @ x[0] @ bilinear.T) ** 2) for x in pairs.inputs]
    return float(np.mean(errors))


def bilinear_reference_mse(params: Params, config: UpsamplerConfig, pairs: InterpPairSet) -> float:
    """MSE of the upsampler versus the bilinear oracle on the pair inputs."""
    r = interpolation_matrix(config.in_size, config.out_size, "bilinear")
    total = 0.0
    with no_grad():
        for x in pairs.inputs:
            out = upsample(Tensor(x), params, config).data[0]
            total += float(np.mean((out - r @ x[0] @ r.T) ** 2))
    return total / pairs.count


def pretrain(config: UpsamplerConfig, pairs: InterpPairSet, epochs: int, lr: float,
             momentum: float = 0.9, batch_size: int = 16, seed: int = 0,
             params: Optional[Params] = None) -> PretrainResult:
    """
    Fit the upsampler to the pair targets with an L2 (MSE) loss and SGD.

    Args:
        config: upsampler shapes
        pairs: training pairs
        epochs: passes over the pairs (0 returns the initial params)
        lr: learning rate
        momentum: SGD momentum
        batch_size: pairs per update
        seed: seeds initialization and shuffling
        params: start from these params instead of a fresh initialization

    Returns:
        PretrainResult with the trained params and the mean loss of each epoch

    Raises:
        NumericalError: if the loss becomes NaN/Inf
    """
    # imported here: coarse2fine imports this module
    from modules.coarse2fine import sgd_update

    if pairs.count < 1:
        raise ConfigError("pretrain needs a non-empty pair set")
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_upsampler_params(config, rng)
    velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
    epoch_losses: List[float] = []

    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(pairs.count)
        running = 0.0
        batches = range(0, pairs.count, batch_size)
        for start in tqdm(batches, desc=f"upsampler epoch {epoch}/{epochs}", leave=False, disable=not SHOW_PROGRESS):
            idx = order[start:start + batch_size]
            grads = {name: np.zeros_like(p.data) for name, p in params.items()}
            for i in idx:
                loss = mse_loss(upsample(Tensor(pairs.inputs[i]), params, config), pairs.targets[i])
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"Upsampler pretraining diverged at epoch {epoch}")
                running += value
                for name, g in gradients(loss, params).items():
                    grads[name] += g
            for name in grads:
                grads[name] /= len(idx)
            sgd_update(params, grads, velocity, lr, momentum, 0.0)
        epoch_losses.append(running / pairs.count)
        logger.info("upsampler epoch %d/%d: mse %.6f", epoch, epochs, epoch_losses[-1])
    return PretrainResult(params, epoch_losses)
