"""
Verification Module
-------------------
Gradient verification suite: every differentiable operation, and optionally
the full two-stage training loss, is compared against central finite
differences in float64.
"""
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from config import GRADCHECK_INSTANCES, GRADCHECK_MODEL_TOLERANCE, GRADCHECK_OP_TOLERANCE, GRADCHECK_STEP
from modules.attention_centers import CenterBank, center_loss
from modules.backbone import BackboneConfig, StageSpec
from modules.bilinear_pooling import bap, bilinear_pool
from modules.coarse2fine import ModelGraph, TrainConfig, pipeline_loss
from modules.deconv_upsampler import UpsamplerConfig, init_upsampler_params, reference_interpolate, upsample
from modules.tensor_core import (
    GradCheckReport, Tensor, channel_pool, conv2d, conv2d_transpose, dense, elementwise, gradient_check,
    l2_normalize, mean, minmax_normalize, mse_loss, pool2d, precision, reshape, softmax_cross_entropy, take,
    tensor_sum,
)

logger = logging.getLogger(__name__)

OpCase = Tuple[Callable[..., Tensor], List[Tensor]]


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool
    checked: int
    worst: str = ""


def _param(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0, name: str = "") -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, name=name or None)


def _weighted(out: Tensor, rng_weights: np.ndarray) -> Tensor:
    """Scalar readout: sum(out * fixed random weights)."""
    return tensor_sum(elementwise("mul", out, Tensor(rng_weights)))


def _readout(rng: np.random.Generator, fn: Callable[..., Tensor], shape) -> Callable[..., Tensor]:
    weights = rng.normal(size=shape)
    return lambda *ts: _weighted(fn(*ts), weights)


# ============================================================================
# OPERATION CASES
# ============================================================================
# Each builder draws one random instance: (scalar function, input tensors).

def case_add(rng):
    a, b = _param(rng, 2, 3, 3), _param(rng, 2, 3, 3)
    return _readout(rng, lambda x, y: elementwise("add", x, y), (2, 3, 3)), [a, b]


def case_sub(rng):
    a, b = _param(rng, 2, 3, 3), _param(rng, 1, 3, 3)
    return _readout(rng, lambda x, y: elementwise("sub", x, y), (2, 3, 3)), [a, b]


def case_mul_broadcast(rng):
    mask, image = _param(rng, 1, 4, 4), _param(rng, 3, 4, 4)
    return _readout(rng, lambda m, x: elementwise("mul", m, x), (3, 4, 4)), [mask, image]


def case_relu_scale(rng):
    a = _param(rng, 2, 4, 4)
    return _readout(rng, lambda x: elementwise("scale", elementwise("relu", x), 1.7), (2, 4, 4)), [a]


def case_conv2d(rng):
    x, w, b = _param(rng, 2, 5, 5), _param(rng, 3, 2, 3, 3), _param(rng, 3)
    return _readout(rng, lambda x_, w_, b_: conv2d(x_, w_, b_, stride=1, padding=1), (3, 5, 5)), [x, w, b]


def case_conv2d_strided(rng):
    x, w = _param(rng, 2, 6, 6), _param(rng, 2, 2, 2, 2)
    return _readout(rng, lambda x_, w_: conv2d(x_, w_, stride=2), (2, 3, 3)), [x, w]


def case_conv2d_transpose(rng):
    x, w, b = _param(rng, 2, 3, 3), _param(rng, 2, 3, 4, 4), _param(rng, 3)
    return _readout(rng, lambda x_, w_, b_: conv2d_transpose(x_, w_, b_, stride=2, padding=1), (3, 6, 6)), [x, w, b]


def case_pool2d_max(rng):
    x = _param(rng, 2, 4, 4)
    return _readout(rng, lambda x_: pool2d(x_, "max", 2, 2), (2, 2, 2)), [x]


def case_pool2d_avg(rng):
    x = _param(rng, 2, 4, 4)
    return _readout(rng, lambda x_: pool2d(x_, "avg", 2, 2), (2, 2, 2)), [x]


def case_channel_pool(rng):
    x = _param(rng, 3, 3, 3)
    kind = "avg" if rng.uniform() < 0.5 else "max"
    return _readout(rng, lambda x_: channel_pool(x_, kind), (1, 3, 3)), [x]


def case_dense_cross_entropy(rng):
    x, w, b = _param(rng, 6), _param(rng, 4, 6), _param(rng, 4)
    label = int(rng.integers(4))
    return (lambda x_, w_, b_: softmax_cross_entropy(dense(x_, w_, b_), label)), [x, w, b]


def case_mse(rng):
    x = _param(rng, 1, 4, 4)
    target = rng.uniform(size=(1, 4, 4))
    return (lambda x_: mse_loss(x_, target)), [x]


def case_minmax(rng):
    x = _param(rng, 1, 4, 4)
    return _readout(rng, minmax_normalize, (1, 4, 4)), [x]


def case_l2_normalize(rng):
    x = _param(rng, 2, 5)
    return _readout(rng, l2_normalize, (2, 5)), [x]


def case_shape_ops(rng):
    x = _param(rng, 3, 2, 2)
    return (lambda x_: tensor_sum(elementwise("mul", reshape(mean(take(x_, 1), axis=(0,)), (1, 2, 2)),
                                              Tensor(np.arange(4.0).reshape(1, 2, 2))))), [x]


def case_bilinear_pool(rng):
    f1, f2 = _param(rng, 3, 3, 3), _param(rng, 2, 3, 3)
    pool = "avg" if rng.uniform() < 0.5 else "max"
    return _readout(rng, lambda a, b: bilinear_pool(a, b, pool), (1, 3, 3)), [f1, f2]


def case_bap_per_location(rng):
    f, a = _param(rng, 4, 3, 3), _param(rng, 2, 3, 3, low=0.0)
    pool = "avg" if rng.uniform() < 0.5 else "max"
    return _readout(rng, lambda x, y: bap(x, y, pool, "per_location"), (2, 9)), [f, a]


def case_bap_spatial(rng):
    f, a = _param(rng, 4, 3, 3), _param(rng, 2, 3, 3, low=0.0)
    pool = "avg" if rng.uniform() < 0.5 else "max"
    return _readout(rng, lambda x, y: bap(x, y, pool, "spatial"), (2, 4)), [f, a]


def case_center_loss(rng):
    bank = CenterBank(3, 2, 4)
    bank.centers[...] = rng.normal(size=bank.centers.shape)
    feature = _param(rng, 2, 4)
    label = int(rng.integers(3))
    return (lambda f: center_loss(f, label, bank)), [feature]


def case_upsample(rng):
    config = UpsamplerConfig(in_size=2, out_size=8, width=3)
    # uniform weights keep relu inputs away from zero, unlike the bilinear init
    params = {n: _param(rng, *p.shape, name=n) for n, p in init_upsampler_params(config, rng).items()}
    attn = _param(rng, 1, 2, 2, low=0.0)
    names = list(params)
    fn = _readout(rng, lambda a, *ps: upsample(a, dict(zip(names, ps)), config), (1, 8, 8))
    return fn, [attn] + [params[n] for n in names]


def case_reference_interpolate(rng):
    x = _param(rng, 1, 3, 3)
    method = ("bilinear", "cubic", "nearest")[int(rng.integers(3))]
    return _readout(rng, lambda x_: reference_interpolate(x_, method, 6), (1, 6, 6)), [x]


OP_CASES: Dict[str, Callable[[np.random.Generator], OpCase]] = {
    "add": case_add,
    "sub_broadcast": case_sub,
    "mul_broadcast": case_mul_broadcast,
    "relu_scale": case_relu_scale,
    "conv2d": case_conv2d,
    "conv2d_strided": case_conv2d_strided,
    "conv2d_transpose": case_conv2d_transpose,
    "pool2d_max": case_pool2d_max,
    "pool2d_avg": case_pool2d_avg,
    "channel_pool": case_channel_pool,
    "dense_cross_entropy": case_dense_cross_entropy,
    "mse_loss": case_mse,
    "minmax_normalize": case_minmax,
    "l2_normalize": case_l2_normalize,
    "shape_ops": case_shape_ops,
    "bilinear_pool": case_bilinear_pool,
    "bap_per_location": case_bap_per_location,
    "bap_spatial": case_bap_spatial,
    "center_loss": case_center_loss,
    "upsample": case_upsample,
    "reference_interpolate": case_reference_interpolate,
}


# ============================================================================
# FULL MODEL
# ============================================================================

def tiny_model(seed: int = 0, **train_overrides) -> ModelGraph:
    """N=6, M=2, 16x16 RGB, 3 classes; build inside the desired precision."""
    backbone = BackboneConfig(input_channels=3, input_size=16, stages=(StageSpec(4), StageSpec(6)),
                              attention_maps=2, num_classes=3)
    config = TrainConfig(seed=seed, **train_overrides)
    return ModelGraph.build(backbone, config, UpsamplerConfig(in_size=4, out_size=16, width=4))


def check_full_model(seed: int = 0, batch: int = 2, tolerance: float = GRADCHECK_MODEL_TOLERANCE) -> GradCheckReport:
    """Finite-difference check of the batch training loss w.r.t. every parameter."""
    rng = np.random.default_rng(seed)
    with precision("float64"):
        model = tiny_model(seed)
        for bank in model.centers.values():
            bank.centers[...] = rng.normal(0.0, 0.1, size=bank.centers.shape)
        for name, p in model.params.items():
            if name.startswith("upsampler."):
                p.data[...] = rng.uniform(-1.0, 1.0, size=p.shape)
        images = rng.uniform(size=(batch, 3, 16, 16))
        labels = rng.integers(3, size=batch)
        indices = [int(rng.integers(2))] * batch
        names = list(model.params)
        return gradient_check(lambda *ps: pipeline_loss(model, images, labels, indices),
                              [model.params[n] for n in names], step=GRADCHECK_STEP, tolerance=tolerance)


# ============================================================================
# SUITE
# ============================================================================

def check_operation(name: str, instances: int = GRADCHECK_INSTANCES, seed: int = 0,
                    tolerance: float = GRADCHECK_OP_TOLERANCE) -> CheckResult:
    """Run one operation's check on ``instances`` seeded random draws."""
    builder = OP_CASES[name]
    worst, worst_label, checked = 0.0, "", 0
    with precision("float64"):
        for i in range(instances):
            rng = np.random.default_rng([seed, i])
            fn, inputs = builder(rng)
            report = gradient_check(fn, inputs, step=GRADCHECK_STEP, tolerance=tolerance)
            checked += report.checked
            if report.max_rel_err >= worst:
                worst, worst_label = report.max_rel_err, f"instance {i}: {report.worst}"
    return CheckResult(name, worst, worst <= tolerance, checked, worst_label)


def run_suite(full: bool = False, instances: int = GRADCHECK_INSTANCES,
              names: Optional[Sequence[str]] = None) -> Tuple[bool, List[CheckResult]]:
    """
    Run the gradient checks.

    Args:
        full: also check the full training loss (slow)
        instances: random instances per check
        names: subset of operation checks (all when None)

    Returns:
        Tuple of (all_passed, list of CheckResult)
    """
    results: List[CheckResult] = []
    for name in names or list(OP_CASES):
        print(f"  Checking: {name}...")
        result = check_operation(name, instances)
        results.append(result)
        _report(result)

    if full:
        for i in range(instances):
            name = f"full_model[{i}]"
            print(f"  Checking: {name}...")
            report = check_full_model(seed=i)
            result = CheckResult(name, report.max_rel_err, report.passed, report.checked, report.worst)
            results.append(result)
            _report(result)

    all_passed = all(r.passed for r in results)
    logger.info("Gradient suite: %d/%d checks passed", sum(r.passed for r in results), len(results))
    return all_passed, results


def _report(result: CheckResult) -> None:
    msg = f"{result.name}: max rel err {result.max_rel_err:.2e} over {result.checked} elements"
    if result.passed:
        print(f"    ✓ {msg}")
    else:
        print(f"    ✗ {msg} (worst {result.worst})")
