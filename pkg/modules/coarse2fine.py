"""
Coarse2Fine Module
------------------
Model assembly and training of the two-stage attention classifier.

A coarse pass produces attention maps; one of them, upsampled to image
size, highlights the input image for a fine pass that shares the coarse
backbone. Both classification losses and the center losses on both
feature matrices train everything end to end.
"""
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from config import SHOW_PROGRESS
from modules.attention_centers import CenterBank, center_loss, update_centers
from modules.backbone import (
    BackboneConfig, BackboneOutput, apply_orthogonal_init, forward, init_backbone_params, init_head_params,
)
from modules.bilinear_pooling import BAP_MODES, POOL_KINDS
from modules.deconv_upsampler import UpsamplerConfig, init_upsampler_params, reference_interpolate, upsample
from modules.errors import ConfigError, DatasetInvariantError, DimensionError, NumericalError
from modules.tensor_core import (
    Tensor, get_dtype, gradients, mean, minmax_normalize, no_grad, precision, reshape, scale,
    softmax, softmax_cross_entropy, take,
)

logger = logging.getLogger(__name__)

Params = Dict[str, Tensor]

INFERENCE_MODES = ("coarse", "fine", "average")
MASK_NORMS = ("minmax", "none")
UPSAMPLER_KINDS = ("deconv", "bilinear")


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings and the structural switches of the model.

    Attributes:
        lr: SGD learning rate
        momentum: SGD momentum
        weight_decay: decoupled weight decay added to the velocity
        batch_size: samples per update
        epochs: passes over the training set
        lam: weight of the center (attention) loss
        beta: center moving-average momentum
        seed: seeds initialization, shuffling and attention selection
        pool: BAP pooling kind
        bap_mode: BAP mode
        mask_norm: "minmax" rescales the upsampled mask to [0, 1]
        ortho_init: SVD orthogonal init of the attention weights
        fine_bap: fine head uses BAP (else GAP + dense)
        attention: False builds the no-attention baseline (coarse head only)
        upsampler: "deconv" (learnable) or "bilinear" (fixed)
        freeze_upsampler: keep upsampler params out of the update
        select_per_sample: draw one attention index per sample instead of per batch
        threads: worker threads for the per-sample map
    """
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 40
    lam: float = 1.0
    beta: float = 0.05
    seed: int = 0
    pool: str = "avg"
    bap_mode: str = "per_location"
    mask_norm: str = "minmax"
    ortho_init: bool = True
    fine_bap: bool = True
    attention: bool = True
    upsampler: str = "deconv"
    freeze_upsampler: bool = False
    select_per_sample: bool = False
    threads: int = 4

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if self.batch_size < 1 or self.epochs < 0 or self.threads < 1:
            raise ConfigError("batch_size and threads must be >= 1 and epochs >= 0")
        for name, value, allowed in (("pool", self.pool, POOL_KINDS), ("bap_mode", self.bap_mode, BAP_MODES),
                                     ("mask_norm", self.mask_norm, MASK_NORMS),
                                     ("upsampler", self.upsampler, UPSAMPLER_KINDS)):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")


# ============================================================================
# MODEL
# ============================================================================

@dataclass
class ModelGraph:
    """
    Named parameters, center banks and optimizer state of one model.

    The backbone parameters (``backbone.*``) are stored once and used by both
    the coarse and the fine pass. Heads are ``coarse.*`` and ``fine.*``; the
    learnable upsampler is ``upsampler.*``.
    """
    backbone: BackboneConfig
    upsampler: UpsamplerConfig
    config: TrainConfig
    params: Params
    centers: Dict[str, CenterBank] = field(default_factory=dict)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0

    @classmethod
    def build(cls, backbone: BackboneConfig, config: TrainConfig,
              upsampler: Optional[UpsamplerConfig] = None) -> "ModelGraph":
        """
        Initialize a model from seeds.

        Parameters are drawn in a fixed order (backbone, coarse head,
        upsampler, fine head) from ``config.seed``; orthogonal init draws
        from its own stream, so switching it off changes only the attention
        weights.
        """
        if upsampler is None:
            upsampler = UpsamplerConfig(in_size=backbone.feature_size, out_size=backbone.input_size)
        if upsampler.in_size != backbone.feature_size or upsampler.out_size != backbone.input_size:
            raise ConfigError(f"Upsampler {upsampler.in_size}->{upsampler.out_size} does not fit backbone "
                              f"{backbone.feature_size}->{backbone.input_size}")
        rng = np.random.default_rng(config.seed)
        params = init_backbone_params(backbone, rng)
        params.update(init_head_params(backbone, rng, "coarse", config.bap_mode, use_bap=config.attention))
        if config.attention:
            if config.upsampler == "deconv":
                params.update(init_upsampler_params(upsampler, rng))
            params.update(init_head_params(backbone, rng, "fine", config.bap_mode, use_bap=config.fine_bap))

        centers: Dict[str, CenterBank] = {}
        if config.attention:
            rows, cols = backbone.matrix_shape(config.bap_mode)
            heads = ("coarse", "fine") if config.fine_bap else ("coarse",)
            for head in heads:
                centers[head] = CenterBank(backbone.num_classes, rows, cols, beta=config.beta)
            if config.ortho_init:
                ortho_rng = np.random.default_rng([config.seed, 1])
                for head in heads:
                    apply_orthogonal_init(params, head, ortho_rng)

        model = cls(backbone, upsampler, config, params, centers)
        model.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
        logger.info("Built model: %d tensors, %d parameters, attention=%s",
                    len(params), sum(p.size for p in params.values()), config.attention)
        return model

    @property
    def heads(self) -> tuple:
        return tuple(self.centers)

    def trainable(self) -> Params:
        """Parameters the SGD update touches."""
        if not self.config.freeze_upsampler:
            return self.params
        return {name: p for name, p in self.params.items() if not name.startswith("upsampler.")}

    def load_upsampler(self, arrays: Dict[str, np.ndarray]) -> None:
        """Overwrite ``upsampler.*`` params with pretrained values."""
        names = [name for name in self.params if name.startswith("upsampler.")]
        if not names:
            raise ConfigError("Model has no learnable upsampler to initialize")
        for name in names:
            if name not in arrays:
                raise DimensionError(f"Pretrained upsampler lacks {name}")
            value = np.asarray(arrays[name])
            if value.shape != self.params[name].shape:
                raise DimensionError(f"{name}: pretrained shape {value.shape} vs model {self.params[name].shape}")
            self.params[name].data[...] = value

    def upsample_mask(self, attn: Tensor) -> Tensor:
        """Upsample a [1, H, W] attention map and apply the mask normalization."""
        if self.config.upsampler == "deconv":
            mask = upsample(attn, self.params, self.upsampler)
        else:
            mask = reference_interpolate(attn, "bilinear", self.upsampler.out_size)
        if self.config.mask_norm == "minmax":
            mask = minmax_normalize(mask)
        return mask

    def head_forward(self, image: Tensor, head: str) -> BackboneOutput:
        cfg = self.config
        use_bap = cfg.attention if head == "coarse" else cfg.fine_bap
        return forward(image, self.params, self.backbone, head=head, pool=cfg.pool,
                       bap_mode=cfg.bap_mode, use_bap=use_bap)


# ============================================================================
# TRAINING STEP
# ============================================================================

@dataclass
class StepRecord:
    """Losses and batch accuracies of one update. L == L1 + L2 + lam * L3."""
    iteration: int
    L1: float
    L2: float
    L3: float
    L: float
    k: int
    coarse_accuracy: float
    fine_accuracy: float


@dataclass
class SampleOutput:
    total: Tensor
    l1: Tensor
    l2: Optional[Tensor]
    l3: Optional[Tensor]
    coarse: BackboneOutput
    fine: Optional[BackboneOutput]


def select_attention_indices(rng: np.random.Generator, num_maps: int, count: int,
                             per_sample: bool = False) -> List[int]:
    """One uniform index shared by the batch, or one per sample."""
    if per_sample:
        return [int(k) for k in rng.integers(num_maps, size=count)]
    return [int(rng.integers(num_maps))] * count


def sample_forward(model: ModelGraph, image: np.ndarray, label: int, k: int, lam: float) -> SampleOutput:
    """
    Full forward pass of one sample with attention map ``k`` as the mask.

    Only the selected map is upsampled; the upsampler treats maps
    independently, so this equals upsampling all of them and selecting one.
    """
    x = Tensor(image)
    coarse = model.head_forward(x, "coarse")
    l1 = softmax_cross_entropy(coarse.logits, label)
    if not model.config.attention:
        return SampleOutput(l1, l1, None, None, coarse, None)

    mask = model.upsample_mask(take(coarse.attentions, k))
    highlighted = mask * x
    fine = model.head_forward(highlighted, "fine")
    l2 = softmax_cross_entropy(fine.logits, label)
    l3 = center_loss(coarse.feature_matrix, label, model.centers["coarse"])
    if "fine" in model.centers:
        l3 = l3 + center_loss(fine.feature_matrix, label, model.centers["fine"])
    total = l1 + l2 + scale(l3, lam)
    return SampleOutput(total, l1, l2, l3, coarse, fine)


def pipeline_loss(model: ModelGraph, images: Sequence[np.ndarray], labels: Sequence[int],
                  indices: Sequence[int]) -> Tensor:
    """Batch-mean total loss; the objective train_step differentiates."""
    if len(images) == 0:
        raise DimensionError("pipeline_loss needs at least one sample")
    total = None
    for image, label, k in zip(images, labels, indices):
        out = sample_forward(model, image, int(label), k, model.config.lam).total
        total = out if total is None else total + out
    return scale(total, 1.0 / len(images))


def sgd_update(params: Params, grads: Dict[str, np.ndarray], velocity: Dict[str, np.ndarray],
               lr: float, momentum: float, weight_decay: float) -> None:
    """
    SGD with momentum and decoupled weight decay, in place.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

    Only parameters named in grads are updated.
    """
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            raise DimensionError(f"{name}: grad shape {grad.shape} vs param {param.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(param.data)
        elif v.shape != param.shape:
            raise DimensionError(f"{name}: velocity shape {v.shape} vs param {param.shape}")
        v = momentum * v + grad + weight_decay * param.data
        velocity[name] = v.astype(param.data.dtype)
        param.data -= (lr * velocity[name]).astype(param.data.dtype)


def train_step(batch, model: ModelGraph, config: TrainConfig, rng: np.random.Generator,
               iteration: int = 0) -> StepRecord:
    """
    One update on a batch.

    Coarse pass, random attention selection, upsampled mask times image,
    fine pass, L = L1 + L2 + lam * L3, SGD step, then moving-average center
    updates in sample order. Structural switches (pool, masks, heads) come
    from ``model.config``; ``config`` supplies the optimization settings.

    Args:
        batch: (images [B, C, H, W], labels [B])
        model: model to update in place
        config: optimization settings
        rng: draws the attention index (per batch or per sample)
        iteration: step counter for records and error messages

    Returns:
        StepRecord with batch-mean losses and accuracies

    Raises:
        NumericalError: if a loss is NaN/Inf
    """
    images, labels = batch
    n = len(labels)
    if n == 0:
        raise DimensionError("train_step needs a non-empty batch")
    if model.config.attention:
        indices = select_attention_indices(rng, model.backbone.attention_maps, n, config.select_per_sample)
    else:
        indices = [-1] * n

    trainable = model.trainable()
    dtype_name = np.dtype(get_dtype()).name

    def run_sample(i: int):
        with precision(dtype_name):
            out = sample_forward(model, images[i], int(labels[i]), indices[i], config.lam)
            return out, gradients(out.total, trainable)

    if config.threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as executor:
            results = list(executor.map(run_sample, range(n)))
    else:
        results = [run_sample(i) for i in range(n)]

    l1 = l2 = l3 = 0.0
    coarse_hits = fine_hits = 0
    summed = {name: np.zeros_like(p.data) for name, p in trainable.items()}
    for (out, grads), label in zip(results, labels):
        values = [out.total.item(), out.l1.item()]
        if out.l2 is not None:
            values += [out.l2.item(), out.l3.item()]
        if not all(math.isfinite(v) for v in values):
            raise NumericalError(f"Non-finite loss at iteration {iteration}")
        l1 += values[1]
        coarse_pred = int(np.argmax(out.coarse.logits.data))
        coarse_hits += coarse_pred == label
        if out.fine is not None:
            l2 += values[2]
            l3 += values[3]
            fine_hits += int(np.argmax(out.fine.logits.data)) == label
        else:
            fine_hits += coarse_pred == label
        for name, g in grads.items():
            summed[name] += g

    for name in summed:
        summed[name] /= n
    sgd_update(model.params, summed, model.velocity, config.lr, config.momentum, config.weight_decay)

    for out, label in zip((r[0] for r in results), labels):
        if out.fine is None:
            continue
        update_centers(out.coarse.feature_matrix, int(label), model.centers["coarse"])
        if "fine" in model.centers:
            update_centers(out.fine.feature_matrix, int(label), model.centers["fine"])

    l1, l2, l3 = l1 / n, l2 / n, l3 / n
    record = StepRecord(iteration, l1, l2, l3, l1 + l2 + config.lam * l3, indices[0],
                        coarse_hits / n, fine_hits / n)
    logger.debug("step %d: L1=%.5f L2=%.5f L3=%.5f L=%.5f k=%d", iteration, l1, l2, l3, record.L, record.k)
    return record


# ============================================================================
# INFERENCE
# ============================================================================

@dataclass
class Prediction:
    logits: np.ndarray
    label: int


def predict_all(image: np.ndarray, model: ModelGraph) -> Dict[str, Prediction]:
    """
    Predictions of every inference mode from one coarse pass.

    The fine pass masks the image with the upsampled mean of all attention
    maps. The average mode averages the two heads' softmax probabilities;
    its logits are the log of that average.
    """
    with no_grad():
        x = Tensor(image)
        coarse = model.head_forward(x, "coarse")
        coarse_logits = coarse.logits.data.astype(np.float64)
        if not model.config.attention:
            pred = Prediction(coarse_logits, int(np.argmax(coarse_logits)))
            return {mode: pred for mode in INFERENCE_MODES}
        m, h, w = coarse.attentions.shape
        mean_map = reshape(mean(coarse.attentions, axis=(0,)), (1, h, w))
        fine = model.head_forward(model.upsample_mask(mean_map) * x, "fine")
        fine_logits = fine.logits.data.astype(np.float64)
    probs = (softmax(coarse_logits) + softmax(fine_logits)) / 2.0
    average_logits = np.log(np.maximum(probs, np.finfo(np.float64).tiny))
    return {
        "coarse": Prediction(coarse_logits, int(np.argmax(coarse_logits))),
        "fine": Prediction(fine_logits, int(np.argmax(fine_logits))),
        "average": Prediction(average_logits, int(np.argmax(probs))),
    }


def predict(image: np.ndarray, model: ModelGraph, mode: str = "average") -> Prediction:
    """
    Classify one image.

    Args:
        image: [C, H, W] array with values in [0, 1]
        model: trained model
        mode: "coarse", "fine" or "average"

    Returns:
        Prediction (logits and argmax class)
    """
    if mode not in INFERENCE_MODES:
        raise ConfigError(f"Unknown inference mode: {mode} (expected one of {INFERENCE_MODES})")
    return predict_all(image, model)[mode]


def evaluate(model: ModelGraph, dataset, modes: Sequence[str] = INFERENCE_MODES) -> Dict[str, float]:
    """Accuracy (fraction in [0, 1]) of each inference mode over a dataset."""
    if len(dataset) == 0:
        raise DimensionError("Cannot evaluate on an empty dataset")
    hits = {mode: 0 for mode in modes}
    for image, label in zip(dataset.images, dataset.labels):
        predictions = predict_all(image, model)
        for mode in modes:
            hits[mode] += predictions[mode].label == int(label)
    return {mode: hits[mode] / len(dataset) for mode in modes}


# ============================================================================
# TRAINING LOOP
# ============================================================================

@dataclass
class EpochMetrics:
    """One metrics.csv row."""
    epoch: int
    L1: float
    L2: float
    L3: float
    L: float
    acc_coarse: float
    acc_fine: float
    acc_average: float


@dataclass
class TrainResult:
    model: ModelGraph
    history: List[EpochMetrics]


def backbone_for(dataset, attention_maps: int = 8, widths: Sequence[int] = (8, 16, 32)) -> BackboneConfig:
    """Backbone shapes matching a dataset's images and classes."""
    return BackboneConfig.from_widths(widths, input_channels=dataset.channels, input_size=dataset.image_size,
                                      attention_maps=attention_maps, num_classes=dataset.num_classes)


def train(dataset, config: TrainConfig, model: Optional[ModelGraph] = None, eval_dataset=None,
          on_epoch_end: Optional[Callable[[ModelGraph, EpochMetrics], None]] = None) -> TrainResult:
    """
    Train for ``config.epochs`` epochs of seeded, shuffled mini-batches.

    Epoch e shuffles and selects attention maps with a generator seeded by
    (seed, e), so resuming a model whose ``epoch`` is k and training the
    remaining epochs gives the same result as an uninterrupted run.

    Args:
        dataset: training split (images, labels, num_classes)
        config: training settings
        model: model to continue; built from config when None
        eval_dataset: split scored after every epoch (accuracies are NaN without one)
        on_epoch_end: callback run after every epoch (checkpointing)

    Returns:
        TrainResult with the model and one EpochMetrics per epoch run

    Raises:
        DimensionError: if the dataset is empty
        DatasetInvariantError: if some class has no training sample
    """
    n = len(dataset)
    if n == 0:
        raise DimensionError("Cannot train on an empty dataset")
    if model is None:
        model = ModelGraph.build(backbone_for(dataset), config)
    covered = len(np.unique(dataset.labels))
    if covered < model.backbone.num_classes:
        raise DatasetInvariantError(f"Training set covers {covered} of {model.backbone.num_classes} classes")

    history: List[EpochMetrics] = []
    iteration = model.epoch * math.ceil(n / config.batch_size)
    for epoch in range(model.epoch + 1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        sums = np.zeros(3)
        starts = range(0, n, config.batch_size)
        for start in tqdm(starts, desc=f"epoch {epoch}/{config.epochs}", leave=False, disable=not SHOW_PROGRESS):
            idx = order[start:start + config.batch_size]
            iteration += 1
            record = train_step((dataset.images[idx], dataset.labels[idx]), model, config, rng, iteration)
            sums += np.array([record.L1, record.L2, record.L3]) * len(idx)
        l1, l2, l3 = (float(v) for v in sums / n)
        model.epoch = epoch

        if eval_dataset is not None:
            acc = evaluate(model, eval_dataset)
        else:
            acc = {mode: float("nan") for mode in INFERENCE_MODES}
        metrics = EpochMetrics(epoch, l1, l2, l3, l1 + l2 + config.lam * l3,
                               acc["coarse"], acc["fine"], acc["average"])
        history.append(metrics)
        logger.info("epoch %d/%d: L=%.4f (L1=%.4f L2=%.4f L3=%.4f) acc coarse=%.3f fine=%.3f average=%.3f",
                    epoch, config.epochs, metrics.L, l1, l2, l3,
                    metrics.acc_coarse, metrics.acc_fine, metrics.acc_average)
        if on_epoch_end is not None:
            on_epoch_end(model, metrics)
    return TrainResult(model, history)
