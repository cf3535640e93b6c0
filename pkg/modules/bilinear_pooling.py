"""
Bilinear Pooling Module
-----------------------
Bilinear pooling of two feature streams and Bilinear Attention Pooling (BAP)
of feature maps with attention maps.

A feature matrix is an [M, L] tensor whose row m holds the features pooled
under attention map m. In the default ``per_location`` mode L = H*W (pooling
runs across the N feature channels at every location); in ``spatial`` mode
L = N (pooling runs across locations for every channel).
"""
import sys
from pathlib import Path

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from modules.errors import DimensionError
from modules.tensor_core import Function, Tensor

FeatureMatrix = Tensor

POOL_KINDS = ("avg", "max")
BAP_MODES = ("per_location", "spatial")


def _check_pair(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"{what}: expected [C, H, W] inputs, got {a.shape} and {b.shape}")
    if a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"{what}: spatial mismatch {a.shape[1:]} vs {b.shape[1:]}")


def _check_pool(pool: str) -> None:
    if pool not in POOL_KINDS:
        raise ValueError(f"Unknown pool kind: {pool} (expected one of {POOL_KINDS})")


class BilinearPool(Function):
    """out[h, w] = pool over (n, m) of f1[n, h, w] * f2[m, h, w]."""

    def forward(self, f1, f2, pool: str = "avg"):
        _check_pair(f1, f2, "bilinear_pool")
        _check_pool(pool)
        self.pool = pool
        if pool == "avg":
            self.mean1 = f1.mean(axis=0, keepdims=True)
            self.mean2 = f2.mean(axis=0, keepdims=True)
            return self.mean1 * self.mean2
        products = (f1[:, None] * f2[None, :]).reshape(-1, *f1.shape[1:])
        self.argmax = products.argmax(axis=0)
        return np.take_along_axis(products, self.argmax[None], axis=0)

    def backward(self, grad):
        f1, f2 = self.inputs[0].data, self.inputs[1].data
        n, m = f1.shape[0], f2.shape[0]
        if self.pool == "avg":
            grad1 = np.broadcast_to(grad * self.mean2 / n, f1.shape).copy()
            grad2 = np.broadcast_to(grad * self.mean1 / m, f2.shape).copy()
            return grad1, grad2
        g = grad[0]
        idx1, idx2 = np.divmod(self.argmax, m)
        picked1 = np.take_along_axis(f1, idx1[None], axis=0)[0]
        picked2 = np.take_along_axis(f2, idx2[None], axis=0)[0]
        grad1 = np.zeros_like(f1)
        grad2 = np.zeros_like(f2)
        np.put_along_axis(grad1, idx1[None], (g * picked2)[None], axis=0)
        np.put_along_axis(grad2, idx2[None], (g * picked1)[None], axis=0)
        return grad1, grad2


class BilinearAttentionPool(Function):
    """Pools features under each attention map; see ``bap``."""

    def forward(self, features, attentions, pool: str = "avg", mode: str = "per_location"):
        _check_pair(features, attentions, "bap")
        _check_pool(pool)
        if mode not in BAP_MODES:
            raise ValueError(f"Unknown bap mode: {mode} (expected one of {BAP_MODES})")
        if attentions.shape[0] < 1:
            raise DimensionError("bap needs at least one attention map")
        self.pool, self.mode = pool, mode
        n, h, w = features.shape
        m = attentions.shape[0]
        if mode == "per_location":
            if pool == "avg":
                self.channel_mean = features.mean(axis=0, keepdims=True)
                out = attentions * self.channel_mean
            else:
                products = attentions[:, None] * features[None, :]
                self.argmax = products.argmax(axis=1)
                out = np.take_along_axis(products, self.argmax[:, None], axis=1)[:, 0]
            return out.reshape(m, h * w)

        f_flat = features.reshape(n, h * w)
        a_flat = attentions.reshape(m, h * w)
        if pool == "avg":
            return a_flat @ f_flat.T / (h * w)
        products = a_flat[:, None, :] * f_flat[None, :, :]
        self.argmax = products.argmax(axis=2)
        return np.take_along_axis(products, self.argmax[..., None], axis=2)[..., 0]

    def backward(self, grad):
        features, attentions = self.inputs[0].data, self.inputs[1].data
        n, h, w = features.shape
        m = attentions.shape[0]
        if self.mode == "per_location":
            g = grad.reshape(m, h, w)
            if self.pool == "avg":
                grad_a = g * self.channel_mean
                grad_f = np.broadcast_to((g * attentions).sum(axis=0, keepdims=True) / n, features.shape).copy()
                return grad_f, grad_a
            picked = np.take_along_axis(np.broadcast_to(features[None], (m, n, h, w)), self.argmax[:, None], axis=1)[:, 0]
            grad_a = g * picked
            one_hot = self.argmax[:, None] == np.arange(n)[None, :, None, None]
            grad_f = (one_hot * (g * attentions)[:, None]).sum(axis=0)
            return grad_f, grad_a

        f_flat = features.reshape(n, h * w)
        a_flat = attentions.reshape(m, h * w)
        if self.pool == "avg":
            grad_a = grad @ f_flat / (h * w)
            grad_f = grad.T @ a_flat / (h * w)
            return grad_f.reshape(features.shape), grad_a.reshape(attentions.shape)
        grad_a = np.zeros_like(a_flat)
        grad_f = np.zeros_like(f_flat)
        rows_m, rows_n = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
        np.add.at(grad_a, (rows_m, self.argmax), grad * f_flat[rows_n, self.argmax])
        np.add.at(grad_f, (rows_n, self.argmax), grad * a_flat[rows_m, self.argmax])
        return grad_f.reshape(features.shape), grad_a.reshape(attentions.shape)


def bilinear_pool(f1: Tensor, f2: Tensor, pool: str = "avg") -> Tensor:
    """
    Bilinear pooling at each spatial location.

    Every channel of f1 is multiplied with every channel of f2 and the N*M
    products are pooled per location.

    Args:
        f1: [N, H, W]
        f2: [M, H, W]
        pool: "avg" or "max"

    Returns:
        [1, H, W] pooled map

    Raises:
        DimensionError: if spatial sizes differ
    """
    return BilinearPool.apply(f1, f2, pool=pool)


def bap(features: Tensor, attentions: Tensor, pool: str = "avg", mode: str = "per_location") -> FeatureMatrix:
    """
    Bilinear Attention Pooling.

    per_location: out[m, h, w] = pool_n(features[n, h, w] * attentions[m, h, w]),
    flattened row-major per map to [M, H*W].
    spatial: out[m, n] = pool_(h, w)(features[n, h, w] * attentions[m, h, w]) -> [M, N].

    Args:
        features: [N, H, W] feature maps
        attentions: [M, H, W] attention maps
        pool: "avg" (default) or "max"
        mode: "per_location" (default) or "spatial"

    Returns:
        Feature matrix tensor, differentiable w.r.t. both inputs
    """
    return BilinearAttentionPool.apply(features, attentions, pool=pool, mode=mode)


def feature_matrix_shape(feature_channels: int, attention_maps: int, height: int, width: int,
                         mode: str = "per_location") -> tuple:
    """Shape of the matrix ``bap`` returns for the given dims."""
    if mode == "per_location":
        return attention_maps, height * width
    return attention_maps, feature_channels
