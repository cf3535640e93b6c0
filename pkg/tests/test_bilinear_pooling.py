"""
Tests for bilinear pooling and BAP against nested-loop oracles.
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from modules.bilinear_pooling import bap, bilinear_pool, feature_matrix_shape
from modules.errors import DimensionError
from modules.tensor_core import Tensor, gradient_check, tensor_sum


def oracle_bilinear_pool(f1, f2, pool):
    n, h, w = f1.shape
    out = np.zeros((1, h, w))
    for y in range(h):
        for x in range(w):
            products = [f1[i, y, x] * f2[j, y, x] for i in range(n) for j in range(f2.shape[0])]
            out[0, y, x] = np.mean(products) if pool == "avg" else np.max(products)
    return out


def oracle_bap(features, attentions, pool, mode):
    n, h, w = features.shape
    m = attentions.shape[0]
    reduce = np.mean if pool == "avg" else np.max
    if mode == "per_location":
        out = np.zeros((m, h * w))
        for k in range(m):
            for y in range(h):
                for x in range(w):
                    out[k, y * w + x] = reduce([features[i, y, x] * attentions[k, y, x] for i in range(n)])
        return out
    out = np.zeros((m, n))
    for k in range(m):
        for i in range(n):
            out[k, i] = reduce([features[i, y, x] * attentions[k, y, x] for y in range(h) for x in range(w)])
    return out


def random_instance(rng):
    n, m = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    return rng.normal(size=(n, h, w)), rng.uniform(size=(m, h, w))


class TestBilinearPool:
    def test_all_ones(self):
        out = bilinear_pool(Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 2, 3))))
        assert_allclose(out.data, np.ones((1, 2, 3)))

    @pytest.mark.parametrize("pool", ["avg", "max"])
    def test_matches_oracle(self, float64, rng, pool):
        for _ in range(100):
            f1, f2 = random_instance(rng)
            out = bilinear_pool(Tensor(f1), Tensor(f2), pool)
            assert_allclose(out.data, oracle_bilinear_pool(f1, f2, pool), atol=1e-6)

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            bilinear_pool(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 3, 3))))

    def test_unknown_pool(self):
        with pytest.raises(ValueError):
            bilinear_pool(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 2, 2))), "sum")


class TestBap:
    @pytest.mark.parametrize("pool", ["avg", "max"])
    @pytest.mark.parametrize("mode", ["per_location", "spatial"])
    def test_matches_oracle(self, float64, rng, pool, mode):
        for _ in range(100):
            features, attentions = random_instance(rng)
            out = bap(Tensor(features), Tensor(attentions), pool, mode)
            assert_allclose(out.data, oracle_bap(features, attentions, pool, mode), atol=1e-6)

    def test_avg_factorization(self, float64, rng):
        features, attentions = rng.normal(size=(4, 3, 5)), rng.uniform(size=(3, 3, 5))
        out = bap(Tensor(features), Tensor(attentions))
        expected = (attentions * features.mean(axis=0, keepdims=True)).reshape(3, -1)
        assert_allclose(out.data, expected, atol=1e-6)

    def test_single_uniform_map_equals_channel_mean(self, float64, rng):
        features = rng.normal(size=(3, 4, 4))
        ones = np.ones((1, 4, 4))
        out = bap(Tensor(features), Tensor(ones))
        assert_allclose(out.data[0], features.mean(axis=0).reshape(-1), atol=1e-12)
        assert_allclose(out.data[0], bilinear_pool(Tensor(features), Tensor(ones)).data.reshape(-1), atol=1e-12)

    def test_shapes(self, rng):
        features, attentions = Tensor(rng.normal(size=(6, 4, 4))), Tensor(rng.uniform(size=(2, 4, 4)))
        assert bap(features, attentions, mode="per_location").shape == (2, 16)
        assert bap(features, attentions, mode="spatial").shape == (2, 6)

    def test_feature_matrix_shape(self):
        assert feature_matrix_shape(768, 8, 26, 26) == (8, 676)
        assert feature_matrix_shape(768, 8, 26, 26, "spatial") == (8, 768)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            bap(Tensor(np.ones((2, 2, 2))), Tensor(np.ones((1, 2, 2))), mode="global")

    @pytest.mark.parametrize("pool", ["avg", "max"])
    def test_gradients(self, float64, rng, pool):
        features = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
        attentions = Tensor(rng.uniform(size=(2, 3, 3)), requires_grad=True)
        weights = Tensor(rng.normal(size=(2, 9)))
        report = gradient_check(lambda f, a: tensor_sum(bap(f, a, pool) * weights), [features, attentions])
        assert report.passed, report.worst
