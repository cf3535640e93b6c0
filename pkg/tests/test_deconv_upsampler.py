"""
Tests for the deconv upsampler, the classical interpolators and pretraining.
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from modules.deconv_upsampler import (
    INTERP_METHODS, UpsamplerConfig, bilinear_reference_mse, edge_pad_matrix, evaluate_mse, init_upsampler_params,
    interpolation_matrix, make_pairs, pretrain, random_smooth_map, reference_interpolate, upsample,
    upsampler_baseline_mse,
)
from modules.errors import ConfigError, DimensionError
from modules.tensor_core import Tensor


def linear_1d(signal, out_size):
    """Half-pixel linear resampling by direct coordinate arithmetic."""
    n = len(signal)
    out = np.zeros(out_size)
    for o in range(out_size):
        src = min(max((o + 0.5) * n / out_size - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        out[o] = (1 - frac) * signal[lo] + frac * signal[hi]
    return out


class TestUpsamplerConfig:
    def test_layers(self):
        assert UpsamplerConfig(8, 64).num_layers == 3
        assert UpsamplerConfig(4, 16).num_layers == 2

    def test_factor_must_be_power_of_two(self):
        with pytest.raises(ConfigError):
            UpsamplerConfig(8, 24)
        with pytest.raises(ConfigError):
            UpsamplerConfig(8, 8)

    def test_width(self):
        with pytest.raises(ConfigError):
            UpsamplerConfig(8, 64, width=0)


class TestUpsample:
    def test_shape(self, rng):
        config = UpsamplerConfig(8, 64, width=8)
        params = init_upsampler_params(config, rng)
        assert params["upsampler.layer0.weight"].shape == (1, 8, 4, 4)
        assert params["upsampler.layer2.weight"].shape == (8, 1, 4, 4)
        assert upsample(Tensor(rng.uniform(size=(1, 8, 8))), params, config).shape == (1, 64, 64)

    def test_zero_in_zero_out(self, rng):
        config = UpsamplerConfig(4, 16)
        out = upsample(Tensor(np.zeros((1, 4, 4))), init_upsampler_params(config, rng), config)
        assert_array_equal(out.data, 0.0)

    def test_single_channel_init_is_bilinear(self, float64, rng):
        config = UpsamplerConfig(4, 8, width=1)
        x = rng.uniform(size=(1, 4, 4))
        out = upsample(Tensor(x), init_upsampler_params(config, rng), config)
        assert_allclose(out.data, reference_interpolate(Tensor(x), "bilinear", 8).data, atol=1e-12)

    def test_init_keeps_constant_map(self, rng):
        config = UpsamplerConfig(8, 64)
        out = upsample(Tensor(np.full((1, 8, 8), 0.5)), init_upsampler_params(config, rng), config)
        assert np.abs(out.data - 0.5).max() <= 0.05

    def test_edge_pad_matrix(self):
        assert_array_equal(edge_pad_matrix(3) @ np.array([1.0, 2.0, 3.0]), [1.0, 1.0, 2.0, 3.0, 3.0])

    def test_wrong_input(self, rng, tiny_upsampler):
        params = init_upsampler_params(tiny_upsampler, rng)
        with pytest.raises(DimensionError):
            upsample(Tensor(np.zeros((1, 8, 8))), params, tiny_upsampler)


class TestInterpolation:
    @pytest.mark.parametrize("method", INTERP_METHODS)
    def test_rows_sum_to_one(self, method):
        assert_allclose(interpolation_matrix(5, 12, method).sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("method", INTERP_METHODS)
    def test_constant_is_preserved(self, method):
        out = reference_interpolate(Tensor(np.full((1, 3, 3), 0.7)), method, 12)
        assert_allclose(out.data, 0.7, rtol=1e-5)

    def test_nearest_single_pixel_fill(self):
        out = reference_interpolate(Tensor(np.array([[[2.0]]])), "nearest", 5)
        assert_allclose(out.data, np.full((1, 5, 5), 2.0))

    @pytest.mark.parametrize("fill", [None, 0.3])
    def test_nearest_round_trip(self, rng, fill):
        x = rng.uniform(size=(1, 4, 4)) if fill is None else np.full((1, 4, 4), fill)
        up = reference_interpolate(Tensor(x), "nearest", 8).data
        down = up[:, ::2, ::2]
        assert_allclose(down, x, rtol=1e-6)
        assert_array_equal(reference_interpolate(Tensor(down), "nearest", 8).data, up)

    def test_bilinear_midpoint(self):
        assert_allclose(interpolation_matrix(2, 3, "bilinear") @ np.array([0.0, 1.0]), [0.0, 0.5, 1.0])

    def test_bilinear_separable_oracle(self, float64, rng):
        x = rng.uniform(size=(4, 4))
        rows = np.stack([linear_1d(row, 8) for row in x])
        expected = np.stack([linear_1d(col, 8) for col in rows.T]).T
        out = reference_interpolate(Tensor(x[None]), "bilinear", 8)
        assert_allclose(out.data[0], expected, atol=1e-6)

    def test_cubic_reproduces_interior_linear_ramp(self):
        r = interpolation_matrix(8, 16, "cubic")
        ramp = np.arange(8.0)
        out = r @ ramp
        # away from the clamped borders Catmull-Rom reproduces linear signals
        assert_allclose(out[4:12], (np.arange(4, 12) + 0.5) / 2 - 0.5, atol=1e-12)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            interpolation_matrix(2, 4, "lanczos")


class TestPairs:
    def test_smooth_map_range(self, rng):
        m = random_smooth_map(rng, 8)
        assert m.shape == (8, 8)
        assert m.min() >= 0.0 and m.max() <= 1.0

    def test_make_pairs(self, rng, tiny_upsampler):
        pairs = make_pairs(tiny_upsampler, 10, rng)
        assert pairs.inputs.shape == (10, 1, 4, 4)
        assert pairs.targets.shape == (10, 1, 16, 16)
        assert set(pairs.methods) <= set(INTERP_METHODS)
        r = interpolation_matrix(4, 16, pairs.methods[0])
        assert_allclose(pairs.targets[0, 0], r @ pairs.inputs[0, 0] @ r.T, atol=1e-6)

    def test_split(self, rng, tiny_upsampler):
        train, held_out = make_pairs(tiny_upsampler, 10, rng).split(3)
        assert train.count == 7 and held_out.count == 3
        with pytest.raises(ConfigError):
            make_pairs(tiny_upsampler, 4, rng).split(4)

    def test_baseline_positive(self, rng, tiny_upsampler):
        assert upsampler_baseline_mse(make_pairs(tiny_upsampler, 5, rng), 16) > 0.0


class TestPretrain:
    def test_zero_epochs_keeps_init(self, rng, tiny_upsampler):
        pairs = make_pairs(tiny_upsampler, 4, rng)
        reference = init_upsampler_params(tiny_upsampler, np.random.default_rng(5))
        result = pretrain(tiny_upsampler, pairs, epochs=0, lr=0.01, seed=5)
        assert result.epoch_losses == []
        for name, p in reference.items():
            assert_array_equal(result.params[name].data, p.data)

    def test_loss_decreases(self, tiny_upsampler):
        pairs = make_pairs(tiny_upsampler, 32, np.random.default_rng(0))
        start = init_upsampler_params(tiny_upsampler, np.random.default_rng(1))
        noise = np.random.default_rng(2)
        for p in start.values():
            p.data += noise.normal(0.0, 0.2, size=p.shape).astype(p.data.dtype)
        result = pretrain(tiny_upsampler, pairs, epochs=6, lr=0.01, batch_size=8, seed=1, params=start)
        assert len(result.epoch_losses) == 6
        assert result.epoch_losses[-1] < result.epoch_losses[0]
        assert evaluate_mse(result.params, tiny_upsampler, pairs) < result.epoch_losses[0]

    def test_pretrained_beats_nearest_baseline(self):
        config = UpsamplerConfig(8, 32, width=4)
        train_pairs, held_out = make_pairs(config, 60, np.random.default_rng(0)).split(12)
        result = pretrain(config, train_pairs, epochs=2, lr=0.01, batch_size=8, seed=11)
        assert evaluate_mse(result.params, config, held_out) <= 0.01
        assert bilinear_reference_mse(result.params, config, held_out) < upsampler_baseline_mse(held_out, 32)
        constant = upsample(Tensor(np.full((1, 8, 8), 0.5)), result.params, config).data
        assert np.abs(constant - 0.5).max() <= 0.05

    def test_deterministic(self, tiny_upsampler):
        pairs = make_pairs(tiny_upsampler, 8, np.random.default_rng(0))
        a = pretrain(tiny_upsampler, pairs, epochs=2, lr=0.01, batch_size=4, seed=3)
        b = pretrain(tiny_upsampler, pairs, epochs=2, lr=0.01, batch_size=4, seed=3)
        assert a.epoch_losses == b.epoch_losses
        for name in a.params:
            assert_array_equal(a.params[name].data, b.params[name].data)
