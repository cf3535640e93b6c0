"""
Tests for model assembly, the training step, SGD, inference and the
training loop.
"""
import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from modules.backbone import BackboneConfig, StageSpec
from modules.coarse2fine import (
    INFERENCE_MODES, ModelGraph, TrainConfig, backbone_for, evaluate, pipeline_loss, predict, predict_all,
    sample_forward, select_attention_indices, sgd_update, train, train_step,
)
from modules.data_synth import Dataset
from modules.errors import ConfigError, DatasetInvariantError, DimensionError
from modules.deconv_upsampler import UpsamplerConfig
from modules.tensor_core import Tensor, softmax


@pytest.fixture
def build(tiny_backbone, tiny_upsampler):
    def _build(**overrides):
        return ModelGraph.build(tiny_backbone, TrainConfig(batch_size=4, epochs=1, **overrides), tiny_upsampler)
    return _build


def snapshot(model):
    return {name: p.data.copy() for name, p in model.params.items()}


def batch_of(dataset, count=4):
    return dataset.images[:count], dataset.labels[:count]


def located_dataset(per_class=8, seed=0):
    """Three 16x16 classes: a bright square in a class-specific corner, tinted toward one channel."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), per_class).astype(np.uint32)
    images = 0.5 + rng.normal(0.0, 0.05, size=(len(labels), 3, 16, 16))
    corners = [(2, 2), (2, 9), (9, 5)]
    for i, label in enumerate(labels):
        y, x = corners[label]
        images[i, :, y:y + 5, x:x + 5] += 0.3
        images[i, label] += 0.1
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels, 3)


# =============================================================================
# Configuration and assembly
# =============================================================================

class TestTrainConfig:
    def test_defaults_valid(self):
        config = TrainConfig()
        assert config.lam == 1.0 and config.threads == 4

    @pytest.mark.parametrize("overrides", [
        {"lr": 0.0}, {"momentum": 1.0}, {"beta": 0.0}, {"lam": -1.0}, {"pool": "sum"},
        {"bap_mode": "global"}, {"upsampler": "cubic"}, {"threads": 0},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides)


class TestModelGraph:
    def test_backbone_stored_once(self, build):
        model = build()
        backbone_names = [n for n in model.params if ".stage" in n]
        assert all(n.startswith("backbone.") for n in backbone_names)
        assert len(backbone_names) == 4
        assert {n.split(".")[0] for n in model.params} == {"backbone", "coarse", "fine", "upsampler"}

    def test_center_banks(self, build, tiny_backbone):
        model = build()
        assert model.heads == ("coarse", "fine")
        assert model.centers["coarse"].matrix_shape == tiny_backbone.matrix_shape()
        assert build(fine_bap=False).heads == ("coarse",)

    def test_baseline_has_single_head(self, build):
        model = build(attention=False)
        assert model.heads == ()
        assert {n.split(".")[0] for n in model.params} == {"backbone", "coarse"}
        assert "coarse.attention.weight" not in model.params

    def test_bilinear_upsampler_has_no_params(self, build):
        assert not any(n.startswith("upsampler.") for n in build(upsampler="bilinear").params)

    def test_orthogonal_attention(self, build):
        model = build()
        for head in ("coarse", "fine"):
            w = model.params[f"{head}.attention.weight"].data.reshape(2, 6)
            assert_allclose(w @ w.T, np.eye(2), atol=1e-5)

    def test_ortho_switch_changes_only_attention(self, build):
        with_init, without = snapshot(build(ortho_init=True)), snapshot(build(ortho_init=False))
        assert with_init.keys() == without.keys()
        for name in with_init:
            if name.endswith("attention.weight"):
                assert not np.array_equal(with_init[name], without[name])
            else:
                assert_array_equal(with_init[name], without[name])

    def test_seeded_build(self, build):
        a, b = snapshot(build(seed=4)), snapshot(build(seed=4))
        for name in a:
            assert_array_equal(a[name], b[name])

    def test_upsampler_must_fit(self, tiny_backbone):
        with pytest.raises(ConfigError):
            ModelGraph.build(tiny_backbone, TrainConfig(), UpsamplerConfig(8, 64))

    def test_trainable_excludes_frozen_upsampler(self, build):
        names = build(freeze_upsampler=True).trainable()
        assert names and not any(n.startswith("upsampler.") for n in names)
        assert any(n.startswith("upsampler.") for n in build().trainable())

    def test_load_upsampler(self, build, rng):
        model = build()
        arrays = {n: rng.normal(size=p.shape) for n, p in model.params.items() if n.startswith("upsampler.")}
        model.load_upsampler(arrays)
        for name, value in arrays.items():
            assert_allclose(model.params[name].data, value, rtol=1e-6)

    def test_load_upsampler_shape_mismatch(self, build):
        model = build()
        with pytest.raises(DimensionError):
            model.load_upsampler({n: np.zeros((1,)) for n in model.params if n.startswith("upsampler.")})

    def test_load_upsampler_without_deconv(self, build):
        with pytest.raises(ConfigError):
            build(upsampler="bilinear").load_upsampler({})

    def test_mask_is_normalized(self, build, rng):
        mask = build().upsample_mask(Tensor(rng.uniform(size=(1, 4, 4))))
        assert mask.shape == (1, 16, 16)
        assert mask.data.min() >= 0.0 and mask.data.max() <= 1.0


# =============================================================================
# Forward pass and attention selection
# =============================================================================

class TestAttentionSelection:
    def test_shared_index(self, rng):
        indices = select_attention_indices(rng, 8, 5)
        assert len(set(indices)) == 1 and len(indices) == 5

    def test_per_sample(self, rng):
        indices = select_attention_indices(rng, 8, 50, per_sample=True)
        assert len(indices) == 50 and len(set(indices)) > 1

    def test_uniform(self, rng):
        draws = select_attention_indices(rng, 8, 100_000, per_sample=True)
        counts = np.bincount(draws, minlength=8)
        assert np.all(np.abs(counts - 12_500) < 0.05 * 12_500)


class TestSampleForward:
    def test_zero_lambda_total(self, float64, build, tiny_splits):
        model = build(lam=0.0)
        image, label = tiny_splits.train.images[0], int(tiny_splits.train.labels[0])
        out = sample_forward(model, image, label, 1, 0.0)
        assert out.total.item() == out.l1.item() + out.l2.item()
        assert out.l3.item() > 0.0

    def test_total_combines_losses(self, float64, build, tiny_splits):
        model = build()
        out = sample_forward(model, tiny_splits.train.images[1], int(tiny_splits.train.labels[1]), 0, 0.5)
        assert_allclose(out.total.item(), out.l1.item() + out.l2.item() + 0.5 * out.l3.item(), rtol=1e-12)

    def test_baseline_returns_coarse_loss(self, build, tiny_splits):
        out = sample_forward(build(attention=False), tiny_splits.train.images[0], 0, -1, 1.0)
        assert out.l2 is None and out.fine is None
        assert out.total is out.l1

    def test_pipeline_loss_is_batch_mean(self, float64, build, tiny_splits):
        model = build()
        images, labels = batch_of(tiny_splits.train, 2)
        totals = [sample_forward(model, images[i], int(labels[i]), 1, model.config.lam).total.item()
                  for i in range(2)]
        assert_allclose(pipeline_loss(model, images, labels, [1, 1]).item(), np.mean(totals), rtol=1e-12)


# =============================================================================
# Optimizer
# =============================================================================

class TestSgd:
    def test_single_step(self):
        params = {"w": Tensor([1.0, -2.0])}
        velocity = {}
        sgd_update(params, {"w": np.array([0.5, 0.5], dtype=np.float32)}, velocity, lr=0.1, momentum=0.9,
                   weight_decay=0.1)
        assert_allclose(params["w"].data, [1.0 - 0.1 * (0.5 + 0.1), -2.0 - 0.1 * (0.5 - 0.2)], rtol=1e-6)

    def test_momentum_displacement(self, float64):
        lr, m, g = 0.1, 0.9, np.array([1.0, -3.0])
        params = {"w": Tensor([0.0, 0.0])}
        velocity = {"w": np.zeros(2)}
        for _ in range(2):
            sgd_update(params, {"w": g}, velocity, lr, m, 0.0)
        assert_allclose(params["w"].data, -lr * g * (2 + m), rtol=1e-12)

    def test_only_named_params_move(self):
        params = {"a": Tensor([1.0]), "b": Tensor([1.0])}
        sgd_update(params, {"a": np.ones(1, dtype=np.float32)}, {}, 0.5, 0.0, 0.0)
        assert params["a"].data[0] == 0.5 and params["b"].data[0] == 1.0


# =============================================================================
# Training step
# =============================================================================

class TestTrainStep:
    def test_record_bookkeeping(self, build, tiny_splits):
        model = build()
        before = snapshot(model)
        record = train_step(batch_of(tiny_splits.train), model, model.config, np.random.default_rng(0), 1)
        assert record.iteration == 1
        assert 0 <= record.k < 2
        assert math.isclose(record.L, record.L1 + record.L2 + model.config.lam * record.L3, rel_tol=1e-12)
        assert 0.0 <= record.coarse_accuracy <= 1.0
        assert any(not np.array_equal(before[n], p.data) for n, p in model.params.items())

    def test_centers_update(self, build, tiny_splits):
        model = build(lam=0.0)
        train_step(batch_of(tiny_splits.train), model, model.config, np.random.default_rng(0))
        for bank in model.centers.values():
            assert np.any(bank.centers != 0.0)

    def test_frozen_upsampler(self, build, tiny_splits):
        model = build(freeze_upsampler=True)
        before = snapshot(model)
        train_step(batch_of(tiny_splits.train), model, model.config, np.random.default_rng(0))
        for name, p in model.params.items():
            if name.startswith("upsampler."):
                assert_array_equal(p.data, before[name])
        assert not np.array_equal(model.params["backbone.stage0.weight"].data, before["backbone.stage0.weight"])

    def test_baseline_step(self, build, tiny_splits):
        model = build(attention=False)
        record = train_step(batch_of(tiny_splits.train), model, model.config, np.random.default_rng(0))
        assert record.L2 == 0.0 and record.L3 == 0.0
        assert record.L == record.L1

    def test_deterministic(self, build, tiny_splits):
        a, b = build(), build()
        for model in (a, b):
            train_step(batch_of(tiny_splits.train), model, model.config, np.random.default_rng(9))
        for name in a.params:
            assert_array_equal(a.params[name].data, b.params[name].data)

    def test_threads_match_serial(self, build, tiny_splits):
        serial, threaded = build(threads=1), build(threads=2)
        for model in (serial, threaded):
            train_step(batch_of(tiny_splits.train), model, model.config, np.random.default_rng(9))
        for name in serial.params:
            assert_allclose(threaded.params[name].data, serial.params[name].data, rtol=1e-5, atol=1e-7)

    def test_empty_batch(self, build):
        model = build()
        with pytest.raises(DimensionError):
            train_step((np.zeros((0, 3, 16, 16)), np.zeros(0, dtype=np.uint32)), model, model.config,
                       np.random.default_rng(0))


# =============================================================================
# Inference
# =============================================================================

class TestInference:
    def test_all_modes(self, build, tiny_splits):
        predictions = predict_all(tiny_splits.test.images[0], build())
        assert set(predictions) == set(INFERENCE_MODES)
        for pred in predictions.values():
            assert pred.logits.shape == (3,)
            assert 0 <= pred.label < 3

    def test_average_is_mean_probability(self, build, tiny_splits):
        predictions = predict_all(tiny_splits.test.images[1], build())
        probs = (softmax(predictions["coarse"].logits) + softmax(predictions["fine"].logits)) / 2
        assert_allclose(np.exp(predictions["average"].logits), probs, rtol=1e-10)
        assert predictions["average"].label == int(np.argmax(probs))

    def test_baseline_modes_agree(self, build, tiny_splits):
        predictions = predict_all(tiny_splits.test.images[0], build(attention=False))
        assert predictions["coarse"].label == predictions["fine"].label == predictions["average"].label

    def test_predict_does_not_touch_params(self, build, tiny_splits):
        model = build()
        before = snapshot(model)
        predict(tiny_splits.test.images[0], model, "fine")
        for name, p in model.params.items():
            assert_array_equal(p.data, before[name])

    def test_unknown_mode(self, build, tiny_splits):
        with pytest.raises(ConfigError):
            predict(tiny_splits.test.images[0], build(), "ensemble")

    def test_single_map_fine_matches_training_pass(self, float64, tiny_upsampler, tiny_splits):
        backbone = BackboneConfig(input_channels=3, input_size=16, stages=(StageSpec(4), StageSpec(6)),
                                  attention_maps=1, num_classes=3)
        model = ModelGraph.build(backbone, TrainConfig(batch_size=4, epochs=1), tiny_upsampler)
        image, label = tiny_splits.test.images[0], int(tiny_splits.test.labels[0])
        inferred = predict_all(image, model)["fine"].logits
        trained = sample_forward(model, image, label, 0, model.config.lam).fine.logits.data
        assert_allclose(inferred, trained, rtol=1e-12)

    def test_evaluate_fractions(self, build, tiny_splits):
        accuracy = evaluate(build(), tiny_splits.test)
        assert set(accuracy) == set(INFERENCE_MODES)
        assert all(0.0 <= v <= 1.0 for v in accuracy.values())


# =============================================================================
# Training loop
# =============================================================================

class TestTrain:
    def test_zero_epochs_keeps_init(self, build, tiny_splits):
        model = build()
        before = snapshot(model)
        result = train(tiny_splits.train, replace(model.config, epochs=0), model=model)
        assert result.history == []
        for name, p in model.params.items():
            assert_array_equal(p.data, before[name])

    @pytest.mark.parametrize("lam", [0.0, 1.0])
    def test_metrics_bookkeeping(self, build, tiny_splits, lam):
        model = build(lam=lam)
        result = train(tiny_splits.train, replace(model.config, epochs=2), model=model, eval_dataset=tiny_splits.test)
        assert [m.epoch for m in result.history] == [1, 2]
        for m in result.history:
            assert abs(m.L - (m.L1 + m.L2 + lam * m.L3)) <= 1e-5
            assert 0.0 <= m.acc_average <= 1.0
        assert model.epoch == 2

    def test_no_eval_set_gives_nan(self, build, tiny_splits):
        model = build()
        result = train(tiny_splits.train, model.config, model=model)
        assert math.isnan(result.history[0].acc_coarse)

    def test_resume_matches_straight_run(self, build, tiny_splits):
        straight = build()
        train(tiny_splits.train, replace(straight.config, epochs=2), model=straight)

        resumed = build()
        train(tiny_splits.train, replace(resumed.config, epochs=1), model=resumed)
        assert resumed.epoch == 1
        train(tiny_splits.train, replace(resumed.config, epochs=2), model=resumed)

        for name in straight.params:
            assert_array_equal(resumed.params[name].data, straight.params[name].data)
        for head in straight.heads:
            assert_array_equal(resumed.centers[head].centers, straight.centers[head].centers)

    def test_callback(self, build, tiny_splits):
        seen = []
        model = build()
        train(tiny_splits.train, model.config, model=model, on_epoch_end=lambda m, metrics: seen.append(metrics.epoch))
        assert seen == [1]

    def test_backbone_for(self, tiny_splits):
        config = backbone_for(tiny_splits.train, attention_maps=2, widths=(4, 6))
        assert config.input_size == 16 and config.num_classes == 3 and config.feature_channels == 6

    def test_missing_class_rejected(self, build, tiny_splits):
        keep = np.flatnonzero(tiny_splits.train.labels != 2)
        model = build()
        with pytest.raises(DatasetInvariantError):
            train(tiny_splits.train.subset(keep), model.config, model=model)

    def test_loss_falls_over_ten_epochs(self, build, tiny_splits):
        model = build()
        result = train(tiny_splits.train, replace(model.config, epochs=10), model=model)
        assert result.history[9].L < result.history[0].L


class TestLearning:
    def test_tiny_run_beats_chance(self, tiny_backbone, tiny_upsampler):
        data = located_dataset()
        model = ModelGraph.build(tiny_backbone, TrainConfig(batch_size=4, epochs=12), tiny_upsampler)
        result = train(data, model.config, model=model)
        assert result.history[-1].L1 < result.history[0].L1
        assert evaluate(model, data, modes=("coarse",))["coarse"] > 0.5

        outputs = [model.head_forward(Tensor(image), "coarse") for image in data.images]
        assert max(out.attentions.data.max() for out in outputs) > 0.0
        assert_allclose(np.linalg.norm(outputs[0].feature_matrix.data), 1.0, rtol=1e-3)

    def test_center_loss_cannot_shrink_feature_matrix(self, build, tiny_splits):
        model = build()
        train(tiny_splits.train, replace(model.config, epochs=3), model=model)
        for image in tiny_splits.train.images:
            matrix = model.head_forward(Tensor(image), "coarse").feature_matrix.data
            assert np.linalg.norm(matrix) == pytest.approx(1.0, rel=1e-3) or not matrix.any()
