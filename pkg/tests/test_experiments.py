"""
Tests for the seeded ablations and their gates.
"""
import pandas as pd
import pytest

from modules.coarse2fine import TrainConfig
from modules.errors import ConfigError, FormatError
from modules.experiments import (
    MIN_ATTENTION_GAIN, RECORD_COLUMNS, evaluate_gates, read_record, record_results, recorded_value, run_ablation,
)


def medians(rows):
    return pd.DataFrame(rows).set_index("variant")


class TestGates:
    def test_attention_gates_pass(self):
        table = medians([
            {"variant": "attention", "acc_coarse": 70.0, "acc_average": 75.0, "loc_error": 40.0},
            {"variant": "baseline", "acc_coarse": 70.0, "acc_average": 70.0, "loc_error": 60.0},
        ])
        assert evaluate_gates("attention", table) == {
            "average_not_below_coarse": True, "attention_gain": True, "localization_better": True,
        }

    def test_attention_gain_threshold(self):
        table = medians([
            {"variant": "attention", "acc_coarse": 80.0, "acc_average": 70.0 + MIN_ATTENTION_GAIN / 2,
             "loc_error": 50.0},
            {"variant": "baseline", "acc_coarse": 70.0, "acc_average": 70.0, "loc_error": 50.0},
        ])
        gates = evaluate_gates("attention", table)
        assert not gates["attention_gain"]
        assert not gates["average_not_below_coarse"]
        assert not gates["localization_better"]

    def test_ortho_gate(self):
        table = medians([
            {"variant": "ortho", "acc_average": 61.0},
            {"variant": "no_ortho", "acc_average": 61.0},
        ])
        assert evaluate_gates("ortho", table) == {"ortho_not_inferior": True}


class TestRunAblation:
    def test_unknown_kind(self, tiny_splits, tiny_backbone):
        with pytest.raises(ConfigError):
            run_ablation("dropout", tiny_splits.train, tiny_splits.test, tiny_backbone, TrainConfig())

    def test_tiny_attention_run(self, tiny_splits, tiny_backbone, tiny_upsampler, tmp_path):
        report = run_ablation("attention", tiny_splits.train, tiny_splits.test, tiny_backbone,
                              TrainConfig(batch_size=4, epochs=1), upsampler=tiny_upsampler, seeds=[0],
                              out_path=tmp_path / "ablation.csv")
        assert list(report.runs["variant"]) == ["attention", "baseline"]
        assert set(report.gates) == {"average_not_below_coarse", "attention_gain", "localization_better"}
        assert report.runs["acc_average"].between(0.0, 100.0).all()
        saved = pd.read_csv(tmp_path / "ablation.csv")
        assert list(saved.columns) == list(report.runs.columns)
        assert len(saved) == 2


class TestPilotRecord:
    def test_record_replaces_rows_of_the_same_run(self, tmp_path):
        path = tmp_path / "results" / "pilot.csv"
        record_results(path, "upsampler", {"held_out_mse": 0.004})
        record_results(path, "eval.average", {"accuracy": 0.6})
        record_results(path, "upsampler", {"held_out_mse": 0.003, "vs_bilinear": 0.001})
        table = read_record(path)
        assert list(table.columns) == RECORD_COLUMNS
        assert table["run"].tolist() == ["eval.average", "upsampler", "upsampler"]
        assert recorded_value(path, "upsampler", "held_out_mse") == pytest.approx(0.003)
        assert recorded_value(path, "eval.average", "accuracy") == pytest.approx(0.6)

    def test_missing_metric(self, tmp_path):
        path = tmp_path / "pilot.csv"
        record_results(path, "eval.average", {"accuracy": 0.6})
        with pytest.raises(ConfigError):
            recorded_value(path, "eval.coarse", "accuracy")

    def test_wrong_columns(self, tmp_path):
        path = tmp_path / "pilot.csv"
        pd.DataFrame({"name": ["a"], "value": [1.0]}).to_csv(path, index=False)
        with pytest.raises(FormatError):
            read_record(path)
