"""
Experiments Module
------------------
Seeded ablations on the synthetic task:

- ``attention``: the full attention model against the no-attention baseline
  (same backbone, global average pooling + dense head, same budget).
- ``ortho``: orthogonal attention initialization on and off.

Each run trains one model per (variant, seed), scores every inference mode
and the localization error on the test split, and checks the directional
gates.

The pilot record (``results/pilot.csv``) holds the reference numbers of
pinned-seed runs as run/metric/value rows; ``eval --expect`` checks a run
against it.
"""
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from modules.backbone import BackboneConfig
from modules.coarse2fine import ModelGraph, TrainConfig, evaluate, train
from modules.deconv_upsampler import UpsamplerConfig
from modules.errors import ConfigError, FormatError
from modules.localization import localization_error

logger = logging.getLogger(__name__)

ABLATION_KINDS = {
    # kind: (variant name -> TrainConfig overrides, default seed count)
    "attention": ({"attention": {"attention": True}, "baseline": {"attention": False}}, 3),
    "ortho": ({"ortho": {"ortho_init": True}, "no_ortho": {"ortho_init": False}}, 5),
}
MIN_ATTENTION_GAIN = 2.0


@dataclass
class AblationReport:
    """
    Attributes:
        kind: "attention" or "ortho"
        runs: one row per (variant, seed) with accuracies in percent and localization error
        medians: per-variant medians of the numeric columns
        gates: gate name -> passed
    """
    kind: str
    runs: pd.DataFrame
    medians: pd.DataFrame
    gates: Dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.gates.values())


def _median(medians: pd.DataFrame, variant: str, column: str) -> float:
    return float(medians.loc[variant, column])


def evaluate_gates(kind: str, medians: pd.DataFrame) -> Dict[str, bool]:
    """Directional checks on the per-variant medians."""
    if kind == "attention":
        return {
            "average_not_below_coarse":
                _median(medians, "attention", "acc_average") >= _median(medians, "attention", "acc_coarse"),
            "attention_gain":
                _median(medians, "attention", "acc_average") - _median(medians, "baseline", "acc_average")
                >= MIN_ATTENTION_GAIN,
            "localization_better":
                _median(medians, "attention", "loc_error") < _median(medians, "baseline", "loc_error"),
        }
    return {
        "ortho_not_inferior": _median(medians, "ortho", "acc_average") >= _median(medians, "no_ortho", "acc_average"),
    }


def run_ablation(kind: str, train_set, test_set, backbone: BackboneConfig, base_config: TrainConfig,
                 upsampler: Optional[UpsamplerConfig] = None, seeds: Optional[Sequence[int]] = None,
                 upsampler_init: Optional[Dict[str, np.ndarray]] = None, threshold: float = 0.5,
                 out_path=None) -> AblationReport:
    """
    Train every (variant, seed) pair and summarize.

    Args:
        kind: "attention" or "ortho"
        train_set: training split
        test_set: test split with ground-truth boxes
        backbone: shared backbone shapes
        base_config: settings common to all runs (its seed is replaced per run)
        upsampler: upsampler shapes (derived from the backbone when None)
        seeds: training seeds (3 for attention, 5 for ortho when None)
        upsampler_init: pretrained upsampler weights for attention models
        threshold: localization mask threshold
        out_path: optional CSV path for the per-run rows

    Returns:
        AblationReport
    """
    if kind not in ABLATION_KINDS:
        raise ConfigError(f"Unknown ablation: {kind} (expected one of {list(ABLATION_KINDS)})")
    variants, default_seeds = ABLATION_KINDS[kind]
    seeds = list(seeds) if seeds is not None else list(range(default_seeds))

    rows: List[dict] = []
    for variant, overrides in variants.items():
        for seed in seeds:
            config = replace(base_config, seed=seed, **overrides)
            print(f"  Training: {variant} (seed {seed})...")
            model = ModelGraph.build(backbone, config, upsampler)
            if upsampler_init is not None and config.attention and config.upsampler == "deconv":
                model.load_upsampler(upsampler_init)
            train(train_set, config, model=model)
            accuracy = evaluate(model, test_set)
            loc_error = localization_error(model, test_set, threshold_frac=threshold)
            row = {"variant": variant, "seed": seed,
                   **{f"acc_{mode}": 100.0 * acc for mode, acc in accuracy.items()},
                   "loc_error": loc_error}
            rows.append(row)
            print(f"    ✓ average {row['acc_average']:.2f}%  coarse {row['acc_coarse']:.2f}%  "
                  f"localization error {loc_error:.2f}%")

    runs = pd.DataFrame(rows)
    medians = runs.drop(columns=["seed"]).groupby("variant").median()
    gates = evaluate_gates(kind, medians)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        runs.to_csv(out_path, index=False)
    logger.info("Ablation %s: gates %s", kind, gates)
    return AblationReport(kind, runs, medians, gates)


# ============================================================================
# PILOT RECORD
# ============================================================================

RECORD_COLUMNS = ["run", "metric", "value"]


def read_record(path) -> pd.DataFrame:
    """Load a run/metric/value record table."""
    table = pd.read_csv(path)
    if list(table.columns) != RECORD_COLUMNS:
        raise FormatError(f"{path}: expected columns {RECORD_COLUMNS}, got {list(table.columns)}")
    return table


def record_results(path, run: str, metrics: Dict[str, float]) -> pd.DataFrame:
    """
    Store the metrics of one run, replacing any earlier rows of that run.

    Rows of other runs are kept in their order; the run's rows go last.
    """
    path = Path(path)
    rows = pd.DataFrame([{"run": run, "metric": name, "value": float(value)} for name, value in metrics.items()],
                        columns=RECORD_COLUMNS)
    if path.exists():
        kept = read_record(path)
        kept = kept[kept["run"] != run]
        if len(kept):
            rows = pd.concat([kept, rows], ignore_index=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows.to_csv(path, index=False)
    logger.info("Recorded %d metrics of %s in %s", len(metrics), run, path)
    return rows


def recorded_value(path, run: str, metric: str) -> float:
    table = read_record(path)
    match = table[(table["run"] == run) & (table["metric"] == metric)]
    if match.empty:
        raise ConfigError(f"{path} has no {metric} for run {run!r}")
    return float(match["value"].iloc[0])
