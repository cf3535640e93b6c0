"""
Configuration settings for the Coarse2Fine trainer.

Every value here is a default. Run config files (see modules/run_config.py)
and command-line ``--set`` flags override the training/data values; the
environment (or a .env file) controls the paths and debug switches only.
"""
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file if it exists
load_dotenv()

# ============================================================================
# PATHS
# ============================================================================
BASE_DIR = Path(__file__).parent.absolute()
RUNS_DIR = Path(os.getenv("C2F_RUNS_DIR", str(BASE_DIR / "runs")))

DATASET_SUFFIX = ".c2fd"
CHECKPOINT_SUFFIX = ".c2f"
TRAIN_SPLIT_NAME = "train" + DATASET_SUFFIX
TEST_SPLIT_NAME = "test" + DATASET_SUFFIX
METRICS_FILENAME = "metrics.csv"

# ============================================================================
# PILOT RECORD
# ============================================================================
# Reference numbers of pinned-seed runs live here (run, metric, value rows)
PILOT_RECORD = BASE_DIR / "results" / "pilot.csv"

# Held-out MSE bound for `pretrain-upsampler --check`
PRETRAIN_MAX_MSE = 0.01

# `eval --expect` tolerance against a recorded accuracy
EXPECT_TOLERANCE = 1e-9

# ============================================================================
# NUMERICS / DEBUG
# ============================================================================
# Check every tensor op result for NaN/Inf (slow; off by default)
DEBUG_NANS = os.getenv("C2F_DEBUG_NANS", "0") == "1"

# Show tqdm progress bars in long loops
SHOW_PROGRESS = os.getenv("C2F_PROGRESS", "1") != "0"

GRADCHECK_STEP = 1e-5
GRADCHECK_OP_TOLERANCE = 1e-4
GRADCHECK_MODEL_TOLERANCE = 1e-3
GRADCHECK_INSTANCES = 20

# ============================================================================
# SYNTHETIC DATA  ([data] section)
# ============================================================================
DATA_DEFAULTS = {
    "num_classes": 10,
    "train_per_class": 200,
    "test_per_class": 50,
    "channels": 3,
    "image_size": 64,
    "min_spots": 1,
    "max_spots": 5,
    "use_marker": True,
    "hue_shift": 0.05,
    "max_translation": 0.25,
    "max_rotation": 30.0,
    "min_scale": 0.8,
    "max_scale": 1.2,
    "noise_sigma": 0.08,
    "seed": 7,
}

# ============================================================================
# BACKBONE  ([backbone] section)
# ============================================================================
BACKBONE_DEFAULTS = {
    # Comma separated channel widths of the conv stages; the last one is N
    "stages": "8,16,32",
    "attention_maps": 8,
}

# ============================================================================
# UPSAMPLER  ([upsampler] section)
# ============================================================================
UPSAMPLER_DEFAULTS = {
    "width": 8,
    "pairs": 2000,
    "held_out": 200,
    "epochs": 30,
    "lr": 0.01,
    "momentum": 0.9,
    "batch_size": 16,
    "seed": 11,
}

# ============================================================================
# TRAINING  ([train] section)
# ============================================================================
TRAIN_DEFAULTS = {
    "lr": 0.01,
    "momentum": 0.9,
    "weight_decay": 1e-5,
    "batch_size": 16,
    "epochs": 40,
    "lam": 1.0,
    "beta": 0.05,
    "seed": 0,
    "pool": "avg",
    "bap_mode": "per_location",
    "mask_norm": "minmax",
    "ortho_init": True,
    "fine_bap": True,
    "attention": True,
    "upsampler": "deconv",
    "freeze_upsampler": False,
    "select_per_sample": False,
    "threads": 4,
}

# ============================================================================
# LOCALIZATION  ([localize] section)
# ============================================================================
LOCALIZE_DEFAULTS = {
    "threshold": 0.5,
    "mode": "average",
    "iou_threshold": 0.5,
}

SECTION_DEFAULTS = {
    "data": DATA_DEFAULTS,
    "backbone": BACKBONE_DEFAULTS,
    "upsampler": UPSAMPLER_DEFAULTS,
    "train": TRAIN_DEFAULTS,
    "localize": LOCALIZE_DEFAULTS,
}
