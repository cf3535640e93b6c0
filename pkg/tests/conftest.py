"""
Shared fixtures for the test suite.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from modules.backbone import BackboneConfig, StageSpec
from modules.data_synth import SynthConfig, generate
from modules.deconv_upsampler import UpsamplerConfig
from modules.tensor_core import precision


@pytest.fixture
def rng():
    """Seeded generator for reproducible draws."""
    return np.random.default_rng(42)


@pytest.fixture
def float64():
    """Run the test with float64 tensors."""
    with precision("float64"):
        yield


@pytest.fixture
def tiny_backbone():
    """N=6, M=2, 16x16 RGB input, 3 classes; 4x4 feature maps."""
    return BackboneConfig(input_channels=3, input_size=16, stages=(StageSpec(4), StageSpec(6)),
                          attention_maps=2, num_classes=3)


@pytest.fixture
def tiny_upsampler():
    return UpsamplerConfig(in_size=4, out_size=16, width=4)


@pytest.fixture
def tiny_synth():
    return SynthConfig(num_classes=3, train_per_class=4, test_per_class=2, image_size=16, seed=3)


@pytest.fixture
def tiny_splits(tiny_synth):
    """Generated train/test splits with boxes, 12 and 6 samples."""
    return generate(tiny_synth)
