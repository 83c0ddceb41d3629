import numpy as np
import pytest

from crin.nn import CrinConfig
from crin.synth import SynthConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_config():
    """Two-stage model small enough for fast forward/backward tests."""
    return CrinConfig(stage_widths=(6, 12))


@pytest.fixture(scope="session")
def tiny_scenes():
    """Six 32x32 synthetic scenes shared across test modules."""
    cfg = SynthConfig(scene_size=32, road_count=1, road_width=(2, 4),
                      building_count=3, building_size=(4, 8), seed=7)
    return synth_generate(cfg, 6)
