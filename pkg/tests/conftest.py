import numpy as np
import pytest

from proxyattn.data import default_h36m17_skeleton, synth_generate
from proxyattn.model import ModelConfig, ProxyLifter
from proxyattn.rng import Rng

# The small configuration used across model tests: big enough to exercise
# every code path (multi-head, multi-layer, proxy shorter than frames),
# small enough for exhaustive finite differences.
TINY = dict(frames=9, joints=3, in_channels=2, hidden=8, layers=2, heads=2, proxy_len=3)
MICRO = dict(frames=5, joints=2, in_channels=2, hidden=4, layers=1, heads=2, proxy_len=2)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def micro_config():
    return ModelConfig(**MICRO)


@pytest.fixture
def tiny_model(tiny_config):
    return ProxyLifter(tiny_config, Rng(7))


@pytest.fixture
def micro_model(micro_config):
    return ProxyLifter(micro_config, Rng(3))


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """Eight 27-frame sequences on the default skeleton (shared, read-only)."""
    root = tmp_path_factory.mktemp("synthdata")
    manifest = synth_generate(Rng(42), 8, 27, default_h36m17_skeleton(), root)
    return manifest


@pytest.fixture(scope="session")
def short_dataset(tmp_path_factory):
    """Eight 9-frame sequences (for fast training-step smoke runs)."""
    root = tmp_path_factory.mktemp("synthdata9")
    manifest = synth_generate(Rng(43), 8, 9, default_h36m17_skeleton(), root)
    return manifest


def random_input(config: ModelConfig, seed: int = 0) -> np.ndarray:
    rng = Rng([seed, 555])
    return rng.normal((config.frames, config.joints, config.in_channels), 1.0)


def random_target(config: ModelConfig, seed: int = 0) -> np.ndarray:
    rng = Rng([seed, 777])
    return rng.normal((config.frames, config.joints, config.out_channels), 0.5)
