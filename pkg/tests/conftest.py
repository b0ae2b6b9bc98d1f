import numpy as np
import pytest
import torch

from depthrisk import scenekit
from depthrisk.netcore import ModelConfig

torch.set_num_threads(1)


def tiny_model_config(D=8, **kw) -> ModelConfig:
    base = dict(feature_dim=D, context_dim=8, object_dim=8, graph_dim=8, temporal_dim=8,
                accident_dim=4, heads=2, head_hidden=8, smooth_fields=(5, 3, 2), dropout=(0.0, 0.0))
    base.update(kw)
    return ModelConfig(**base)


def random_frame_points(rng, n_max=5, T=2):
    """Random positions (T, N, 3) and mask (T, N) with up to ``n_max`` objects."""
    N = int(rng.integers(1, n_max + 1))
    pts = rng.uniform(0, 60, size=(T, N, 3))
    mask = rng.random((T, N)) < 0.85
    return pts, mask


@pytest.fixture(scope="session")
def small_scenario():
    return scenekit.ScenarioConfig(num_videos=12, num_frames=30, feature_dim=8, seed=5)


@pytest.fixture(scope="session")
def small_dataset(small_scenario):
    return scenekit.generate_dataset(small_scenario)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
