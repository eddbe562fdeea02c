"""Shared small-scale fixtures for attack and defense tests."""

import pytest

from motionguard import classifier as cls
from motionguard import flow as fl
from motionguard import video as vd


@pytest.fixture(scope="session")
def small_flow_config():
    return fl.FlowConfig(iters_inference=8, iters_gradient=2)


@pytest.fixture(scope="session")
def small_clips():
    spec = vd.DatasetSpec(
        T=6, H=32, W=32, C=3, clips_per_class=2, texture_smoothness=3.0
    )
    return [c for c, _, _ in vd.generate_dataset(spec, seed=17)]


@pytest.fixture(scope="session")
def small_model(small_clips, small_flow_config):
    cfg = cls.TrainConfig(epochs=5, seed=0)
    return cls.train(small_clips, cfg, small_flow_config)
