import numpy as np
import pytest

from casunext.cascade import GeometrySpec
from casunext.network import ModelConfig
from casunext.synthetic_data.generate import PhantomSpec, generate
from casunext.training import TrainConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_geometry() -> GeometrySpec:
    return GeometrySpec(edge_crop=48, resize_to=32, crop_to=16)


@pytest.fixture
def tiny_model() -> ModelConfig:
    return ModelConfig(input_size=32, width_multiplier=0.25, stage_depths=(1, 1, 1, 1), seed=7)


@pytest.fixture
def tiny_train() -> TrainConfig:
    return TrainConfig(epochs_loc=1, epochs_seg=1, batch_size=4, seed=7)


@pytest.fixture(scope="session")
def tiny_phantoms():
    return generate(PhantomSpec(seed=3, count=10, frame_size=48))


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(
        "geometry: {edge_crop: 48, resize_to: 32, crop_to: 16}\n"
        "model: {width_multiplier: 0.25, stage_depths: [1, 1, 1, 1]}\n"
        "train: {epochs_loc: 1, epochs_seg: 1, batch_size: 4}\n"
        "phantoms: {frame_size: 48}\n"
    )
    return path
