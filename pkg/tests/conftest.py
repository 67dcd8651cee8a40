"""Shared fixtures: a desk-scale run config, dataset and model."""

import json

import numpy as np
import pytest

from gzsl_lab.config import (
    BackboneConfig,
    DsvtmConfig,
    GeneratorConfig,
    LossWeights,
    RunConfig,
    TrainConfig,
)
from gzsl_lab.data_generator import DataGenerator
from gzsl_lab.model import GzslModel
from gzsl_lab.trainer import prepare_model


def tiny_run_config(**dsvtm_overrides) -> RunConfig:
    """N_s=8, N_v=4, D=8, Z=2, R=2 with an identity backbone."""
    dsvtm = DsvtmConfig(
        num_attributes=8,
        num_patches=4,
        width=8,
        num_groups=2,
        loops=2,
        modules=2,
        **dsvtm_overrides,
    )
    return RunConfig(
        dsvtm=dsvtm,
        backbone=BackboneConfig(num_layers=2, mode="identity"),
        loss=LossWeights(lambda_sem=0.5, lambda_deb=0.001, tau=20.0),
        train=TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3),
        data=GeneratorConfig(
            num_seen=4,
            num_unseen=2,
            num_attributes=8,
            num_groups=2,
            num_patches=4,
            input_width=8,
            samples_per_class=6,
            test_fraction=0.25,
            seed=7,
        ),
        seed=7,
    )


def perturb_parameters(model: GzslModel, seed: int, scale: float = 0.1) -> None:
    """Move every parameter (norm gains and zero biases included) off its initial value."""
    rng = np.random.default_rng(seed)
    for _, param in model.named_parameters():
        param.assign(param.data + scale * rng.standard_normal(param.shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> RunConfig:
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    return DataGenerator(tiny_run_config().data).generate()


@pytest.fixture
def tiny_model(tiny_dataset):
    _, model = prepare_model(tiny_run_config(), tiny_dataset)
    return model


@pytest.fixture
def config_file(tmp_path):
    """Write a RunConfig dict to a JSON file and return its path."""

    def write(config: RunConfig, name: str = "config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(config.to_dict()), encoding="utf-8")
        return path

    return write
