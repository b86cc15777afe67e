"""Shared fixtures: a small trained pipeline reused across unit tests.

Everything here is deliberately tiny (32 px images, pooled codec,
80-epoch denoiser) so the whole unit suite stays fast; the acceptance
suite builds its own larger pipeline with its own budget.
"""

import numpy as np
import pytest
import torch

from dicad.conditioning import build_bins, build_feature_index, training_mean_distances
from dicad.data import SyntheticSpec, generate_synthetic
from dicad.diffusion import GuidanceConfig, make_linear_schedule
from dicad.nets import PooledCodec, TrainConfig, init_backbone, train_denoiser
from dicad.reconstruction import Pipeline

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def unit_dataset():
    return generate_synthetic(
        SyntheticSpec(image_size=32, seed=11, num_train=80, num_test_nominal=8,
                      num_test_per_kind=4)
    )


@pytest.fixture(scope="session")
def unit_codec():
    return PooledCodec(factor=2)


@pytest.fixture(scope="session")
def unit_schedule():
    return make_linear_schedule(0.0015, 0.0195, 1000)


@pytest.fixture(scope="session")
def unit_denoiser(unit_dataset, unit_codec, unit_schedule):
    images = [s.image for s in unit_dataset.train]
    config = TrainConfig(epochs=80, batch_size=16, learning_rate=1e-3, seed=4)
    return train_denoiser(
        images, unit_codec, unit_schedule, config, base_channels=16, channel_mults=(1, 2)
    )


@pytest.fixture(scope="session")
def unit_backbone():
    return init_backbone(seed=3, in_channels=3, widths=(8, 16, 32, 64))


@pytest.fixture(scope="session")
def unit_index_table(unit_dataset, unit_backbone):
    images = [s.image for s in unit_dataset.train]
    index = build_feature_index(images, unit_backbone, block=2, num_neighbors=20)
    table = build_bins(training_mean_distances(index), num_bins=10, t_max=80, min_bin=2)
    return index, table


@pytest.fixture(scope="session")
def unit_pipeline(unit_denoiser, unit_codec, unit_backbone, unit_index_table, unit_schedule):
    index, table = unit_index_table
    return Pipeline(
        denoiser=unit_denoiser, codec=unit_codec, extractor=unit_backbone,
        index=index, table=table, schedule=unit_schedule,
        guidance=GuidanceConfig(eta=0.0, sigma=0.0),
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
