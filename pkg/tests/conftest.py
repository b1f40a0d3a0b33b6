"""Shared fixtures: tiny-but-real datasets and small model configs.

The tiny corpus (10 tiles of 100x100, 4 patches each) keeps unit tests
fast while exercising the full on-disk layout. Anything statistical
(quantile recovery, heavy-tail shape) builds its own larger sample.
"""

import numpy as np
import pytest

from coverest.nnet.model import ModelConfig
from coverest.qloss import QuantileSpec
from coverest.synthdata import SceneConfig, SyntheticDataset, generate_dataset

TINY_SEED = 4242


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    cfg = SceneConfig(seed=TINY_SEED, n_tiles=10, tile_size=100)
    generate_dataset(cfg, root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return SyntheticDataset(tiny_dataset_dir)


@pytest.fixture()
def small_config():
    # 1 block / width 4 keeps forward+backward around a millisecond
    return ModelConfig(
        in_channels=5,
        n_blocks=1,
        base_width=4,
        dropout_rate=0.0,
        quantiles=QuantileSpec((0.1, 0.5, 0.9)),
        head_hidden=6,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
