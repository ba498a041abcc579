import os

import numpy as np
import pytest
import torch

from backends import MockBackend
from generate_toy_dataset import generate_style_image, write_toy_dataset

SMALL_DIM = 32


def pytest_collection_modifyitems(config, items):
    if os.getenv('CREATIVE_RUN_INTEGRATION') == '1':
        return
    skip = pytest.mark.skip(reason='needs pretrained weights; set CREATIVE_RUN_INTEGRATION=1')
    for item in items:
        if 'integration' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv('CREATIVE_CACHE_DIR', str(tmp_path / 'cache'))


@pytest.fixture
def mock_backend():
    return MockBackend(seed=0, embed_dim=SMALL_DIM)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_image(rng):
    return generate_style_image('stripes', rng, 16)


@pytest.fixture
def toy_images(rng):
    return [generate_style_image(style, rng, 16) for style in ('bright', 'dark', 'stripes', 'checker', 'gradient')]


@pytest.fixture
def toy_dataset_root(tmp_path):
    return write_toy_dataset(str(tmp_path / 'toy'), per_class=6, size=16, seed=0)


@pytest.fixture
def seeded_torch():
    torch.manual_seed(0)
    yield
