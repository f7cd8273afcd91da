"""Shared fixtures: small datasets and model configs kept session-scoped so
expensive generation happens once per test run."""

import numpy as np
import pytest

from invarco import data as D
from invarco.model import ModelConfig


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig().tiny()


@pytest.fixture(scope="session")
def tiny_demo():
    rng = np.random.default_rng(2)
    return D.collect_demos(rng, 2, views_per_step=3, image_size=8)


@pytest.fixture(scope="session")
def tiny_static():
    rng = np.random.default_rng(4)
    return D.collect_static(rng, 3, views_per_state=4, image_size=8)


@pytest.fixture(scope="session")
def tiny_batch(tiny_demo, tiny_static):
    cfg = D.SamplerConfig(batch_size=2, n_pos_pairs=2, n_neg_pairs=2,
                          n_ext_pairs=2, n_bbox_items=2)
    return D.sample_batch(tiny_demo, tiny_static, cfg, np.random.default_rng(6))


@pytest.fixture(scope="session")
def small_demo():
    rng = np.random.default_rng(8)
    return D.collect_demos(rng, 3, views_per_step=2, image_size=48)


@pytest.fixture(scope="session")
def small_static():
    rng = np.random.default_rng(10)
    return D.collect_static(rng, 4, views_per_state=3, image_size=48)
