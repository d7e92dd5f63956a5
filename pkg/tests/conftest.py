import numpy as np
import pytest
import torch

from seqattend.model import AttentionModel, ModelConfig


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_model(image_shape=(12, 12), scales=("1x", "2x"), sizes=(6, 5, 4, 3), seed=0):
    """Tiny float64 model for gradient checks and contract tests."""
    torch.manual_seed(seed)
    c, o, g, zo = sizes
    cfg = ModelConfig(image_shape=image_shape, scales=scales, controller_size=c,
                      observer_size=o, guide_size=g, z_o_size=zo)
    return AttentionModel(cfg).double()


@pytest.fixture
def tiny_model():
    return small_model()
