import numpy as np
import pytest
import torch

from pathcase.grid import FeatureGrid

torch.set_num_threads(1)


def random_grid(rng, h=None, w=None, d=None, density=0.6, spacing=224.0):
    h = h or int(rng.integers(1, 9))
    w = w or int(rng.integers(1, 9))
    d = d or int(rng.integers(1, 5))
    valid = rng.random((h, w)) < density
    if not valid.any():
        valid[rng.integers(h), rng.integers(w)] = True
    feats = rng.normal(size=(h, w, d)).astype(np.float32)
    feats[~valid] = 0.0
    return FeatureGrid(feats, valid, spacing, (float(rng.integers(0, 1000)), 0.0), "20x")


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
