import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from icsreid.data import accumulate_global_ids
from icsreid.synthetic import WorldSpec, generate_world


@pytest.fixture(scope="session")
def small_world():
    """Clean 10-identity world: zero shift, tiny noise, 3 cameras."""
    spec = WorldSpec(
        true_identity_count=10,
        camera_count=3,
        cameras_per_identity=(2, 3),
        feature_dim=16,
        camera_shift_magnitude=0.0,
        noise_sigma=0.01,
        seed=7,
        images_per_appearance=(2, 3),
    )
    return generate_world(spec)


@pytest.fixture
def tiny_manifest():
    rows = [
        ("img-0", 0, 0),
        ("img-1", 0, 0),
        ("img-2", 0, 1),
        ("img-3", 1, 0),
        ("img-4", 1, 1),
        ("img-5", 1, 1),
        ("img-6", 1, 2),
    ]
    return accumulate_global_ids(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(123)


def random_unit(rng, n, d, dtype=torch.float64):
    x = torch.tensor(rng.standard_normal((n, d)), dtype=dtype)
    return x / x.norm(dim=1, keepdim=True)
