import numpy as np
import pytest
import torch

from prnet.encoder import EncoderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_config():
    return EncoderConfig(input_size=32, channels_per_scale=(8, 16, 32), seed=7)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """Default procedural dataset: 40 train normals, 20 + 20 test images at 32 px."""
    from prnet.data import generate_synthetic_dataset

    root = tmp_path_factory.mktemp("desk")
    generate_synthetic_dataset(root, seed=0)
    return root


@pytest.fixture(scope="session")
def tiny_data():
    """Random in-memory training pools, enough for a few optimisation steps."""
    from prnet.training import TrainData

    r = np.random.default_rng(99)
    normals = r.random((6, 3, 32, 32)).astype(np.float32)
    seen = []
    for i in range(3):
        mask = np.zeros((32, 32), bool)
        mask[8 + i:16 + i, 10:18] = True
        seen.append((r.random((3, 32, 32)).astype(np.float32), mask))
    textures = r.random((2, 3, 32, 32)).astype(np.float32)
    return TrainData(normals=normals, seen=seen, textures=textures)
