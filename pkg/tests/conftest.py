import numpy as np
import pytest
import torch

from vitalflow import scenegen
from vitalflow.cfm import init_model
from vitalflow.mmdit import ModelConfig

torch.set_num_threads(1)

TINY = ModelConfig(d_model=16, heads=2, layers=4)


def randomized(model, seed=0, scale=0.2):
    """Perturb every parameter so gated blocks are no longer zero maps."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model.eval()


@pytest.fixture
def tiny_model():
    return randomized(init_model(TINY, 0))


@pytest.fixture
def tiny_model64():
    return randomized(init_model(TINY, 0)).double()


@pytest.fixture(scope="session")
def specs():
    rng = np.random.default_rng(7)
    return [scenegen.random_scene(rng) for _ in range(8)]


@pytest.fixture(scope="session")
def default_ckpt():
    from vitalflow.pretrained import default_checkpoint

    try:
        return default_checkpoint()
    except FileNotFoundError as exc:
        pytest.skip(str(exc))
