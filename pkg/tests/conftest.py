import numpy as np
import pytest
import torch
from hypothesis import settings

from domain_embed.model import NetworkSpec

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def tiny_spec():
    """Small enough for float64 finite differences."""
    return NetworkSpec(num_classes=4, num_domains=3, conv_channels=(4, 4, 4), kernel_size=3, padding=1,
                       image_size=8, disentangler_hidden=16, latent_dim=8, dc_hidden=8, mine_hidden=8, dropout=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_images(rng, n, size=32):
    return rng.integers(0, 256, size=(n, size, size, 3), dtype=np.uint8)


def pytest_terminal_summary(terminalreporter):
    from ._acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
