import math

import numpy as np
import pytest
from scipy import ndimage

from qsr.dictionary import DictionaryPair
from qsr.imagecore import Image


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


def make_natural_crop(seed: int, width: int = 48, height: int = 48) -> Image:
    """Smooth random field plus a couple of step edges, roughly in [0.1, 0.9]"""
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=4.0, mode='reflect')
    field = (field - field.min()) / (np.ptp(field) + 1e-12)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(2):
        angle = rng.uniform(0, math.pi)
        offset = rng.uniform(0.3, 0.7) * (width + height) / 2
        field = field + 0.4 * ((xx * math.cos(angle) + yy * math.sin(angle)) > offset)
    field = (field - field.min()) / (np.ptp(field) + 1e-12)
    return Image(0.1 + 0.8 * field)


def make_tiny_pair(n_atoms: int = 10, seed: int = 0, patch_size_lr: int = 3, scale: int = 3) -> DictionaryPair:
    """Random pair with unit joint atoms"""
    rng = np.random.default_rng(seed)
    m_l = 4 * patch_size_lr ** 2
    m_h = (patch_size_lr * scale) ** 2
    joint = rng.standard_normal((m_l + m_h, n_atoms))
    joint /= np.linalg.norm(joint, axis=0, keepdims=True)
    return DictionaryPair.from_joint(joint, m_l, patch_size_lr, patch_size_lr * scale, scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def natural_crop():
    return make_natural_crop


@pytest.fixture
def tiny_pair():
    return make_tiny_pair()


def random_qubo_matrices(rng, n: int):
    a = rng.uniform(-1.0, 1.0, (n, n))
    return (a + a.T) / 2.0, rng.uniform(-1.0, 1.0, n)
