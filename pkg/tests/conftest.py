import numpy as np
import pytest

from mdprobe.phoneset import load_default_inventory


@pytest.fixture(scope="session")
def inventory():
    return load_default_inventory()


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)


def random_scores(rng, n_pos, n_neg, ties=False):
    """Score pair with optional injected ties (both within and across classes)."""
    pos = rng.normal(0.5, 1.0, size=n_pos)
    neg = rng.normal(-0.5, 1.0, size=n_neg)
    if ties:
        # quantize a random subset so exact collisions actually occur
        k = max(1, n_pos // 3)
        pos[:k] = np.round(pos[:k], 1)
        k = max(1, n_neg // 3)
        neg[:k] = np.round(neg[:k], 1)
    return pos, neg
