import numpy as np
import pytest

from ctpanel.panel import PanelDataset


def random_panel(rng, N=None, T=None, k=None, balanced=True, z=False):
    """Small random panel with nonnegative treatment."""
    N = N or int(rng.integers(3, 9))
    T = T or int(rng.integers(3, 6))
    k = int(rng.integers(0, 3)) if k is None else k
    Y = rng.normal(size=(N, T))
    D = rng.uniform(0, 4, size=(N, T))
    X = rng.normal(size=(N, T, k))
    present = None
    if not balanced:
        present = rng.random((N, T)) > 0.15
        present[:, 0] = True
        present[0] = True
    names = tuple(f"x{j + 1}" for j in range(k))
    return PanelDataset(Y, D, X, present, covariate_names=names,
                        z_names=names[:1] if z and k else ())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
