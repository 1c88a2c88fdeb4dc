import warnings
from contextlib import contextmanager

import numpy as np
import pytest

from dfpca import EvaluationGrid, FunctionalDataset


@contextmanager
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def small_1d_samples():
    """Four hand-written curves on [0, 1] with irregular designs."""
    return [
        (np.array([0.0, 0.13, 0.41, 0.58, 0.92]), np.array([1.2, 0.7, -0.3, 0.4, 1.9])),
        (np.array([0.05, 0.33, 0.5, 0.77, 1.0]), np.array([0.1, -0.8, 0.6, 1.1, 0.2])),
        (np.array([0.2, 0.26, 0.64, 0.85]), np.array([-1.0, 0.3, 0.9, -0.4])),
        (np.array([0.1, 0.45, 0.7, 0.95, 0.99, 0.61]), np.array([0.5, 1.4, -0.2, 0.8, 0.0, 0.3])),
    ]


def small_2d_samples(seed=7, n=6, m=8):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        c = rng.random((m, 2))
        v = np.sin(3 * c[:, 0]) + c[:, 1] ** 2 + rng.standard_normal() * c[:, 0] + 0.1 * rng.standard_normal(m)
        out.append((c, v))
    return out


def gridded_samples(grid, n, seed, per_sample=None, noise=0.2):
    """Random curves observed at random subsets of ``grid`` nodes."""
    rng = np.random.default_rng(seed)
    nodes = grid.nodes()
    out = []
    for _ in range(n):
        k = per_sample or rng.integers(3, max(4, grid.size // 2))
        idx = rng.choice(grid.size, size=k, replace=False)
        x = nodes[idx]
        a, b = rng.standard_normal(2)
        v = np.cos(x).sum(axis=1) + a * x[:, 0] + b * np.sin(2 * x[:, -1]) + noise * rng.standard_normal(k)
        out.append((x, v))
    return out


@pytest.fixture
def ds1():
    return FunctionalDataset.from_samples(small_1d_samples(), bounding_box=[[0.0, 1.0]])


@pytest.fixture
def grid1():
    return EvaluationGrid.regular([0.0], [1.0], 6)


@pytest.fixture
def ds2():
    return FunctionalDataset.from_samples(small_2d_samples(), bounding_box=[[0.0, 1.0], [0.0, 1.0]])


@pytest.fixture
def grid2():
    return EvaluationGrid.regular([0.0, 0.0], [1.0, 1.0], 4)


def model_from_truth(truth, grid, scores=None, sigma2=0.0):
    """FpcaModel holding the generator's exact mean and eigenfunctions on ``grid``."""
    from dfpca.core import SurfaceEstimate
    from dfpca.eigen import EigenSystem
    from dfpca.scores import FpcaModel

    lam = np.asarray(truth.spec.eigenvalues, dtype=float)
    phi = truth.eigenfunctions_on(grid)
    eig = EigenSystem(grid, lam, phi, np.cumsum(lam) / lam.sum(), float(lam.sum()))
    mean = SurfaceEstimate(grid, truth.mean_on(grid))
    if scores is None:
        scores = np.zeros((1, len(lam)))
    return FpcaModel(mean, eig, sigma2, scores)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
