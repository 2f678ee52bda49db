import numpy as np
import pytest

from fieldreg.net import TapeContext
from fieldreg.volume import Grid, LabelMask, Volume


@pytest.fixture(autouse=True)
def no_tape_leaks():
    """Every test must consume or release the tapes it records."""
    before = TapeContext.live_count()
    yield
    assert TapeContext.live_count() == before, "test leaked a live TapeContext"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid5():
    return Grid((5, 5, 5))


def random_volume(rng, grid, normalized=True, dtype=np.float64):
    data = rng.random(grid.dims).astype(dtype)
    return Volume(grid, data, normalized=normalized)


def random_mask(rng, grid, labels=(1, 2), table=None):
    lab = rng.integers(0, max(labels) + 1, size=grid.dims).astype(np.int32)
    table = table or {k: f"organ{k}" for k in labels}
    return LabelMask(grid, lab, table)


def fd_gradient(f, arr, idx, step=1e-4):
    """Central finite difference of a scalar function at one array entry."""
    orig = arr[idx]
    arr[idx] = orig + step
    fp = f()
    arr[idx] = orig - step
    fm = f()
    arr[idx] = orig
    return (fp - fm) / (2 * step)


def max_rel_err_fd(f, arr, analytic, rng, samples=25, step=1e-4):
    worst = 0.0
    for _ in range(samples):
        idx = tuple(rng.integers(0, s) for s in arr.shape)
        fd = fd_gradient(f, arr, idx, step)
        a = analytic[idx]
        worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-9))
    return worst
