import numpy as np
import pytest

from semishot import SupportSet, UnlabeledSet


def unit_rows(rng, n, d):
    """Random unit-norm rows."""
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_support(rng, n, c, d, ensure_all_classes=False):
    """Random labeled set; optionally force every class to appear."""
    if ensure_all_classes:
        assert n >= c
        idx = np.concatenate([np.arange(c), rng.integers(0, c, size=n - c)])
        rng.shuffle(idx)
    else:
        idx = rng.integers(0, c, size=n)
    return SupportSet.from_indices(unit_rows(rng, n, d), idx, c)


def random_unlabeled(rng, m, d):
    if m == 0:
        return UnlabeledSet.empty(d)
    return UnlabeledSet.from_embeddings(unit_rows(rng, m, d))


def random_codes(rng, m, c):
    """Random simplex rows (M, C)."""
    z = rng.random((m, c)) + 1e-3
    return z / z.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
