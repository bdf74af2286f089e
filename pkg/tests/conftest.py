"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from dvalaudit.data import TabularDataset


def make_dataset(x, y, ids=None, class_names=None, feature_names=None) -> TabularDataset:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.int64)
    k = int(y.max()) + 1 if class_names is None else len(class_names)
    return TabularDataset(
        features=x,
        labels=y,
        feature_names=tuple(feature_names or (f"x{j}" for j in range(x.shape[1]))),
        class_names=tuple(class_names or (str(c) for c in range(max(k, 2)))),
        datum_ids=ids,
    )


def blobs(n: int, seed: int, d: int = 2, sep: float = 1.5, ids_from: int = 0) -> TabularDataset:
    """Two Gaussian blobs with alternating labels (balanced for even n)."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, d)) + sep * (2 * y[:, None] - 1)
    return make_dataset(x, y, ids=np.arange(ids_from, ids_from + n))


def imbalanced(n: int, seed: int, minority: float = 0.1, d: int = 4, sep: float = 1.0) -> TabularDataset:
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < minority).astype(int)
    y[:2] = [0, 1]
    x = rng.normal(size=(n, d)) + sep * (2 * y[:, None] - 1)
    return make_dataset(x, y)


def permutation_shapley(utility, n: int) -> np.ndarray:
    """Shapley values by averaging marginals over all n! orderings.

    Independent of the subset-weight formula used by the package.
    """
    phi = np.zeros(n)
    count = 0
    for perm in itertools.permutations(range(n)):
        prefix: list[int] = []
        prev = utility(prefix)
        for i in perm:
            prefix.append(i)
            cur = utility(prefix)
            phi[i] += cur - prev
            prev = cur
        count += 1
    assert count == math.factorial(n)
    return phi / count


def memo(fn):
    cache = {}

    def wrapped(positions):
        key = tuple(sorted(int(p) for p in positions))
        if key not in cache:
            cache[key] = fn(key)
        return cache[key]

    return wrapped


@pytest.fixture
def small_blobs():
    return blobs(8, seed=3), blobs(12, seed=4, ids_from=100)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
