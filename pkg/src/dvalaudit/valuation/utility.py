"""Memoized accuracy utility V(S) over coalitions of training rows."""

from __future__ import annotations

import hashlib

import numpy as np

from ..data import TabularDataset
from ..learners import TrainConfig, empty_utility, fit_arrays
from ..errors import EmptyTest


class Utility:
    """Test accuracy of logistic regression trained on a coalition.

    Coalitions are given as positions into the training set. Training is
    deterministic given the coalition *set* (positions are sorted first), so
    results are memoized. ``V(empty) = 1/K``.
    """

    def __init__(
        self,
        train: TabularDataset,
        test: TabularDataset,
        config: TrainConfig = TrainConfig(),
        cache_size: int = 200_000,
    ):
        if test.n == 0:
            raise EmptyTest("utility needs a non-empty test set")
        if train.has_missing or test.has_missing:
            raise ValueError("train/test contain missing cells; impute first")
        self.x = np.ascontiguousarray(train.features, dtype=float)
        self.y = np.asarray(train.labels, dtype=np.int64)
        self.ids = np.asarray(train.datum_ids, dtype=np.int64)
        self.test_x = np.asarray(test.features, dtype=float)
        self.test_y = np.asarray(test.labels, dtype=np.int64)
        self.n_classes = max(train.n_classes, test.n_classes)
        self.config = config
        self.cache_size = cache_size
        self._cache: dict[bytes, np.ndarray] = {}
        self.n_fits = 0

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def m(self) -> int:
        return len(self.test_y)

    @property
    def empty(self) -> float:
        return empty_utility(self.n_classes)

    def _key(self, idx: np.ndarray) -> bytes:
        return hashlib.blake2b(idx.astype(np.int32).tobytes(), digest_size=16).digest()

    def correct(self, positions) -> np.ndarray | None:
        """Per-test-point correctness for the model on ``positions``; None if empty."""
        idx = np.unique(np.asarray(positions, dtype=np.int64))
        if len(idx) == 0:
            return None
        key = self._key(idx)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        model = fit_arrays(self.x[idx], self.y[idx], self.n_classes, self.config)
        self.n_fits += 1
        result = model.predict(self.test_x) == self.test_y
        if len(self._cache) >= self.cache_size:
            self._cache.clear()
        self._cache[key] = result
        return result

    def __call__(self, positions) -> float:
        hit = self.correct(positions)
        if hit is None:
            return self.empty
        return float(hit.mean())

    def full(self) -> float:
        return self(np.arange(self.n))

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state
