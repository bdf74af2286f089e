"""Induce MCAR / MAR / MNAR missingness on selected feature columns.

MAR uses a logistic link on a standardized score of the fully observed
non-affected columns, with the intercept calibrated by bisection so the
expected missing fraction equals epsilon. MNAR uses self-masking: the
largest ``2 * epsilon`` share of each affected column are candidates and
each candidate is hidden with probability 0.5.
"""

from __future__ import annotations

import json
import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .data import TabularDataset
from .errors import NoConditioningColumns, ShapeMismatch, TooFewFeatures

PATTERNS = ("MCAR", "MAR", "MNAR")

MAR_CALIBRATION_TOL = 0.005
MAR_MAX_BISECTIONS = 60
MNAR_CANDIDATE_PROB = 0.5
MAX_REDRAWS = 200


class ConstantColumnWarning(UserWarning):
    """MNAR requested on a constant column; fell back to MCAR."""


@dataclass(frozen=True, eq=False)
class MissingnessMask:
    observed: np.ndarray
    pattern: str
    epsilon: float
    affected_features: tuple[int, ...]
    seed: int
    method_notes: str = ""

    def __post_init__(self):
        observed = np.array(self.observed, dtype=bool, copy=True)
        observed.flags.writeable = False
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "affected_features", tuple(int(j) for j in self.affected_features))

    @property
    def missing(self) -> np.ndarray:
        return ~self.observed

    @property
    def n_missing(self) -> int:
        return int(self.missing.sum())

    def realized_fraction(self) -> float:
        cells = self.observed.shape[0] * len(self.affected_features)
        return self.n_missing / cells if cells else 0.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, MissingnessMask):
            return NotImplemented
        return (
            np.array_equal(self.observed, other.observed)
            and self.pattern == other.pattern
            and self.epsilon == other.epsilon
            and self.affected_features == other.affected_features
            and self.seed == other.seed
        )

    __hash__ = None

    def to_json(self) -> str:
        rows, cols = np.nonzero(self.missing)
        return json.dumps(
            {
                "pattern": self.pattern,
                "epsilon": self.epsilon,
                "seed": self.seed,
                "affected": list(self.affected_features),
                "shape": list(self.observed.shape),
                "missing": [[int(r), int(c)] for r, c in zip(rows, cols)],
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str, shape: tuple[int, int] | None = None) -> "MissingnessMask":
        d = json.loads(text)
        shape = tuple(d.get("shape") or shape)
        if shape is None:
            raise ValueError("mask JSON lacks a shape and none was given")
        observed = np.ones(shape, dtype=bool)
        for r, c in d["missing"]:
            observed[r, c] = False
        return cls(observed, d["pattern"], float(d["epsilon"]), tuple(d["affected"]), int(d["seed"]))


def select_missing_features(d: int, one_based: bool = False) -> list[int]:
    """Columns that receive missingness: feature 3 if d <= 8, else 2 and 7.

    Indices are 0-based by default; ``one_based=True`` reads the rule's
    feature numbers as 1-based positions and returns the 0-based columns.
    """
    if d < 4:
        raise TooFewFeatures(f"need at least 4 features, got {d}")
    picks = [3] if d <= 8 else [2, 7]
    if one_based:
        picks = [p - 1 for p in picks]
    return picks


def _check(dataset: TabularDataset, features: Sequence[int], epsilon: float) -> list[int]:
    features = sorted({int(j) for j in features})
    if not features:
        raise ValueError("features must be non-empty")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    bad = [j for j in features if not 0 <= j < dataset.d]
    if bad:
        raise IndexError(f"feature indices out of range: {bad}")
    return features


def _within_3_sigma(count: int, cells: int, epsilon: float) -> bool:
    sd = math.sqrt(cells * epsilon * (1.0 - epsilon))
    return abs(count - cells * epsilon) <= 3.0 * sd


def _draw(prob: np.ndarray, rng: np.random.Generator, epsilon: float) -> np.ndarray:
    """Bernoulli draw of a missing-indicator matrix, redrawn while the count
    falls outside 3 binomial standard deviations of epsilon."""
    for _ in range(MAX_REDRAWS):
        hits = rng.random(prob.shape) < prob
        if _within_3_sigma(int(hits.sum()), prob.size, epsilon):
            return hits
    warnings.warn("missing fraction stayed outside 3 sigma of epsilon after redraws", RuntimeWarning)
    return hits


def _to_mask(dataset, features, hits, pattern, epsilon, seed, notes=""):
    observed = ~dataset.missing
    for k, j in enumerate(features):
        observed[:, j] &= ~hits[:, k]
    return MissingnessMask(observed, pattern, float(epsilon), tuple(features), int(seed), notes)


def induce_mcar(dataset: TabularDataset, features: Sequence[int], epsilon: float, seed: int) -> MissingnessMask:
    features = _check(dataset, features, epsilon)
    rng = np.random.default_rng(seed)
    prob = np.full((dataset.n, len(features)), float(epsilon))
    hits = _draw(prob, rng, epsilon)
    return _to_mask(dataset, features, hits, "MCAR", epsilon, seed, "independent Bernoulli(epsilon) per cell")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mar_score(dataset: TabularDataset, features: Sequence[int]) -> np.ndarray:
    """Per-row conditioning score from fully observed non-affected columns."""
    affected = set(features)
    obs = ~dataset.missing
    cond = [j for j in range(dataset.d) if j not in affected and obs[:, j].all()]
    if not cond:
        raise NoConditioningColumns("MAR needs at least one fully observed non-affected column")
    x = dataset.features[:, cond]
    std = x.std(axis=0)
    z = np.where(std > 0, (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0), 0.0)
    return z.sum(axis=1) / math.sqrt(len(cond))


def calibrate_intercept(score: np.ndarray, epsilon: float, slope: float = 1.0) -> float:
    """Bisection for the intercept giving mean(sigmoid(slope*score + b)) = epsilon."""
    lo, hi = -50.0, 50.0
    mid = 0.0
    for _ in range(MAR_MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        mean = float(_sigmoid(slope * score + mid).mean())
        if mean < epsilon:
            lo = mid
        else:
            hi = mid
    mean = float(_sigmoid(slope * score + mid).mean())
    if abs(mean - epsilon) > MAR_CALIBRATION_TOL:
        raise RuntimeError(f"MAR calibration failed: expected fraction {mean:.4f} vs {epsilon}")
    return mid


def mar_probabilities(dataset: TabularDataset, features: Sequence[int], epsilon: float, slope: float = 1.0):
    score = mar_score(dataset, features)
    intercept = calibrate_intercept(score, epsilon, slope)
    return _sigmoid(slope * score + intercept)


def induce_mar(
    dataset: TabularDataset, features: Sequence[int], epsilon: float, seed: int, slope: float = 1.0
) -> MissingnessMask:
    features = _check(dataset, features, epsilon)
    p = mar_probabilities(dataset, features, epsilon, slope)
    rng = np.random.default_rng(seed)
    prob = np.repeat(p[:, None], len(features), axis=1)
    hits = _draw(prob, rng, epsilon)
    return _to_mask(
        dataset, features, hits, "MAR", epsilon, seed,
        f"logistic link on standardized observed columns, slope {slope}, calibrated intercept",
    )


def mnar_candidates(column: np.ndarray, epsilon: float) -> np.ndarray:
    """Rows among the top ``round(2*epsilon*n)`` values (ties: lower row first)."""
    n = len(column)
    k = min(n, int(round(2.0 * epsilon * n)))
    order = np.lexsort((np.arange(n), -column))
    cand = np.zeros(n, dtype=bool)
    cand[order[:k]] = True
    return cand


def induce_mnar(
    dataset: TabularDataset,
    features: Sequence[int],
    epsilon: float,
    seed: int,
    candidate_prob: float = MNAR_CANDIDATE_PROB,
) -> MissingnessMask:
    features = _check(dataset, features, epsilon)
    rng = np.random.default_rng(seed)
    prob = np.zeros((dataset.n, len(features)))
    notes = f"self-masking above the (1 - 2 epsilon) quantile, candidate probability {candidate_prob}"
    for k, j in enumerate(features):
        col = dataset.features[:, j]
        if np.all(col == col[0]):
            warnings.warn(f"column {j} is constant; MNAR falls back to MCAR", ConstantColumnWarning)
            prob[:, k] = epsilon
            notes += f"; column {j} constant, MCAR fallback"
            continue
        # keep the expected fraction at epsilon when 2*epsilon exceeds 1
        p = candidate_prob if 2.0 * epsilon <= 1.0 else epsilon
        prob[:, k] = np.where(mnar_candidates(col, epsilon), p, 0.0)
    hits = _draw(prob, rng, epsilon)
    return _to_mask(dataset, features, hits, "MNAR", epsilon, seed, notes)


def induce(dataset: TabularDataset, pattern: str, features: Sequence[int], epsilon: float, seed: int) -> MissingnessMask:
    pattern = pattern.upper()
    if pattern == "MCAR":
        return induce_mcar(dataset, features, epsilon, seed)
    if pattern == "MAR":
        return induce_mar(dataset, features, epsilon, seed)
    if pattern == "MNAR":
        return induce_mnar(dataset, features, epsilon, seed)
    raise ValueError(f"unknown missingness pattern {pattern!r}; expected one of {PATTERNS}")


def apply_mask(dataset: TabularDataset, mask: MissingnessMask) -> TabularDataset:
    """Hide masked cells behind the NaN sentinel; labels are untouched."""
    if mask.observed.shape != dataset.features.shape:
        raise ShapeMismatch(f"mask {mask.observed.shape} vs dataset {dataset.features.shape}")
    observed = mask.observed & ~dataset.missing
    features = np.where(observed, dataset.features, np.nan)
    return dataset.replace(features=features, observed=observed)
