"""Brute-force semivalues by coalition enumeration (small n only)."""

from __future__ import annotations

from collections.abc import Callable
from math import comb, factorial

import numpy as np

from ..data import TabularDataset
from ..errors import MissingClass, TooLarge
from ..learners import TrainConfig
from .utility import Utility
from .values import ValueVector, config_digest

MAX_EXACT_N = 14


def _positions(mask: int, n: int) -> list[int]:
    return [i for i in range(n) if mask >> i & 1]


def utility_table(utility: Callable, n: int) -> np.ndarray:
    """``table[mask]`` = utility of the coalition encoded by bitmask ``mask``."""
    if n > MAX_EXACT_N:
        raise TooLarge(f"exact enumeration limited to n <= {MAX_EXACT_N}, got {n}")
    return np.array([utility(_positions(mask, n)) for mask in range(1 << n)], dtype=float)


def shapley_from_table(table: np.ndarray, n: int) -> np.ndarray:
    """Exact Shapley values: sum over S not containing i of
    |S|! (n-|S|-1)! / n! * (V(S + i) - V(S))."""
    masks = np.arange(1 << n)
    sizes = np.array([bin(m).count("1") for m in masks])
    weight = np.array([factorial(s) * factorial(n - s - 1) / factorial(n) if s < n else 0.0 for s in range(n + 1)])
    phi = np.zeros(n)
    for i in range(n):
        without = masks[(masks >> i & 1) == 0]
        phi[i] = np.sum(weight[sizes[without]] * (table[without | (1 << i)] - table[without]))
    return phi


def banzhaf_from_table(table: np.ndarray, n: int) -> np.ndarray:
    """Exact Banzhaf values: mean marginal over all 2^(n-1) coalitions without i."""
    masks = np.arange(1 << n)
    phi = np.zeros(n)
    for i in range(n):
        without = masks[(masks >> i & 1) == 0]
        phi[i] = np.sum(table[without | (1 << i)] - table[without]) / 2 ** (n - 1)
    return phi


def exact_shapley_bruteforce(
    train: TabularDataset, test: TabularDataset, tconfig: TrainConfig = TrainConfig(), banzhaf: bool = False
) -> ValueVector | tuple[ValueVector, ValueVector]:
    """Exact Shapley (and optionally Banzhaf) values of the accuracy utility."""
    if train.n > MAX_EXACT_N:
        raise TooLarge(f"exact enumeration limited to n <= {MAX_EXACT_N}, got {train.n}")
    utility = Utility(train, test, tconfig)
    table = utility_table(utility, train.n)
    digest = config_digest(tconfig.to_dict())
    common = dict(
        seed=tconfig.seed, n_samples=1 << train.n, config_digest=digest,
        utility_full=float(table[-1]), utility_empty=float(table[0]),
    )
    shap = ValueVector(train.datum_ids, shapley_from_table(table, train.n), "exact_shapley", **common)
    if not banzhaf:
        return shap
    return shap, ValueVector(train.datum_ids, banzhaf_from_table(table, train.n), "exact_banzhaf", **common)


def class_conditional_utility(correct: np.ndarray | None, test_y: np.ndarray, c: int, n_classes: int) -> float:
    """In-class accuracy times exp(out-of-class accuracy).

    An empty training set scores 1/K on both parts, matching V(empty).
    A stratum with no test points contributes accuracy 0.
    """
    if correct is None:
        a_in = a_out = 1.0 / n_classes
    else:
        inside = test_y == c
        a_in = float(correct[inside].mean()) if inside.any() else 0.0
        a_out = float(correct[~inside].mean()) if (~inside).any() else 0.0
    return a_in * float(np.exp(a_out))


def check_classes(utility: Utility) -> None:
    present = set(np.unique(utility.y).tolist())
    needed = present | set(np.unique(utility.test_y).tolist())
    if len(needed) < 2:
        raise MissingClass("CS-Shapley needs at least two classes")
    absent = sorted(needed - present)
    if absent:
        raise MissingClass(f"classes {absent} are absent from the training set")


def exact_cs_shapley(train: TabularDataset, test: TabularDataset, tconfig: TrainConfig = TrainConfig()) -> ValueVector:
    """Exhaustive class-wise Shapley under the in-class/out-of-class utility.

    For datum i of class c: average over every out-of-class conditioning set
    (weight 2^-|D_-c|) of the in-class Shapley value, where in-class
    coalitions S of size s get weight 1 / (n_c * C(n_c - 1, s)).
    """
    if train.n > MAX_EXACT_N:
        raise TooLarge(f"exact enumeration limited to n <= {MAX_EXACT_N}, got {train.n}")
    utility = Utility(train, test, tconfig)
    check_classes(utility)
    values = np.zeros(train.n)
    for c in np.unique(utility.y):
        inside = np.nonzero(utility.y == c)[0]
        outside = np.nonzero(utility.y != c)[0]
        n_c, n_o = len(inside), len(outside)
        for out_mask in range(1 << n_o):
            cond = [outside[b] for b in range(n_o) if out_mask >> b & 1]
            table = np.array([
                class_conditional_utility(
                    utility.correct(cond + [inside[b] for b in range(n_c) if m >> b & 1]),
                    utility.test_y, int(c), utility.n_classes,
                )
                for m in range(1 << n_c)
            ])
            for b, pos in enumerate(inside):
                total = 0.0
                for m in range(1 << n_c):
                    if m >> b & 1:
                        continue
                    s = bin(m).count("1")
                    total += (table[m | 1 << b] - table[m]) / (n_c * comb(n_c - 1, s))
                values[pos] += total / (1 << n_o)
    return ValueVector(
        train.datum_ids, values, "exact_cs_shapley", seed=tconfig.seed,
        config_digest=config_digest(tconfig.to_dict()),
        utility_full=utility.full(), utility_empty=utility.empty,
    )
