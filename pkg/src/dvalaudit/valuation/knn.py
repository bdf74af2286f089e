"""Closed-form kNN-Shapley contributions and the FairShap aggregations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import TabularDataset
from ..errors import EmptyStratum
from ..learners import knn_order
from .values import ValueVector, config_digest

FAIRSHAP_VARIANTS = ("SVAcc", "SVEOp", "SVOdds", "SVOdds2")


@dataclass(frozen=True, eq=False)
class TestContributionMatrix:
    """``phi[i, j]``: contribution of train datum i to classifying test point j."""

    phi: np.ndarray
    k: int
    train_ids: np.ndarray
    test_ids: np.ndarray


def knn_column(train_x, train_y, train_ids, query, label, k) -> np.ndarray:
    """Exact Shapley values of the soft kNN utility for one test point.

    Train points are ranked by distance (ties by datum_id). The farthest gets
    match/n and each step inward adds (match_i - match_{i+1}) / max(k, rank).
    """
    n = len(train_y)
    order = knn_order(train_x, train_ids, query)
    match = (train_y[order] == label).astype(float)
    s = np.empty(n)
    s[n - 1] = match[n - 1] / n
    for i in range(n - 2, -1, -1):
        s[i] = s[i + 1] + (match[i] - match[i + 1]) / max(k, i + 1)
    column = np.empty(n)
    column[order] = s
    return column


def knn_shapley_matrix(train: TabularDataset, test: TabularDataset, k: int) -> TestContributionMatrix:
    if not 1 <= k <= train.n:
        raise ValueError(f"k must lie in [1, {train.n}], got {k}")
    x = np.asarray(train.features, dtype=float)
    phi = np.empty((train.n, test.n))
    for j in range(test.n):
        phi[:, j] = knn_column(x, train.labels, train.datum_ids, test.features[j], test.labels[j], k)
    return TestContributionMatrix(phi, k, train.datum_ids.copy(), test.datum_ids.copy())


def knn_soft_utility(train_x, train_y, train_ids, query, label, k):
    """U(S) = (1/k) * number of correctly labelled points among S's nearest min(k, |S|)."""

    def utility(positions) -> float:
        positions = np.asarray(sorted(positions), dtype=np.int64)
        if len(positions) == 0:
            return 0.0
        order = knn_order(train_x[positions], train_ids[positions], query)
        top = positions[order[:k]]
        return float(np.sum(train_y[top] == label)) / k

    return utility


def _stratum_mean(phi, select, name):
    if not select.any():
        raise EmptyStratum(f"no test points in stratum {name}")
    return phi[:, select].mean(axis=1)


def fairshap_aggregate(
    matrix: TestContributionMatrix,
    test_labels: np.ndarray,
    test_groups: np.ndarray | None = None,
    variant: str = "SVAcc",
    positive_label: int = 1,
) -> np.ndarray:
    """Aggregate per-test-point contributions into per-datum values.

    SVAcc is the mean over test points. The fairness variants take
    group-conditional means over label strata: the TPR term uses positive
    test points; the FPR term uses negative points, where a contribution to
    correct classification lowers the false-positive rate, hence the sign flip.
    """
    if variant not in FAIRSHAP_VARIANTS:
        raise ValueError(f"variant must be one of {FAIRSHAP_VARIANTS}")
    phi = matrix.phi
    if variant == "SVAcc":
        return phi.mean(axis=1)
    if test_groups is None:
        raise ValueError(f"{variant} needs test group memberships")
    labels = np.asarray(test_labels) == positive_label
    groups = np.asarray(test_groups)
    if not set(np.unique(groups).tolist()) <= {0, 1}:
        raise ValueError("fairness variants need binary (0/1) groups")
    g1, g0 = groups == 1, groups == 0
    tpr = _stratum_mean(phi, labels & g1, "positive/group 1") - _stratum_mean(phi, labels & g0, "positive/group 0")
    if variant == "SVEOp":
        return tpr
    fpr = -_stratum_mean(phi, ~labels & g1, "negative/group 1") + _stratum_mean(phi, ~labels & g0, "negative/group 0")
    if variant == "SVOdds":
        return 0.5 * (tpr + fpr)
    return 0.5 * (np.abs(tpr) + np.abs(fpr))


def value_fairshap(
    train: TabularDataset,
    test: TabularDataset,
    k: int = 5,
    variant: str = "SVAcc",
    test_groups: np.ndarray | None = None,
    positive_label: int = 1,
) -> ValueVector:
    matrix = knn_shapley_matrix(train, test, k)
    values = fairshap_aggregate(matrix, test.labels, test_groups, variant, positive_label)
    return ValueVector(
        train.datum_ids, values, "fairshap", n_samples=test.n,
        config_digest=config_digest({"technique": "fairshap", "k": k, "variant": variant}),
        utility_full=float(matrix.phi.sum(axis=0).mean()), utility_empty=0.0,
        extra={"variant": variant, "k": k},
    )
