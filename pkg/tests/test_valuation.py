"""Valuation techniques checked against independent enumeration oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from conftest import blobs, make_dataset, memo, permutation_shapley
from hypothesis import given, settings
from hypothesis import strategies as st

from dvalaudit.errors import EmptyStratum, InsufficientSamples, MissingClass, TooLarge
from dvalaudit.learners import TrainConfig
from dvalaudit.valuation import (
    Utility,
    ValuationConfig,
    ValueVector,
    banzhaf_from_table,
    exact_cs_shapley,
    exact_shapley_bruteforce,
    fairshap_aggregate,
    g_shapley_marginals,
    knn_shapley_matrix,
    knn_soft_utility,
    msr_estimate,
    shapley_from_table,
    tmc_marginals,
    utility_table,
    value_banzhaf,
    value_cs_shapley,
    value_fairshap,
    value_g_shapley,
    value_loo,
    value_tmc_shapley,
)
from dvalaudit.valuation.montecarlo import cs_round, permutation_rng

FAST = TrainConfig(max_iter=200)


def subset_banzhaf(utility, n: int) -> np.ndarray:
    """Banzhaf values by looping over every coalition of the other n - 1 players."""
    phi = np.zeros(n)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        for r in range(n):
            for s in itertools.combinations(others, r):
                phi[i] += utility(list(s) + [i]) - utility(list(s))
        phi[i] /= 2 ** (n - 1)
    return phi


def random_game(n: int, seed: int):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=1 << n)
    return lambda s: float(table[sum(1 << int(p) for p in set(s))])


# ---------------------------------------------------------------- exact semivalues


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_shapley_table_matches_permutation_oracle(n, seed):
    game = random_game(n, seed)
    table = utility_table(game, n)
    np.testing.assert_allclose(shapley_from_table(table, n), permutation_shapley(game, n), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_banzhaf_table_matches_subset_oracle(n, seed):
    game = random_game(n, seed)
    table = utility_table(game, n)
    np.testing.assert_allclose(banzhaf_from_table(table, n), subset_banzhaf(game, n), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_shapley_efficiency_and_linearity(n, seed):
    u, v = random_game(n, seed), random_game(n, seed + 1)
    tu, tv = utility_table(u, n), utility_table(v, n)
    phi_u = shapley_from_table(tu, n)
    assert phi_u.sum() == pytest.approx(tu[-1] - tu[0], abs=1e-9)
    np.testing.assert_allclose(shapley_from_table(2.0 * tu + tv, n), 2.0 * phi_u + shapley_from_table(tv, n), atol=1e-12)


def test_null_player_gets_zero():
    base = random_game(3, 1)

    def game(s):  # player 3 never changes the utility
        return base([p for p in s if p != 3])

    table = utility_table(game, 4)
    assert shapley_from_table(table, 4)[3] == pytest.approx(0.0, abs=1e-12)
    assert banzhaf_from_table(table, 4)[3] == pytest.approx(0.0, abs=1e-12)


def test_symmetric_players_get_equal_value():
    def game(s):  # depends on player 0 and 1 only through their count
        s = set(s)
        return 0.3 * len(s & {0, 1}) ** 2 + 0.7 * (2 in s) - 0.2 * (3 in s) * (2 in s) + 0.05 * len(s)

    table = utility_table(game, 4)
    phi = shapley_from_table(table, 4)
    assert abs(phi[0] - phi[1]) < 1e-12


def test_exact_on_accuracy_utility_matches_oracle(small_blobs):
    train, test = small_blobs
    train = train.replace(features=train.features[:6], labels=train.labels[:6], datum_ids=train.datum_ids[:6])
    shap, banz = exact_shapley_bruteforce(train, test, FAST, banzhaf=True)
    utility = memo(Utility(train, test, FAST))
    np.testing.assert_allclose(shap.values, permutation_shapley(utility, 6), atol=1e-12)
    np.testing.assert_allclose(banz.values, subset_banzhaf(utility, 6), atol=1e-12)
    assert shap.values.sum() == pytest.approx(shap.utility_full - shap.utility_empty, abs=1e-9)
    assert shap.utility_empty == 0.5


def test_single_datum_value_is_its_own_marginal(small_blobs):
    _, test = small_blobs
    train = make_dataset([[1.0, 1.0]], [1], class_names=["0", "1"])
    shap = exact_shapley_bruteforce(train, test, FAST)
    assert shap.values[0] == pytest.approx(shap.utility_full - 0.5, abs=1e-12)


def test_exact_refuses_large_n():
    with pytest.raises(TooLarge):
        utility_table(lambda s: 0.0, 15)


def test_duplicated_points_are_symmetric():
    train = make_dataset([[0.0], [0.0], [2.0], [-2.0], [1.0]], [1, 1, 1, 0, 0], ids=[10, 11, 12, 13, 14])
    test = blobs(20, seed=9, d=1)
    shap = exact_shapley_bruteforce(train, test, FAST)
    assert abs(shap.values[0] - shap.values[1]) < 1e-12


# ---------------------------------------------------------------- LOO


def test_loo_of_duplicates_is_symmetric():
    # Dropping one copy still reweights the loss, so the values need not be 0,
    # but both copies must receive the same value.
    base = blobs(10, seed=2)
    x = np.vstack([base.features, base.features])
    y = np.concatenate([base.labels, base.labels])
    train = make_dataset(x, y)
    test = blobs(30, seed=5, ids_from=1000)
    loo = value_loo(train, test, FAST)
    np.testing.assert_allclose(loo.values[:10], loo.values[10:], atol=1e-12)
    assert loo.n_samples == train.n + 1


def test_loo_matches_direct_retraining(small_blobs):
    train, test = small_blobs
    loo = value_loo(train, test, FAST)
    utility = Utility(train, test, FAST)
    everyone = list(range(train.n))
    expected = [utility(everyone) - utility([j for j in everyone if j != i]) for i in everyone]
    np.testing.assert_allclose(loo.values, expected, atol=1e-12)


# ---------------------------------------------------------------- TMC


def test_tmc_zero_tolerance_telescopes(small_blobs):
    train, test = small_blobs
    utility = Utility(train, test, FAST)
    v_full = utility.full()
    for t in range(5):
        perm = permutation_rng(0, t).permutation(train.n)
        marg = tmc_marginals(utility, perm, 0.0, v_full)
        assert marg.sum() == pytest.approx(v_full - utility.empty, abs=1e-12)


def test_tmc_infinite_tolerance_keeps_only_first_marginal(small_blobs):
    train, test = small_blobs
    utility = Utility(train, test, FAST)
    perm = permutation_rng(0, 3).permutation(train.n)
    marg = tmc_marginals(utility, perm, float("inf"), utility.full())
    assert np.count_nonzero(np.delete(marg, perm[0])) == 0
    assert marg[perm[0]] == pytest.approx(utility([perm[0]]) - utility.empty)


def test_tmc_converges_to_exact_shapley():
    train = blobs(6, seed=11)
    test = blobs(40, seed=12, ids_from=100)
    exact = exact_shapley_bruteforce(train, test, FAST)
    est = value_tmc_shapley(train, test, ValuationConfig(n_permutations=720, truncation_tolerance=0.0), FAST)
    assert np.max(np.abs(est.values - exact.values)) < 4 * max(np.max(est.stderr), 1e-3)
    assert est.values.sum() == pytest.approx(exact.values.sum(), abs=1e-9)


def test_tmc_standard_errors_are_calibrated():
    # Pooled over independent seeds, (estimate - exact) / SE should look standard normal.
    train = blobs(6, seed=11, sep=0.8)
    test = blobs(40, seed=12, ids_from=100, sep=0.8)
    utility = Utility(train, test, FAST)
    exact = shapley_from_table(utility_table(utility, 6), 6)
    z = np.concatenate([
        (est.values - exact) / est.stderr
        for est in (value_tmc_shapley(train, test, ValuationConfig(n_permutations=500, truncation_tolerance=0.0,
                                                                    seed=s), FAST, utility=utility)
                    for s in range(30))
    ])
    assert abs(z.mean()) < 0.3
    assert 0.8 < z.std() < 1.2
    assert np.mean(np.abs(z) <= 2) >= 0.9


def test_tmc_is_independent_of_n_jobs(small_blobs):
    train, test = small_blobs
    vc = ValuationConfig(n_permutations=60, seed=4)
    a = value_tmc_shapley(train, test, vc, FAST, n_jobs=1)
    b = value_tmc_shapley(train, test, vc, FAST, n_jobs=2)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.to_csv() == b.to_csv()


def test_tmc_convergence_threshold_stops_early(small_blobs):
    train, test = small_blobs
    vc = ValuationConfig(n_permutations=500, convergence_threshold=0.05)
    vv = value_tmc_shapley(train, test, vc, FAST)
    assert 20 <= vv.n_samples < 500


# ---------------------------------------------------------------- G-Shapley


def test_gshapley_zero_learning_rate_gives_zero(small_blobs):
    train, test = small_blobs
    vv = value_g_shapley(train, test, ValuationConfig(n_permutations=20), learning_rate=0.0, tconfig=FAST)
    np.testing.assert_array_equal(vv.values, 0.0)


@pytest.mark.parametrize("index", [0, 1, 7])
def test_gshapley_marginals_telescope(small_blobs, index):
    train, test = small_blobs
    marg, acc0, acc1 = g_shapley_marginals(train, test, 0.5, seed=3, index=index)
    assert marg.sum() == pytest.approx(acc1 - acc0, abs=1e-12)


def test_gshapley_is_independent_of_n_jobs(small_blobs):
    train, test = small_blobs
    vc = ValuationConfig(n_permutations=120, seed=2)
    a = value_g_shapley(train, test, vc, tconfig=FAST, n_jobs=1)
    b = value_g_shapley(train, test, vc, tconfig=FAST, n_jobs=2)
    assert a.values.tobytes() == b.values.tobytes()


# ---------------------------------------------------------------- Banzhaf


def test_banzhaf_exact_mode_matches_oracle(small_blobs):
    train, test = small_blobs
    vv = value_banzhaf(train, test, ValuationConfig(banzhaf_mode="auto"), FAST)
    assert vv.extra["mode"] == "exact"
    np.testing.assert_allclose(vv.values, subset_banzhaf(memo(Utility(train, test, FAST)), train.n), atol=1e-12)


def test_msr_constant_utility_is_zero():
    rng = np.random.default_rng(0)
    incl = rng.random((200, 7)) < 0.5
    values, se, n_in, n_out = msr_estimate(incl, np.full(200, 0.42))
    np.testing.assert_allclose(values, 0.0, atol=1e-12)
    np.testing.assert_allclose(se, 0.0, atol=1e-12)
    np.testing.assert_array_equal(n_in + n_out, 200)


def test_msr_recovers_additive_game():
    rng = np.random.default_rng(1)
    weights = np.array([0.5, -0.2, 0.0, 1.0, 0.3])
    incl = rng.random((4000, 5)) < 0.5
    values, se, _, _ = msr_estimate(incl, incl @ weights)
    assert np.all(np.abs(values - weights) < 4 * se + 1e-9)


def test_msr_empty_bucket_raises():
    incl = np.ones((5, 3), dtype=bool)
    with pytest.raises(InsufficientSamples):
        msr_estimate(incl, np.zeros(5))


def test_banzhaf_msr_within_stderr_of_exact():
    train = blobs(8, seed=21)
    test = blobs(40, seed=22, ids_from=100)
    exact = value_banzhaf(train, test, ValuationConfig(banzhaf_mode="exact"), FAST)
    msr = value_banzhaf(train, test, ValuationConfig(banzhaf_mode="msr", banzhaf_n_subsets=2000), FAST)
    assert msr.extra["mode"] == "msr"
    assert np.all(np.abs(msr.values - exact.values) < 5 * msr.stderr + 1e-9)


# ---------------------------------------------------------------- CS-Shapley


def cs_oracle(utility: Utility) -> np.ndarray:
    """Average in-class marginals over every conditioning set and every in-class ordering."""
    from dvalaudit.valuation import class_conditional_utility

    values = np.zeros(utility.n)
    for c in np.unique(utility.y):
        inside = list(np.nonzero(utility.y == c)[0])
        outside = list(np.nonzero(utility.y != c)[0])

        def v(s, c=c):
            return class_conditional_utility(utility.correct(list(s)), utility.test_y, int(c), utility.n_classes)

        n_sets = 0
        for r in range(len(outside) + 1):
            for cond in itertools.combinations(outside, r):
                n_sets += 1
                for perm in itertools.permutations(inside):
                    prefix = list(cond)
                    prev = v(prefix)
                    for i in perm:
                        prefix.append(i)
                        cur = v(prefix)
                        values[i] += (cur - prev) / math.factorial(len(inside))
                        prev = cur
        values[inside] /= n_sets
    return values


def test_exact_cs_matches_enumeration_oracle():
    train = blobs(7, seed=31)
    test = blobs(30, seed=32, ids_from=100)
    exact = exact_cs_shapley(train, test, FAST)
    np.testing.assert_allclose(exact.values, cs_oracle(Utility(train, test, FAST)), atol=1e-12)


def test_cs_round_telescopes_within_class(small_blobs):
    from dvalaudit.valuation import class_conditional_utility

    train, test = small_blobs
    utility = Utility(train, test, FAST)
    for c in (0, 1):
        rng_a, rng_b = permutation_rng(5, 0, c), permutation_rng(5, 0, c)
        marg = cs_round(utility, c, rng_a)
        outside = np.nonzero(utility.y != c)[0]
        cond = outside[rng_b.random(len(outside)) < 0.5]
        v_full = class_conditional_utility(
            utility.correct(np.concatenate([cond, np.nonzero(utility.y == c)[0]])), utility.test_y, c, 2
        )
        v_cond = class_conditional_utility(utility.correct(cond), utility.test_y, c, 2)
        assert marg.sum() == pytest.approx(v_full - v_cond, abs=1e-12)


def test_cs_sampling_close_to_exact():
    train = blobs(6, seed=41)
    test = blobs(40, seed=42, ids_from=100)
    exact = exact_cs_shapley(train, test, FAST)
    est = value_cs_shapley(train, test, ValuationConfig(n_permutations=400), FAST)
    assert np.all(np.abs(est.values - exact.values) < 5 * est.stderr + 1e-3)


def test_cs_missing_class_raises():
    train = make_dataset([[0.0], [1.0], [2.0]], [0, 0, 0], class_names=["0", "1"])
    test = make_dataset([[0.0], [1.0]], [0, 1])
    with pytest.raises(MissingClass):
        value_cs_shapley(train, test, ValuationConfig(n_permutations=2), FAST)


# ---------------------------------------------------------------- kNN-Shapley and FairShap


def brute_knn_utility(x, y, ids, query, label, k):
    """Independent soft kNN utility: sort by (distance, datum_id) with plain Python."""

    def u(s):
        s = list(s)
        if not s:
            return 0.0
        ranked = sorted(s, key=lambda p: (float(np.sum((x[p] - query) ** 2)), int(ids[p])))
        return sum(int(y[p] == label) for p in ranked[:k]) / k

    return u


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_knn_recursion_matches_bruteforce(k, seed):
    train = blobs(7, seed=seed, sep=0.5)
    test = blobs(3, seed=seed + 50, ids_from=100)
    matrix = knn_shapley_matrix(train, test, k)
    for j in range(test.n):
        oracle = brute_knn_utility(train.features, train.labels, train.datum_ids, test.features[j], test.labels[j], k)
        np.testing.assert_allclose(matrix.phi[:, j], permutation_shapley(memo(oracle), train.n), atol=1e-12)
        pkg = knn_soft_utility(train.features, train.labels, train.datum_ids, test.features[j], test.labels[j], k)
        for r in range(train.n + 1):
            for s in itertools.combinations(range(train.n), r):
                assert pkg(s) == oracle(s)


def test_knn_columns_sum_to_full_utility():
    train = blobs(20, seed=3)
    test = blobs(10, seed=4, ids_from=100)
    k = 5
    matrix = knn_shapley_matrix(train, test, k)
    for j in range(test.n):
        u = brute_knn_utility(train.features, train.labels, train.datum_ids, test.features[j], test.labels[j], k)
        assert matrix.phi[:, j].sum() == pytest.approx(u(range(train.n)), abs=1e-12)


def test_knn_all_same_label_splits_evenly():
    rng = np.random.default_rng(0)
    train = make_dataset(rng.normal(size=(9, 2)), np.ones(9, dtype=int), class_names=["0", "1"])
    test = make_dataset(rng.normal(size=(4, 2)), np.ones(4, dtype=int), class_names=["0", "1"])
    k = 3
    matrix = knn_shapley_matrix(train, test, k)
    np.testing.assert_allclose(matrix.phi, 1.0 / train.n, atol=1e-12)


def test_knn_invariant_to_row_order():
    train = blobs(12, seed=7)
    test = blobs(6, seed=8, ids_from=100)
    perm = np.random.default_rng(1).permutation(train.n)
    shuffled = train.replace(features=train.features[perm], labels=train.labels[perm], datum_ids=train.datum_ids[perm])
    a = value_fairshap(train, test, k=3).as_dict()
    b = value_fairshap(shuffled, test, k=3).as_dict()
    assert a.keys() == b.keys()
    assert all(abs(a[i] - b[i]) < 1e-12 for i in a)


def test_fairshap_variants_against_hand_aggregation():
    rng = np.random.default_rng(3)
    from dvalaudit.valuation import TestContributionMatrix

    phi = rng.normal(size=(5, 8))
    labels = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    groups = np.array([1, 0, 1, 0, 1, 0, 1, 0])
    matrix = TestContributionMatrix(phi, 3, np.arange(5), np.arange(8))
    tpr = phi[:, [0, 2]].mean(axis=1) - phi[:, [1, 3]].mean(axis=1)
    fpr = -phi[:, [4, 6]].mean(axis=1) + phi[:, [5, 7]].mean(axis=1)
    agg = lambda v: fairshap_aggregate(matrix, labels, groups, v)  # noqa: E731
    np.testing.assert_allclose(agg("SVAcc"), phi.mean(axis=1), atol=1e-12)
    np.testing.assert_allclose(agg("SVEOp"), tpr, atol=1e-12)
    np.testing.assert_allclose(agg("SVOdds"), 0.5 * (tpr + fpr), atol=1e-12)
    np.testing.assert_allclose(agg("SVOdds2"), 0.5 * (np.abs(tpr) + np.abs(fpr)), atol=1e-12)


def test_fairshap_identical_groups_give_zero():
    train = blobs(10, seed=5)
    base = blobs(6, seed=6, ids_from=100)
    x = np.vstack([base.features, base.features])
    y = np.concatenate([base.labels, base.labels])
    test = make_dataset(x, y, ids=np.arange(200, 212))
    groups = np.repeat([0, 1], 6)
    for variant in ("SVEOp", "SVOdds", "SVOdds2"):
        vv = value_fairshap(train, test, k=3, variant=variant, test_groups=groups)
        np.testing.assert_allclose(vv.values, 0.0, atol=1e-12)


def test_fairshap_empty_stratum_raises():
    train = blobs(10, seed=5)
    test = blobs(6, seed=6, ids_from=100)
    with pytest.raises(EmptyStratum):
        value_fairshap(train, test, k=3, variant="SVEOp", test_groups=np.zeros(6, dtype=int))


# ---------------------------------------------------------------- ValueVector


def test_value_vector_round_trip(tmp_path):
    vv = ValueVector(
        np.array([5, 2, 9]), np.array([0.1, -1e-17, 1 / 3]), "tmc", seed=7, n_samples=100,
        config_digest="abc", utility_full=0.9, utility_empty=0.5, flags=("note",), extra={"mode": "x"},
    )
    csv_path, json_path = vv.save(tmp_path / "v.csv")
    assert json_path.exists()
    back = ValueVector.load(csv_path)
    assert back.values.tobytes() == vv.values.tobytes()
    np.testing.assert_array_equal(back.ids, vv.ids)
    assert (back.technique, back.seed, back.n_samples, back.flags) == ("tmc", 7, 100, ("note",))
    assert back.to_csv() == vv.to_csv()


def test_value_vector_rejects_bad_input():
    with pytest.raises(ValueError):
        ValueVector(np.array([1, 1]), np.array([0.0, 1.0]), "loo")
    with pytest.raises(ValueError):
        ValueVector(np.array([1, 2]), np.array([0.0, np.nan]), "loo")
