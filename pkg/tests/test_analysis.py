"""Balance metrics, rank comparison, subsampling and the condition tables."""

from __future__ import annotations

import warnings
from fractions import Fraction

import numpy as np
import pytest
import scipy.stats
from conftest import blobs, imbalanced, make_dataset
from hypothesis import given, settings
from hypothesis import strategies as st

from dvalaudit.analysis import (
    ConditionReport,
    SensitiveAttribute,
    UndefinedRateWarning,
    class_balance,
    condition_1,
    condition_2,
    condition_3,
    condition_4,
    eod,
    group_balance,
    indicator_report,
    kendall_tau,
    kendall_tau_b,
    overlap_fraction,
    removal_order,
    selection,
    subsample_by_value,
    subsampling_curve,
    tau_matrix_csv,
    tidy_csv,
)
from dvalaudit.data import DatasetSchema, subset
from dvalaudit.errors import EmptySet, MissingBaseline, SingleGroup, TooFewCommon
from dvalaudit.learners import TrainConfig, accuracy, train_logreg
from dvalaudit.valuation import ValueVector

FAST = TrainConfig(max_iter=200)


def vv(values, ids=None, technique="tmc"):
    values = np.asarray(values, dtype=float)
    ids = np.arange(len(values)) if ids is None else np.asarray(ids)
    return ValueVector(ids, values, technique)


# ---------------------------------------------------------------- class and group balance


def test_class_balance_balanced():
    assert class_balance([0, 1, 0, 1], [0, 1]) == 1.0


def test_class_balance_skewed_split():
    train = [0] * 913 + [1] * 87
    assert class_balance(train, [0, 1]) == pytest.approx(87 / 913)
    assert class_balance(train, [0, 1]) == pytest.approx(0.0953, abs=5e-5)


def test_class_balance_guard_for_absent_class():
    assert class_balance([0, 0, 0], [0, 1]) == 0.0


def test_class_balance_multiclass_uses_extremes():
    assert class_balance([0, 0, 0, 0, 1, 1, 2], [0, 1, 2]) == pytest.approx(1 / 4)


def test_class_balance_rejects_empty_test():
    with pytest.raises(ValueError):
        class_balance([0, 1], [])


@pytest.mark.parametrize("attr,expected", [
    (["F", "F", "M", "M"], 1.0),
    (["F", "M", "M", "M"], 1 / 3),
    (["M", "M"], 0.0),
])
def test_group_balance_examples(attr, expected):
    assert group_balance(attr) == pytest.approx(expected)


# ---------------------------------------------------------------- EOD


def test_eod_zero_for_identical_groups():
    labels = np.array([1, 0, 1, 0])
    preds = np.array([1, 0, 0, 1])
    assert eod(np.tile(preds, 2), np.tile(labels, 2), np.repeat([0, 1], 4)) == 0.0


def test_eod_extreme_tpr_disparity():
    labels = np.array([1, 1, 0, 0, 1, 1, 0, 0])
    group = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    preds = np.array([1, 1, 0, 0, 0, 0, 0, 0])
    assert eod(preds, labels, group) == 1.0


def test_eod_takes_the_larger_gap():
    # group 1: TPR 3/5, FPR 1/2 ; group 0: TPR 2/5, FPR 0/2
    labels = np.array([1] * 5 + [0] * 2 + [1] * 5 + [0] * 2)
    group = np.array([1] * 7 + [0] * 7)
    preds = np.array([1, 1, 1, 0, 0, 1, 0] + [1, 1, 0, 0, 0, 0, 0])
    assert eod(preds, labels, group) == pytest.approx(0.5)


def test_eod_single_group_raises():
    with pytest.raises(SingleGroup):
        eod([1, 0], [1, 0], [1, 1])


def test_eod_empty_stratum_warns():
    with pytest.warns(UndefinedRateWarning):
        value = eod([1, 0, 1], [1, 1, 0], [1, 0, 0])
    assert 0.0 <= value <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=40))
def test_metrics_stay_in_unit_interval(rows):
    preds, labels, group = map(np.array, zip(*rows))
    if len(np.unique(group)) == 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedRateWarning)
            assert 0.0 <= eod(preds, labels, group) <= 1.0
    assert 0.0 <= group_balance(group) <= 1.0
    assert 0.0 <= class_balance(labels, labels) <= 1.0


# ---------------------------------------------------------------- Kendall tau


def test_tau_hand_cases():
    assert kendall_tau_b([1, 2, 3, 4], [1, 2, 3, 4])[0] == pytest.approx(1.0)
    assert kendall_tau_b([1, 2, 3, 4], [4, 3, 2, 1])[0] == pytest.approx(-1.0)
    assert kendall_tau_b([1, 2, 3, 4], [1, 3, 2, 4])[0] == pytest.approx(2 / 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 40), st.integers(0, 10_000), st.integers(2, 8))
def test_tau_matches_scipy(n, seed, levels):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, levels, n).astype(float)
    y = rng.integers(0, levels, n).astype(float) + 0.5 * x
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tau, p = kendall_tau_b(x, y)
        ref = scipy.stats.kendalltau(x, y, variant="b", method="asymptotic")
    if np.isnan(ref.statistic):
        assert (tau, p) == (0.0, 1.0)
    else:
        assert tau == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-300)


def test_kendall_tau_uses_common_ids():
    a = vv([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], ids=[1, 2, 3, 4, 5, 6])
    b = vv([6, 5, 4, 3, 2, 1, 0, -1], ids=[1, 2, 3, 4, 5, 6, 7, 8])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rc = kendall_tau(a, b)
    assert rc.n_common == 6
    assert rc.tau == pytest.approx(-1.0)


def test_kendall_tau_too_few_common():
    with pytest.raises(TooFewCommon):
        kendall_tau(vv([1, 2, 3]), vv([1, 2, 3], ids=[2, 3, 4]))


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 30), st.integers(0, 10_000))
def test_tau_symmetric_and_rank_invariant(n, seed):
    rng = np.random.default_rng(seed)
    a = vv(rng.normal(size=n))
    b = vv(rng.normal(size=n))
    transformed = vv(np.exp(3 * a.values) + 7)
    assert kendall_tau(a, b) == kendall_tau(b, a)
    assert kendall_tau(a, a).tau == pytest.approx(1.0)
    assert kendall_tau(transformed, b) == kendall_tau(a, b)
    for direction in ("drop_low", "drop_high"):
        assert subsample_by_value(a, 0.3, direction) == subsample_by_value(transformed, 0.3, direction)


def test_tau_matrix_csv_layout():
    a = vv(np.arange(12.0))
    b = vv(np.arange(12.0)[::-1])
    text = tau_matrix_csv(["x", "y"], [a, b])
    lines = text.strip().split("\n")
    assert lines[0] == "method_a,method_b,tau,p_value,n_common"
    assert len(lines) == 5
    assert lines[2].startswith("x,y,-1.0,")


# ---------------------------------------------------------------- subsampling and overlap


def test_subsample_examples():
    values = vv([1, 2, 3, 4, 5], ids=[10, 11, 12, 13, 14])
    assert subsample_by_value(values, 0.0, "drop_low") == [10, 11, 12, 13, 14]
    assert subsample_by_value(values, 0.2, "drop_low") == [11, 12, 13, 14]
    assert subsample_by_value(values, 0.2, "drop_high") == [10, 11, 12, 13]
    equal = vv([0.5] * 5, ids=[14, 12, 10, 13, 11])
    assert subsample_by_value(equal, 0.4, "drop_low") == [12, 13, 14]
    assert subsample_by_value(equal, 0.4, "drop_high") == [12, 13, 14]


def test_subsample_removes_floor_count():
    values = vv(np.arange(7.0))
    assert len(subsample_by_value(values, 0.3, "drop_low")) == 7 - 2
    with pytest.raises(ValueError):
        subsample_by_value(values, 1.0, "drop_low")
    with pytest.raises(ValueError):
        removal_order(values, "sideways")


def test_selection_is_complement_of_subsample():
    values = vv(np.random.default_rng(0).normal(size=20))
    high = selection(values, 0.25, "high")
    assert len(high) == 5
    assert set(high).isdisjoint(subsample_by_value(values, 0.25, "drop_high"))


def test_overlap_examples():
    assert overlap_fraction([1, 2, 3], [3, 2, 1]) == 100.0
    assert overlap_fraction([1, 2], [3, 4]) == 0.0
    assert overlap_fraction(range(10), [0, 1, 2, 3, 4, 5, 6, 20, 21]) == pytest.approx(70.0)
    with pytest.raises(EmptySet):
        overlap_fraction([], [1])


# ---------------------------------------------------------------- curves


def test_curve_at_zero_matches_full_data():
    train = imbalanced(120, seed=1, minority=0.2)
    sex = (np.arange(train.n) % 3 == 0).astype(float)
    train = train.replace(features=np.column_stack([train.features, sex]), feature_names=(*train.feature_names, "sex"))
    test = imbalanced(60, seed=2, minority=0.2)
    tsex = (np.arange(test.n) % 2).astype(float)
    test = test.replace(
        features=np.column_stack([test.features, tsex]), feature_names=(*test.feature_names, "sex"),
        datum_ids=np.arange(1000, 1060),
    )
    values = vv(np.random.default_rng(0).normal(size=train.n), ids=train.datum_ids)
    schema = DatasetSchema(target_column="y", sensitive_columns=("sex",), positive_label="1")
    both = train.replace(
        features=np.vstack([train.features, test.features]),
        labels=np.concatenate([train.labels, test.labels]),
        datum_ids=np.concatenate([train.datum_ids, test.datum_ids]),
    )
    curve = subsampling_curve(train, test, values, [0.0, 0.2], "drop_low", FAST, schema, reference=both)
    first = curve.series[0]
    model = train_logreg(train, FAST)
    preds = model.predict(test.features)
    assert first["accuracy"] == accuracy(model, test).accuracy
    assert first["class_balance"] == class_balance(train.labels, test.labels)
    assert first["eod[sex]"] == eod(preds, test.labels, tsex.astype(int))
    assert first["group_balance[sex]"] == group_balance(sex)
    second = curve.series[1]
    sub = subset(train, subsample_by_value(values, 0.2, "drop_low"))
    assert second["class_balance"] == class_balance(sub.labels, test.labels)
    rows = curve.tidy_rows(dataset="d")
    assert {r["metric"] for r in rows} == {"accuracy", "class_balance", "eod[sex]", "group_balance[sex]"}
    assert len(rows) == 8
    text = tidy_csv(rows, ["dataset", "fraction", "technique", "direction", "metric", "value"])
    assert text.count("\n") == 9


def test_curve_rejects_bad_fractions():
    train, test = blobs(10, 0), blobs(10, 1, ids_from=50)
    with pytest.raises(ValueError):
        subsampling_curve(train, test, vv(np.zeros(10)), [0.2, 0.1], "drop_low", FAST)


def test_sensitive_attribute_binarization():
    x = np.column_stack([np.arange(6.0), [0, 0, 1, 1, 1, 1]])
    ds = make_dataset(x, [0, 1, 0, 1, 0, 1], feature_names=["age", "sex"])
    sex = SensitiveAttribute.from_dataset(ds, "sex")
    assert [sex.binary[i] for i in range(6)] == [0, 0, 1, 1, 1, 1]
    age = SensitiveAttribute.from_dataset(ds, "age")
    assert [age.binary[i] for i in range(6)] == [0, 0, 0, 1, 1, 1]


# ---------------------------------------------------------------- conditions


def test_condition_1_strict_and_fractional():
    stats = {}
    for d in range(9):
        stats[(f"d{d}", "row_removal", "tmc", "MCAR-0.1")] = 0.5
        stats[(f"d{d}", "mean", "tmc", "MCAR-0.1")] = 0.6 if d < 5 else 0.5
    report = condition_1(stats)
    assert report.cells[("mean", "tmc", "MCAR-0.1")] == Fraction(5, 9)
    assert report.cells[("row_removal", "tmc", "MCAR-0.1")] == 0
    assert "(5/9)" in report.to_csv()


def test_condition_1_single_dataset_prints_fraction():
    stats = {("d", "row_removal", "loo", "m"): 0.1, ("d", "mean", "loo", "m"): 0.2}
    report = condition_1(stats)
    assert "(1/1)" in report.to_csv()


def test_condition_1_missing_baseline():
    with pytest.raises(MissingBaseline):
        condition_1({("d", "mean", "tmc", "m"): 0.2})


def test_condition_2_threshold_and_originals():
    b = {(f"d{i}", "mean", "tmc", "m"): v for i, v in enumerate([0.25, 0.3, 0.1, 0.2])}
    originals = {"d0": 0.3, "d1": 0.3, "d2": 0.05, "d3": 0.4}
    two_a, two_b = condition_2(b, originals)
    assert two_a.cells[("mean", "tmc", "m")] == Fraction(2, 4)
    assert two_b.cells[("mean", "tmc", "m")] == Fraction(2, 4)
    high = {(f"d{i}", "mean", "tmc", "m"): 0.5 for i in range(3)}
    assert condition_2(high, {f"d{i}": 0.4 for i in range(3)})[0].cells[("mean", "tmc", "m")] == 0


def test_conditions_3_and_4():
    assert condition_3(0.3, 0.3) == 0
    assert condition_3(0.1, 0.3) == 1
    assert condition_4(0.5, 0.8) == 1
    assert condition_4(0.8, 0.8) == 0


def test_indicator_report_table_layout():
    indicators = {
        ("d1", "mean", "tmc", "MCAR-0.1"): 1, ("d2", "mean", "tmc", "MCAR-0.1"): 0,
        ("d1", "mean", "loo", "MCAR-0.1"): 1, ("d2", "mean", "loo", "MCAR-0.1"): 1,
    }
    report = indicator_report("3[sex]_drop_low", indicators)
    assert isinstance(report, ConditionReport)
    text = report.to_csv(["loo", "tmc"])
    assert text.split("\n")[0] == '"condition_3[sex]_drop_low[loo,tmc]",MCAR-0.1'
    assert text.split("\n")[1] == 'mean,"(1/1,1/2)"'
