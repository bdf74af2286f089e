"""Stability, balance and fairness analysis of valuation-driven decisions."""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import Counter, defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import DatasetSchema, TabularDataset, subset
from .errors import (
    EmptyRetained,
    EmptySet,
    MissingBaseline,
    SingleGroup,
    TooFewCommon,
)
from .learners import TrainConfig, accuracy, train_logreg
from .valuation.values import ValueVector

DIRECTIONS = ("drop_high", "drop_low")
SMALL_N_TAU = 10
MAX_SUBGROUPS = 10


class UndefinedRateWarning(UserWarning):
    """A TPR/FPR stratum was empty and its rate was taken as 0."""


class SmallSampleWarning(UserWarning):
    """Normal approximation used on fewer than 10 ranked pairs."""


# ---------------------------------------------------------------- balance metrics


def class_balance(train_labels: Sequence[int], test_labels: Sequence[int]) -> float:
    """Minority/majority class count ratio in train; 0 if a test class is absent from train."""
    train_counts = Counter(np.asarray(train_labels).tolist())
    test_classes = set(np.asarray(test_labels).tolist())
    if not test_classes:
        raise ValueError("test_labels must be non-empty")
    if not train_counts or not test_classes <= set(train_counts):
        return 0.0
    counts = train_counts.values()
    return min(counts) / max(counts)


def group_balance(attribute_values: Sequence) -> float:
    """Minority/majority subgroup count ratio; a single subgroup gives 0."""
    counts = Counter(np.asarray(attribute_values).tolist())
    if not counts:
        raise ValueError("attribute_values must be non-empty")
    if len(counts) == 1:
        return 0.0
    return min(counts.values()) / max(counts.values())


def _rate(pred: np.ndarray, select: np.ndarray, name: str) -> float:
    if not select.any():
        warnings.warn(f"empty stratum for {name}; rate taken as 0", UndefinedRateWarning)
        return 0.0
    return float(pred[select].mean())


def eod(predictions, labels, group, positive_label: int = 1) -> float:
    """Equalized odds difference: max(|TPR gap|, |FPR gap|) between groups 1 and 0.

    Labels and predictions are binarized as ``positive_label`` vs rest.
    """
    pred = np.asarray(predictions) == positive_label
    pos = np.asarray(labels) == positive_label
    group = np.asarray(group)
    if len(np.unique(group)) < 2:
        raise SingleGroup("EOD needs members of both groups")
    g1, g0 = group == 1, group == 0
    tpr_diff = abs(_rate(pred, pos & g1, "TPR group 1") - _rate(pred, pos & g0, "TPR group 0"))
    fpr_diff = abs(_rate(pred, ~pos & g1, "FPR group 1") - _rate(pred, ~pos & g0, "FPR group 0"))
    return max(tpr_diff, fpr_diff)


# ---------------------------------------------------------------- rank stability


@dataclass(frozen=True)
class RankComparison:
    tau: float
    p_value: float
    n_common: int


def _tie_sums(x: np.ndarray):
    _, counts = np.unique(x, return_counts=True)
    t = counts[counts > 1].astype(float)
    return (t * (t - 1)).sum() / 2, (t * (t - 1) * (t - 2)).sum(), (t * (t - 1) * (2 * t + 5)).sum()


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Kendall tau-b with the tie-corrected normal approximation p-value."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    iu = np.triu_indices(n, k=1)
    dx = np.sign(x[:, None] - x[None, :])[iu]
    dy = np.sign(y[:, None] - y[None, :])[iu]
    s = float(np.sum(dx * dy))
    n0 = n * (n - 1) / 2
    n1, x0, x1 = _tie_sums(x)
    n2, y0, y1 = _tie_sums(y)
    denom = math.sqrt((n0 - n1) * (n0 - n2))
    if denom == 0:
        warnings.warn("a ranking is constant; tau reported as 0 with p = 1", RuntimeWarning)
        return 0.0, 1.0
    tau = max(-1.0, min(1.0, s / denom))
    m = n * (n - 1)
    var = (m * (2 * n + 5) - x1 - y1) / 18 + 2 * n1 * n2 / m
    if n > 2:
        var += x0 * y0 / (9 * m * (n - 2))
    if var <= 0:
        return tau, 1.0
    z = s / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2))
    return tau, min(1.0, max(p, np.finfo(float).tiny))


def common_ids(a: ValueVector, b: ValueVector) -> np.ndarray:
    return np.intersect1d(a.ids, b.ids)


def kendall_tau(a: ValueVector, b: ValueVector) -> RankComparison:
    """Rank agreement of two value vectors over their common datum_ids."""
    ids = common_ids(a, b)
    if len(ids) < 3:
        raise TooFewCommon(f"only {len(ids)} common ids; need at least 3")
    if len(ids) < SMALL_N_TAU:
        warnings.warn("fewer than 10 common ids; normal approximation is rough", SmallSampleWarning)
    va = _lookup(a, ids)
    vb = _lookup(b, ids)
    tau, p = kendall_tau_b(va, vb)
    return RankComparison(tau, p, len(ids))


def _lookup(v: ValueVector, ids: np.ndarray) -> np.ndarray:
    pos = {int(i): k for k, i in enumerate(v.ids)}
    return v.values[[pos[int(i)] for i in ids]]


# ---------------------------------------------------------------- subsampling


def removal_order(values: ValueVector, direction: str) -> np.ndarray:
    """Datum ids in the order they would be removed (ties by ascending id)."""
    if direction == "drop_low":
        order = np.lexsort((values.ids, values.values))
    elif direction == "drop_high":
        order = np.lexsort((values.ids, -values.values))
    else:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    return values.ids[order]


def subsample_by_value(values: ValueVector, fraction: float, direction: str) -> list[int]:
    """Remove floor(fraction * n) highest- or lowest-valued ids; return the rest ascending."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    n_remove = int(math.floor(fraction * len(values)))
    removed = set(removal_order(values, direction)[:n_remove].tolist())
    return sorted(int(i) for i in values.ids if int(i) not in removed)


def overlap_fraction(ids_a: Sequence[int], ids_b: Sequence[int]) -> float:
    """Percentage of the baseline selection ``ids_a`` also present in ``ids_b``."""
    a, b = set(ids_a), set(ids_b)
    if not a or not b:
        raise EmptySet("overlap needs two non-empty selections")
    return 100.0 * len(a & b) / len(a)


def selection(values: ValueVector, fraction: float, which: str) -> list[int]:
    """The ``fraction`` share of ids with the highest (``which='high'``) or lowest values."""
    k = int(math.floor(fraction * len(values)))
    direction = "drop_high" if which == "high" else "drop_low"
    return sorted(removal_order(values, direction)[:k].tolist())


@dataclass(frozen=True)
class SensitiveAttribute:
    """Group memberships of one attribute, looked up by datum_id.

    ``subgroup`` holds the raw attribute codes used for representation
    balance; ``binary`` holds the 0/1 split used for EOD.
    """

    name: str
    subgroup: Mapping[int, float]
    binary: Mapping[int, int]

    @classmethod
    def from_dataset(cls, dataset: TabularDataset, column: str) -> "SensitiveAttribute":
        j = dataset.column_index(column)
        values = dataset.features[:, j]
        ok = ~dataset.missing[:, j]
        distinct = np.unique(values[ok])
        if len(distinct) == 2:
            binary = (values == distinct[1]).astype(int)
        else:
            binary = (values > np.median(values[ok])).astype(int)
        if len(distinct) > MAX_SUBGROUPS:
            subgroup = binary.astype(float)
        else:
            subgroup = values
        ids = dataset.datum_ids.tolist()
        return cls(
            column,
            {i: float(v) for i, v in zip(ids, subgroup)},
            {i: int(b) for i, b in zip(ids, binary)},
        )


@dataclass
class SubsamplingCurve:
    technique: str
    direction: str
    fractions: list[float]
    series: list[dict] = field(default_factory=list)

    def tidy_rows(self, **keys) -> list[dict]:
        rows = []
        for record in self.series:
            for metric, value in record.items():
                if metric == "fraction":
                    continue
                rows.append({**keys, "fraction": record["fraction"], "technique": self.technique,
                             "direction": self.direction, "metric": metric, "value": value})
        return rows


def curve_point(train, test, retained, tconfig, attributes, positive_label):
    sub = subset(train, retained)
    if sub.n == 0:
        raise EmptyRetained("no training data retained")
    model = train_logreg(sub, tconfig)
    record = {
        "class_balance": class_balance(sub.labels, test.labels),
        "accuracy": accuracy(model, test).accuracy,
    }
    preds = model.predict(test.features)
    for attr in attributes:
        groups = np.array([attr.binary[int(i)] for i in test.datum_ids])
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UndefinedRateWarning)
                record[f"eod[{attr.name}]"] = eod(preds, test.labels, groups, positive_label)
        except SingleGroup:
            record[f"eod[{attr.name}]"] = float("nan")
        record[f"group_balance[{attr.name}]"] = group_balance([attr.subgroup[int(i)] for i in sub.datum_ids])
    return record


def subsampling_curve(
    train: TabularDataset,
    test: TabularDataset,
    values: ValueVector,
    fractions: Sequence[float],
    direction: str,
    tconfig: TrainConfig = TrainConfig(),
    schema: DatasetSchema | None = None,
    reference: TabularDataset | None = None,
) -> SubsamplingCurve:
    """Retrain after value-based removal at each fraction and record metrics.

    Sensitive attributes are read from ``reference`` (by datum_id) when
    given, so imputation or column removal cannot change group membership.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0.0 <= f < 1.0 for f in fractions) or any(
        b <= a for a, b in zip(fractions, fractions[1:])
    ):
        raise ValueError("fractions must be strictly increasing within [0, 1)")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    schema = schema or DatasetSchema(target_column="")
    source = reference if reference is not None else train
    attributes = [SensitiveAttribute.from_dataset(source, c) for c in schema.sensitive_columns]
    positive = source.class_index(schema.positive_label) if schema.positive_label else 1
    curve = SubsamplingCurve(values.technique, direction, fractions)
    for f in fractions:
        retained = subsample_by_value(values, f, direction)
        record = {"fraction": f}
        record.update(curve_point(train, test, retained, tconfig, attributes, positive))
        curve.series.append(record)
    return curve


def tidy_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def tau_matrix_csv(labels: Sequence[str], vectors: Sequence[ValueVector]) -> str:
    """Pairwise tau (and p-value) matrix over method labels."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method_a", "method_b", "tau", "p_value", "n_common"])
    for la, va in zip(labels, vectors):
        for lb, vb in zip(labels, vectors):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    rc = kendall_tau(va, vb)
                writer.writerow([la, lb, repr(rc.tau), repr(rc.p_value), rc.n_common])
            except TooFewCommon:
                writer.writerow([la, lb, "", "", 0])
    return buf.getvalue()


# ---------------------------------------------------------------- conditions

CellKey = tuple  # (imputation, technique, missingness)


@dataclass
class ConditionReport:
    """Condition values per (imputation, technique, missingness) cell."""

    tag: str
    cells: dict[CellKey, Fraction | int] = field(default_factory=dict)
    baseline: str | None = None

    def to_csv(self, techniques: Sequence[str] | None = None) -> str:
        """Appendix-style table: imputation rows, missingness columns, a
        tuple of technique values per cell."""
        imps = sorted({k[0] for k in self.cells})
        techs = list(techniques) if techniques else sorted({k[1] for k in self.cells})
        miss = sorted({k[2] for k in self.cells})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"condition_{self.tag}[{','.join(techs)}]"] + miss)
        for imp in imps:
            row = [imp]
            for m in miss:
                parts = [_cell_text(self.cells.get((imp, t, m))) for t in techs]
                row.append("(" + ",".join(parts) + ")")
            writer.writerow(row)
        return buf.getvalue()


def _cell_text(value) -> str:
    if value is None:
        return ""
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    return str(value)


def _fraction_over_datasets(indicators: Mapping) -> dict:
    grouped: dict[CellKey, list[int]] = defaultdict(list)
    for (dataset, imp, tech, miss), hit in sorted(indicators.items()):
        grouped[(imp, tech, miss)].append(int(hit))
    return {k: Fraction(sum(v), len(v)) for k, v in grouped.items()}


def indicator_report(tag: str, indicators: Mapping[tuple, int | bool]) -> ConditionReport:
    """Fractions over datasets for per-cell 0/1 indicators keyed (dataset, imputation, technique, missingness)."""
    return ConditionReport(tag, _fraction_over_datasets(indicators))


def condition_1(stats: Mapping[tuple, float], baseline: str = "row_removal", tag: str = "1A") -> ConditionReport:
    """Fraction of datasets where ``stat`` (mean for 1A, max for 1B) beats the baseline imputation.

    ``stats`` maps (dataset, imputation, technique, missingness) to the value statistic.
    """
    indicators = {}
    for (dataset, imp, tech, miss), value in stats.items():
        base = stats.get((dataset, baseline, tech, miss))
        if base is None:
            raise MissingBaseline(f"no {baseline} baseline for {dataset}/{tech}/{miss}")
        indicators[(dataset, imp, tech, miss)] = value > base
    return ConditionReport(tag, _fraction_over_datasets(indicators), baseline)


def condition_2(
    b_values: Mapping[tuple, float], originals: Mapping[tuple, float], threshold: float = 0.25
) -> tuple[ConditionReport, ConditionReport]:
    """2A: fraction with subsampled b < threshold. 2B: fraction with b below the unsampled b.

    ``originals`` may be keyed by the full cell key or by dataset alone.
    """
    ind_a, ind_b = {}, {}
    for key, b in b_values.items():
        original = originals[key] if key in originals else originals[key[0]]
        ind_a[key] = b < threshold
        ind_b[key] = b < original
    return ConditionReport("2A", _fraction_over_datasets(ind_a)), ConditionReport("2B", _fraction_over_datasets(ind_b))


def condition_3(eod_sub: float, eod_full: float) -> int:
    """1 when subsampling lowers EOD (more fair)."""
    return int(eod_sub < eod_full)


def condition_4(g_sub: float, g_full: float) -> int:
    """1 when subsampling lowers group representation balance."""
    return int(g_sub < g_full)
