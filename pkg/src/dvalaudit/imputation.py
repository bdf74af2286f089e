"""Imputation methods that turn a dataset with missing cells into a complete one.

Nine methods are implemented. The optimal-transport, random-forest and
MLP round-robin tags parse (so configs stay forward compatible) but raise
``NotImplementedMethod`` at dispatch.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .data import TabularDataset
from .errors import (
    AllMissingColumn,
    EmptyResult,
    MethodSpecError,
    NoCompleteRows,
    NotImplementedMethod,
)

IMPLEMENTED = ("row_removal", "col_removal", "mean", "mode", "knn", "random", "interpolation", "mice", "lrr")
RESERVED = ("ot", "random_forest", "mlp_round_robin")

_DEFAULTS: dict[str, dict[str, float]] = {
    "knn": {"k": 5},
    "mice": {"max_iter": 10, "tol": 1e-4},
    "lrr": {"max_iter": 10},
}
_INT_PARAMS = {"k", "max_iter"}


@dataclass(frozen=True)
class ImputationMethod:
    tag: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in IMPLEMENTED + RESERVED:
            raise MethodSpecError(f"unknown imputation method {self.tag!r}")
        params = dict(_DEFAULTS.get(self.tag, {}))
        for key, value in dict(self.params).items():
            if key not in params:
                raise MethodSpecError(f"method {self.tag!r} takes no parameter {key!r}")
            params[key] = int(value) if key in _INT_PARAMS else float(value)
        if params.get("k", 1) < 1 or params.get("max_iter", 1) < 1:
            raise MethodSpecError("k and max_iter must be >= 1")
        if params.get("tol", 1.0) <= 0:
            raise MethodSpecError("tol must be > 0")
        object.__setattr__(self, "params", params)

    @classmethod
    def parse(cls, spec: str) -> "ImputationMethod":
        """Parse ``name`` or ``name:key=value,key=value``."""
        name, _, rest = spec.strip().partition(":")
        name = name.strip().lower()
        params = {}
        if rest.strip():
            for item in rest.split(","):
                key, eq, value = item.partition("=")
                if not eq:
                    raise MethodSpecError(f"malformed parameter {item!r} in {spec!r}")
                try:
                    params[key.strip()] = float(value)
                except ValueError:
                    raise MethodSpecError(f"non-numeric value in {spec!r}") from None
        return cls(name, params)

    def spec(self) -> str:
        if not self.params:
            return self.tag
        items = ",".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.tag}:{items}"

    def __str__(self) -> str:
        return self.spec()


@dataclass(frozen=True)
class ImputedDataset:
    data: TabularDataset
    method: ImputationMethod
    dropped_row_ids: tuple[int, ...] = ()
    dropped_columns: tuple[str, ...] = ()
    imputed_cells: tuple[tuple[int, str], ...] = ()

    def provenance(self) -> dict:
        return {
            "method": self.method.spec(),
            "dropped_row_ids": list(self.dropped_row_ids),
            "dropped_columns": list(self.dropped_columns),
            "n_imputed_cells": len(self.imputed_cells),
        }


def _require_observed(x: np.ndarray, missing: np.ndarray, names) -> None:
    for j in np.nonzero(missing.any(axis=0))[0]:
        if missing[:, j].all():
            raise AllMissingColumn(f"column {names[j]!r} has no observed values")


def _fill_mean(x, missing):
    out = x.copy()
    for j in np.nonzero(missing.any(axis=0))[0]:
        out[missing[:, j], j] = x[~missing[:, j], j].mean()
    return out


def _fill_mode(x, missing):
    out = x.copy()
    for j in np.nonzero(missing.any(axis=0))[0]:
        values, counts = np.unique(x[~missing[:, j], j], return_counts=True)
        # np.unique sorts ascending, argmax takes the first (smallest) on ties
        out[missing[:, j], j] = values[np.argmax(counts)]
    return out


def _fill_random(x, missing, rng):
    out = x.copy()
    for j in np.nonzero(missing.any(axis=0))[0]:
        pool = x[~missing[:, j], j]
        rows = np.nonzero(missing[:, j])[0]
        out[rows, j] = pool[rng.integers(0, len(pool), size=len(rows))]
    return out


def _fill_interpolation(x, missing):
    out = x.copy()
    pos = np.arange(x.shape[0], dtype=float)
    for j in np.nonzero(missing.any(axis=0))[0]:
        obs = ~missing[:, j]
        # np.interp clamps to the end values outside the observed range
        out[missing[:, j], j] = np.interp(pos[missing[:, j]], pos[obs], x[obs, j])
    return out


def _fill_knn(x, missing, k):
    complete = ~missing.any(axis=1)
    if not complete.any():
        raise NoCompleteRows("KNN imputation needs at least one fully observed row")
    donors = x[complete]
    out = x.copy()
    kk = min(k, donors.shape[0])
    for r in np.nonzero(missing.any(axis=1))[0]:
        obs = ~missing[r]
        diff = donors[:, obs] - x[r, obs]
        dist = (diff * diff).sum(axis=1)
        nearest = np.argsort(dist, kind="stable")[:kk]
        out[r, ~obs] = donors[nearest][:, ~obs].mean(axis=0)
    return out


def _round_robin(x, missing, max_iter, tol, rng=None):
    """Chained linear regressions, ascending column order.

    Each missing column is regressed (OLS with intercept) on all other
    columns using the rows where it is observed; missing cells get the
    prediction, plus a residual draw when ``rng`` is given.
    """
    out = _fill_mean(x, missing)
    cols = np.nonzero(missing.any(axis=0))[0]
    n = x.shape[0]
    for _ in range(max_iter):
        largest = 0.0
        for j in cols:
            miss = missing[:, j]
            obs = ~miss
            others = np.delete(out, j, axis=1)
            design = np.column_stack([np.ones(n), others])
            coef, *_ = np.linalg.lstsq(design[obs], out[obs, j], rcond=None)
            pred = design[miss] @ coef
            if rng is not None:
                resid = out[obs, j] - design[obs] @ coef
                dof = max(int(obs.sum()) - design.shape[1], 1)
                sigma = float(np.sqrt(resid @ resid / dof))
                pred = pred + rng.normal(0.0, sigma, size=pred.shape)
            largest = max(largest, float(np.max(np.abs(pred - out[miss, j]))))
            out[miss, j] = pred
        if largest < tol:
            break
    return out


def impute(dataset: TabularDataset, method: ImputationMethod | str, seed: int = 0) -> ImputedDataset:
    """Complete ``dataset`` with ``method``; ``seed`` drives the stochastic ones."""
    if isinstance(method, str):
        method = ImputationMethod.parse(method)
    tag = method.tag
    if tag in RESERVED:
        raise NotImplementedMethod(f"imputation method {tag!r} is reserved but not implemented")

    x = np.array(dataset.features, dtype=float)
    missing = dataset.missing

    if tag == "row_removal":
        bad = missing.any(axis=1)
        if bad.all():
            raise EmptyResult("row removal dropped every row")
        keep = ~bad
        data = dataset.replace(
            features=x[keep], labels=dataset.labels[keep], datum_ids=dataset.datum_ids[keep], observed=None
        )
        return ImputedDataset(data, method, dropped_row_ids=tuple(int(i) for i in dataset.datum_ids[bad]))

    if tag == "col_removal":
        bad = missing.any(axis=0)
        if bad.all():
            raise EmptyResult("column removal dropped every column")
        keep = np.nonzero(~bad)[0]
        names = tuple(dataset.feature_names[j] for j in keep)
        maps = {k: v for k, v in dataset.categorical_maps.items() if k in names}
        data = dataset.replace(features=x[:, keep], feature_names=names, categorical_maps=maps, observed=None)
        dropped = tuple(dataset.feature_names[j] for j in np.nonzero(bad)[0])
        return ImputedDataset(data, method, dropped_columns=dropped)

    if missing.any():
        _require_observed(x, missing, dataset.feature_names)
    rng = np.random.default_rng(seed)
    p = method.params
    if tag == "mean":
        filled = _fill_mean(x, missing)
    elif tag == "mode":
        filled = _fill_mode(x, missing)
    elif tag == "random":
        filled = _fill_random(x, missing, rng)
    elif tag == "interpolation":
        filled = _fill_interpolation(x, missing)
    elif tag == "knn":
        filled = _fill_knn(x, missing, int(p["k"]))
    elif tag == "mice":
        filled = _round_robin(x, missing, int(p["max_iter"]), float(p["tol"]), rng)
    else:  # lrr
        filled = _round_robin(x, missing, int(p["max_iter"]), 1e-12)

    # write back only masked cells so observed cells stay bitwise identical
    out = np.where(missing, filled, dataset.features)
    rows, cols = np.nonzero(missing)
    cells = tuple((int(dataset.datum_ids[r]), dataset.feature_names[c]) for r, c in zip(rows, cols))
    return ImputedDataset(dataset.replace(features=out, observed=None), method, imputed_cells=cells)
