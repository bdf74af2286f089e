"""Grid execution for ``experiment run`` and the shared per-step helpers.

Layout of a run directory ``<output_dir>/<run_id>/``::

    config.json                          canonical config
    manifest.json                        cells, artifact paths, warnings (deterministic)
    timings.json                         wall-clock seconds per cell (not deterministic)
    masks/<dataset>__<miss>.json
    values/<dataset>/<miss>/<imputation>/<technique>.csv (+ .json sidecar)
    analysis/tau/<dataset>__<miss>__<technique>.csv
    analysis/overlap.csv
    analysis/curves.csv
    analysis/conditions/condition_<tag>.csv
    cards/<dataset>__<miss>__<imputation>__<technique>/<run_id>.dvalcard.md

Seeds: the mask of missingness cell ``m`` uses ``derive_seed(master, d, m)``;
imputation ``i`` adds its index; valuation of technique ``t`` uses
``derive_seed(master, d, m, VALUE_STREAM, t)``, which is shared by all
imputations of the same missingness cell so rankings differ only through
the imputed data.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import re
import time
import warnings
from collections import defaultdict
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    SensitiveAttribute,
    class_balance,
    condition_1,
    condition_2,
    indicator_report,
    overlap_fraction,
    selection,
    subsample_by_value,
    subsampling_curve,
    tau_matrix_csv,
    tidy_csv,
)
from .config import DatasetSource, ExperimentConfig, TechniqueSpec
from .data import DatasetSchema, TabularDataset, fetch_openml, load_csv, split, train_test
from .dvalcard import build_card, lint_card, render_markdown
from .errors import DValError
from .imputation import impute
from .learners import TrainConfig
from .missingness import apply_mask, induce, select_missing_features
from .valuation import (
    ValueVector,
    value_banzhaf,
    value_cs_shapley,
    value_fairshap,
    value_g_shapley,
    value_loo,
    value_tmc_shapley,
)

log = logging.getLogger(__name__)

VALUE_STREAM = 1
CELL_ERRORS = (DValError, ValueError, ArithmeticError, np.linalg.LinAlgError)
CURVE_COLUMNS = ("dataset", "missingness", "imputation", "technique", "direction", "fraction", "metric", "value")
OVERLAP_COLUMNS = ("dataset", "missingness", "technique", "which", "baseline", "imputation", "overlap_percent")


def derive_seed(master: int, *indices: int) -> int:
    """Independent 32-bit seed for a grid coordinate."""
    seq = np.random.SeedSequence([int(master), *(int(i) for i in indices)])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", text)


def missingness_label(pattern: str, epsilon: float) -> str:
    return f"{pattern}-{epsilon:g}"


def default_cache_dir() -> Path:
    return Path(os.environ.get("DVAL_CACHE_DIR", Path.home() / ".cache" / "dvalaudit"))


def load_source(source: DatasetSource, cache_dir: str | Path | None = None) -> TabularDataset:
    if source.csv is not None:
        return load_csv(source.csv, source.schema, delimiter=source.delimiter)
    return fetch_openml(source.openml, cache_dir or default_cache_dir(), source.schema)


def positive_index(dataset: TabularDataset, schema: DatasetSchema) -> int:
    return dataset.class_index(schema.positive_label) if schema.positive_label else 1


def compute_values(
    spec: TechniqueSpec,
    train: TabularDataset,
    test: TabularDataset,
    tconfig: TrainConfig,
    schema: DatasetSchema | None = None,
    reference: TabularDataset | None = None,
    n_jobs: int = 1,
) -> ValueVector:
    """Run one valuation technique on a prepared train/test pair."""
    vconfig = spec.config
    tech = spec.technique
    if tech == "loo":
        return value_loo(train, test, tconfig)
    if tech == "tmc":
        return value_tmc_shapley(train, test, vconfig, tconfig, n_jobs=n_jobs)
    if tech == "gshapley":
        return value_g_shapley(train, test, vconfig, tconfig=tconfig, n_jobs=n_jobs)
    if tech == "banzhaf":
        return value_banzhaf(train, test, vconfig, tconfig, n_jobs=n_jobs)
    if tech == "cs_shapley":
        return value_cs_shapley(train, test, vconfig, tconfig, n_jobs=n_jobs)
    if tech == "fairshap":
        schema = schema or DatasetSchema(target_column="")
        groups = None
        if schema.sensitive_columns:
            attr = SensitiveAttribute.from_dataset(reference if reference is not None else test, schema.sensitive_columns[0])
            groups = np.array([attr.binary[int(i)] for i in test.datum_ids])
        return value_fairshap(train, test, vconfig.knn_k, spec.variant, groups, positive_index(test, schema))
    raise ValueError(f"unknown technique {tech!r}")


def _write(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return str(path)


@dataclass
class RunManifest:
    run_id: str
    version: str
    cells: list[dict] = field(default_factory=list)
    analysis: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def failed(self) -> list[dict]:
        return [c for c in self.cells if c["status"] != "ok"]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


class _CellRecorder:
    """Collects warnings raised inside a cell without aborting it."""

    def __init__(self, manifest: RunManifest, label: str):
        self.manifest, self.label = manifest, label

    def __enter__(self):
        self._ctx = warnings.catch_warnings(record=True)
        self._caught = self._ctx.__enter__()
        warnings.simplefilter("always")
        return self

    def __exit__(self, *exc):
        self._ctx.__exit__(*exc)
        seen = []
        for w in self._caught:
            msg = f"{self.label}: {w.category.__name__}: {w.message}"
            if msg not in seen:
                seen.append(msg)
        self.manifest.warnings.extend(seen)
        return False


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, n_jobs: int = 1, cache_dir: str | Path | None = None):
        self.config = config
        self.n_jobs = max(1, int(n_jobs))
        self.cache_dir = cache_dir
        self.root = config.run_dir
        self.manifest = RunManifest(config.run_id, __version__)
        self.timings: dict[str, float] = {}
        # analysis accumulators keyed (dataset, imputation, technique, missingness)
        self.vectors: dict[tuple, ValueVector] = {}
        self.stat_mean: dict[tuple, float] = {}
        self.stat_max: dict[tuple, float] = {}
        self.b_sub: dict[str, dict[tuple, float]] = defaultdict(dict)
        self.b_orig: dict[tuple, float] = {}
        self.fair_ind: dict[str, dict[tuple, int]] = defaultdict(dict)
        self.curve_rows: list[dict] = []

    def rel(self, path: str | Path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    # ------------------------------------------------------------ grid

    def run(self) -> RunManifest:
        cfg = self.config
        self.root.mkdir(parents=True, exist_ok=True)
        _write(self.root / "config.json", json.dumps(cfg.raw, sort_keys=True, indent=1) + "\n")
        for di, source in enumerate(cfg.datasets):
            try:
                dataset = load_source(source, self.cache_dir)
                data_split = split(dataset, cfg.split_ratio, cfg.split_seed)
                if cfg.features is not None:
                    feats = [f - 1 for f in cfg.features] if cfg.one_based else list(cfg.features)
                else:
                    feats = select_missing_features(dataset.d, cfg.one_based)
            except CELL_ERRORS as exc:
                self._fail_dataset(source.name, exc)
                continue
            for mi, (pattern, eps) in enumerate(cfg.missingness_cells):
                self._missingness_cell(di, mi, source, dataset, data_split, feats, pattern, eps)
        self._analysis()
        _write(self.root / "manifest.json", self.manifest.to_json())
        _write(self.root / "timings.json", json.dumps(self.timings, sort_keys=True, indent=1) + "\n")
        return self.manifest

    def _record(self, **cell) -> None:
        cell.setdefault("artifacts", {})
        self.manifest.cells.append(cell)

    def _fail_dataset(self, name: str, exc: Exception) -> None:
        cfg = self.config
        for pattern, eps in cfg.missingness_cells:
            for imp in cfg.imputations:
                for spec in cfg.techniques:
                    self._record(dataset=name, missingness=missingness_label(pattern, eps), imputation=imp.spec(),
                                 technique=spec.label, status="failed", error=f"{type(exc).__name__}: {exc}")
        log.error("dataset %s failed: %s", name, exc)

    def _missingness_cell(self, di, mi, source, dataset, data_split, feats, pattern, eps):
        cfg = self.config
        miss = missingness_label(pattern, eps)
        label = f"{source.name}/{miss}"
        try:
            with _CellRecorder(self.manifest, label):
                mask = induce(dataset, pattern, feats, eps, derive_seed(cfg.master_seed, di, mi))
            _write(self.root / "masks" / f"{slug(source.name)}__{miss}.json", mask.to_json())
            masked = apply_mask(dataset, mask)
        except CELL_ERRORS as exc:
            for imp in cfg.imputations:
                for spec in cfg.techniques:
                    self._record(dataset=source.name, missingness=miss, imputation=imp.spec(), technique=spec.label,
                                 status="failed", error=f"{type(exc).__name__}: {exc}")
            return
        for ii, imp in enumerate(cfg.imputations):
            self._imputation_cell(di, mi, ii, source, dataset, masked, data_split, miss, imp, mask)

    def _imputation_cell(self, di, mi, ii, source, dataset, masked, data_split, miss, imp, mask):
        cfg = self.config
        label = f"{source.name}/{miss}/{imp.spec()}"
        try:
            with _CellRecorder(self.manifest, label):
                imputed = impute(masked, imp, seed=derive_seed(cfg.master_seed, di, mi, 0, ii))
                train, test = train_test(imputed.data, data_split)
        except CELL_ERRORS as exc:
            for spec in cfg.techniques:
                self._record(dataset=source.name, missingness=miss, imputation=imp.spec(), technique=spec.label,
                             status="failed", error=f"{type(exc).__name__}: {exc}")
            log.warning("%s failed: %s", label, exc)
            return
        self.b_orig[(source.name, imp.spec(), miss)] = class_balance(train.labels, test.labels)
        for ti, spec in enumerate(cfg.techniques):
            seed = derive_seed(cfg.master_seed, di, mi, VALUE_STREAM, ti)
            spec = dataclasses.replace(spec, config=dataclasses.replace(spec.config, seed=seed))
            tconfig = dataclasses.replace(cfg.train, seed=seed)
            cell_label = f"{label}/{spec.label}"
            start = time.perf_counter()
            try:
                with _CellRecorder(self.manifest, cell_label):
                    artifacts = self._technique_cell(
                        source, dataset, train, test, miss, imp, spec, tconfig, imputed, data_split, mask
                    )
                self._record(dataset=source.name, missingness=miss, imputation=imp.spec(), technique=spec.label,
                             status="ok", seed=seed, artifacts=artifacts)
            except CELL_ERRORS as exc:
                self._record(dataset=source.name, missingness=miss, imputation=imp.spec(), technique=spec.label,
                             status="failed", error=f"{type(exc).__name__}: {exc}")
                log.warning("%s failed: %s", cell_label, exc)
            self.timings[cell_label] = round(time.perf_counter() - start, 3)
            log.info("%s done in %.1fs", cell_label, self.timings[cell_label])

    def _technique_cell(self, source, dataset, train, test, miss, imp, spec, tconfig, imputed, data_split, mask):
        cfg = self.config
        schema = source.schema
        values = compute_values(spec, train, test, tconfig, schema, dataset, self.n_jobs)
        key = (source.name, imp.spec(), spec.label, miss)
        csv_path = self.root / "values" / slug(source.name) / miss / slug(imp.spec()) / f"{spec.label}.csv"
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        values.save(csv_path)
        self.vectors[key] = values
        self.stat_mean[key] = float(values.values.mean())
        self.stat_max[key] = float(values.values.max())

        a = cfg.analysis
        fractions = sorted(set(a.fractions) | {0.0, a.condition_fraction})
        at_condition = {}
        for direction in a.directions:
            curve = subsampling_curve(train, test, values, fractions, direction, tconfig, schema, reference=dataset)
            rows = curve.tidy_rows(dataset=source.name, missingness=miss, imputation=imp.spec())
            self.curve_rows.extend(r for r in rows if r["fraction"] in a.fractions)
            full = curve.series[0]
            sub = curve.series[fractions.index(a.condition_fraction)]
            at_condition[direction] = (full, sub)
            self.b_sub[direction][key] = sub["class_balance"]
            for attr in schema.sensitive_columns:
                e_full, e_sub = full[f"eod[{attr}]"], sub[f"eod[{attr}]"]
                if not (math.isnan(e_full) or math.isnan(e_sub)):
                    self.fair_ind[f"3[{attr}]_{direction}"][key] = int(e_sub < e_full)
                g_full, g_sub = full[f"group_balance[{attr}]"], sub[f"group_balance[{attr}]"]
                self.fair_ind[f"4[{attr}]_{direction}"][key] = int(g_sub < g_full)

        card_path = self._card(source, dataset, train, miss, imp, spec, values, tconfig, imputed, data_split,
                               mask, at_condition.get("drop_low"))
        return {
            "values": self.rel(csv_path),
            "sidecar": self.rel(csv_path.with_suffix(".json")),
            "card": self.rel(card_path),
        }

    def _card(self, source, dataset, train, miss, imp, spec, values, tconfig, imputed, data_split, mask, perf):
        cfg = self.config
        fraction = cfg.analysis.condition_fraction
        retained = subsample_by_value(values, fraction, "drop_low")
        reference = {int(i) for i in train.datum_ids}
        groups = {}
        for col in source.schema.sensitive_columns:
            attr = SensitiveAttribute.from_dataset(dataset, col)
            groups[col] = {i: v for i, v in attr.subgroup.items() if i in reference}
        meta = {
            "title": f"{spec.label} on {source.name} ({miss}, {imp.spec()})",
            "dataset_source": source.describe(),
            "dataset_description": f"dataset {source.name}, target column {source.schema.target_column!r}",
            "preprocessing": (
                f"missingness {miss} on columns {[dataset.feature_names[j] for j in mask.affected_features]}; "
                f"imputation {imp.spec()} (dropped rows: {len(imputed.dropped_row_ids)}, "
                f"dropped columns: {list(imputed.dropped_columns)}, imputed cells: {len(imputed.imputed_cells)})"
            ),
            "split": f"ratio {cfg.split_ratio:g}, seed {cfg.split_seed}, digest {data_split.digest()}",
            "split_digest": data_split.digest(),
            "technique": spec.label,
            "learning_algorithm": "multinomial logistic regression (full-batch gradient descent, standardized features)",
            "evaluation_data": f"held-out test split ({len(data_split.test_ids)} ids before imputation)",
            "configuration": json.dumps({"valuation": spec.config.to_dict(), "train": tconfig.to_dict()}, sort_keys=True),
            "conventions": "empty coalition scores 1/K; value ties broken by ascending datum_id",
            "removal_fraction": fraction,
            "direction": "drop_low",
            "missingness": miss,
            "imputation": imp.spec(),
            "run_id": cfg.run_id,
        }
        if perf is not None:
            full, sub = perf
            meta["performance"] = (
                f"test accuracy {full['accuracy']:.4f} on all data, {sub['accuracy']:.4f} after removal; "
                f"class balance {full['class_balance']:.4f} before, {sub['class_balance']:.4f} after"
            )
        card = build_card(meta, values, retained, train, source.schema, cfg.card, groups)
        path = self.root / "cards" / slug(f"{source.name}__{miss}__{imp.spec()}__{spec.label}") / f"{cfg.run_id}.dvalcard.md"
        _write(path, render_markdown(card))
        findings = lint_card(card)
        if findings:
            self.manifest.warnings.append(f"card {self.rel(path)}: {len(findings)} lint findings")
        return path

    # ------------------------------------------------------------ run-level analysis

    def _analysis(self) -> None:
        cfg = self.config
        a = cfg.analysis
        out = self.root / "analysis"
        imps = [m.spec() for m in cfg.imputations]
        labels = [t.label for t in cfg.techniques]
        overlap_rows = []
        for source in cfg.datasets:
            for pattern, eps in cfg.missingness_cells:
                miss = missingness_label(pattern, eps)
                for tech in labels:
                    present = [(imp, self.vectors[(source.name, imp, tech, miss)]) for imp in imps
                               if (source.name, imp, tech, miss) in self.vectors]
                    if len(present) < 1:
                        continue
                    path = out / "tau" / f"{slug(source.name)}__{miss}__{tech}.csv"
                    _write(path, tau_matrix_csv([p[0] for p in present], [p[1] for p in present]))
                    self.manifest.analysis[f"tau/{source.name}/{miss}/{tech}"] = self.rel(path)
                    overlap_rows.extend(self._overlaps(source.name, miss, tech, dict(present)))
        self._emit("overlap", out / "overlap.csv", tidy_csv(overlap_rows, OVERLAP_COLUMNS))
        self._emit("curves", out / "curves.csv", tidy_csv(self.curve_rows, CURVE_COLUMNS))

        cond = out / "conditions"
        reports = []
        if any(k[1] == a.baseline for k in self.stat_mean):
            try:
                reports.append(condition_1(self._with_baseline(self.stat_mean), a.baseline, "1A"))
                reports.append(condition_1(self._with_baseline(self.stat_max), a.baseline, "1B"))
            except DValError as exc:
                self.manifest.warnings.append(f"condition 1: {exc}")
        else:
            self.manifest.warnings.append(f"condition 1 skipped: baseline imputation {a.baseline!r} not in grid")
        for direction, b_values in sorted(self.b_sub.items()):
            originals = {k: self.b_orig[(k[0], k[1], k[3])] for k in b_values}
            r2a, r2b = condition_2(b_values, originals, a.balance_threshold)
            r2a.tag, r2b.tag = f"2A_{direction}", f"2B_{direction}"
            reports.extend([r2a, r2b])
        for tag, ind in sorted(self.fair_ind.items()):
            if ind:
                reports.append(indicator_report(tag, ind))
        for report in reports:
            self._emit(f"condition_{report.tag}", cond / f"condition_{slug(report.tag)}.csv", report.to_csv(labels))

    def _with_baseline(self, stats: Mapping[tuple, float]) -> dict[tuple, float]:
        """Restrict to cells whose baseline cell succeeded, so one failure cannot void the table."""
        base = self.config.analysis.baseline
        kept = {k: v for k, v in stats.items() if (k[0], base, k[2], k[3]) in stats}
        dropped = len(stats) - len(kept)
        if dropped:
            self.manifest.warnings.append(f"condition 1: {dropped} cells without a {base} baseline left out")
        return kept

    def _overlaps(self, name: str, miss: str, tech: str, by_imp: Mapping[str, ValueVector]) -> list[dict]:
        a = self.config.analysis
        base = a.baseline if a.baseline in by_imp else next(iter(by_imp))
        rows = []
        for which in ("high", "low"):
            ref = selection(by_imp[base], a.selection_fraction, which)
            for imp, vec in by_imp.items():
                other = selection(vec, a.selection_fraction, which)
                if not ref or not other:
                    continue
                rows.append({"dataset": name, "missingness": miss, "technique": tech, "which": which,
                             "baseline": base, "imputation": imp, "overlap_percent": overlap_fraction(ref, other)})
        return rows

    def _emit(self, key: str, path: Path, text: str) -> None:
        _write(path, text)
        self.manifest.analysis[key] = self.rel(path)


def run_experiment(
    config: ExperimentConfig,
    n_jobs: int | None = None,
    force: bool = False,
    cache_dir: str | Path | None = None,
) -> tuple[RunManifest, bool]:
    """Execute the grid; returns the manifest and whether it was recomputed.

    An existing manifest for the same run id is reused unless ``force``.
    """
    manifest_path = config.run_dir / "manifest.json"
    if manifest_path.exists() and not force:
        log.info("run %s already complete; use --force to recompute", config.run_id)
        return RunManifest.from_json(manifest_path.read_text()), False
    runner = ExperimentRunner(config, n_jobs or os.cpu_count() or 1, cache_dir)
    return runner.run(), True


__all__ = [
    "ExperimentRunner",
    "RunManifest",
    "compute_values",
    "derive_seed",
    "load_source",
    "missingness_label",
    "run_experiment",
]
