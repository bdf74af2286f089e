"""Experiment configuration: a JSON document describing one audit grid.

Key schema (all keys except ``datasets``/``dataset`` are optional)::

    {
      "datasets": [{"name": "d1", "csv": "path.csv", "delimiter": ",",
                    "schema": {"target_column": "y", "sensitive_columns": ["sex"],
                               "positive_label": "1", "id_column": null}}],
      "split": {"ratio": 0.8, "seed": 0},
      "missingness": {"patterns": ["MCAR"], "epsilons": [0.1],
                      "features": null, "one_based": false},
      "imputation": ["row_removal", "mean", "knn:k=5"],
      "valuation": [{"technique": "loo"},
                    {"technique": "tmc", "n_permutations": 1000}],
      "train": {"max_iter": 300, "l2": 0.0001},
      "analysis": {"fractions": [0.0, 0.1, 0.2], "directions": ["drop_low", "drop_high"],
                   "condition_fraction": 0.2, "balance_threshold": 0.25,
                   "selection_fraction": 0.2, "baseline": "row_removal"},
      "card": {"authors": "...", "intended_users": "..."},
      "output_dir": "runs",
      "master_seed": 0
    }

A dataset entry uses either ``csv`` (relative paths resolve against the
config file's directory) or ``openml`` (an integer id). A single
``"dataset"`` object is accepted in place of the list.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from . import __version__
from .analysis import DIRECTIONS
from .data import DatasetSchema
from .errors import ConfigError, DValError
from .imputation import ImputationMethod
from .learners import TrainConfig
from .missingness import PATTERNS
from .valuation.values import ValuationConfig

EXPERIMENT_TECHNIQUES = ("loo", "tmc", "gshapley", "banzhaf", "cs_shapley", "fairshap")
_VALUATION_KEYS = set(ValuationConfig.__dataclass_fields__) | {"technique", "variant"}


@dataclass(frozen=True)
class DatasetSource:
    name: str
    schema: DatasetSchema
    csv: str | None = None
    openml: int | None = None
    delimiter: str = ","

    def describe(self) -> str:
        return f"csv:{self.csv}" if self.csv is not None else f"openml:{self.openml}"


@dataclass(frozen=True)
class TechniqueSpec:
    technique: str
    config: ValuationConfig
    variant: str = "SVAcc"

    @property
    def label(self) -> str:
        return self.technique if self.technique != "fairshap" else f"fairshap-{self.variant}"


@dataclass(frozen=True)
class AnalysisSettings:
    fractions: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3)
    directions: tuple[str, ...] = DIRECTIONS
    condition_fraction: float = 0.2
    balance_threshold: float = 0.25
    selection_fraction: float = 0.2
    baseline: str = "row_removal"


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple[DatasetSource, ...]
    split_ratio: float
    split_seed: int
    patterns: tuple[str, ...]
    epsilons: tuple[float, ...]
    features: tuple[int, ...] | None
    one_based: bool
    imputations: tuple[ImputationMethod, ...]
    techniques: tuple[TechniqueSpec, ...]
    train: TrainConfig
    analysis: AnalysisSettings
    output_dir: Path
    master_seed: int
    card: Mapping = field(default_factory=dict)
    raw: Mapping = field(default_factory=dict)

    @property
    def missingness_cells(self) -> list[tuple[str, float]]:
        return [(p, e) for p in self.patterns for e in self.epsilons]

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    @cached_property
    def run_id(self) -> str:
        """Content hash of the canonical config, the package version and any CSV inputs.

        Computed once, so an input edited mid-run cannot split the run across ids.
        """
        digests = [hashlib.sha256(Path(d.csv).read_bytes()).hexdigest() for d in self.datasets if d.csv]
        payload = "\n".join([self.canonical_json(), __version__, *digests])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @property
    def run_dir(self) -> Path:
        return self.output_dir / self.run_id


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _dataset(entry: Mapping, index: int, base: Path) -> DatasetSource:
    _require(isinstance(entry, Mapping), f"datasets[{index}] must be an object")
    _require(("csv" in entry) != ("openml" in entry), f"datasets[{index}] needs exactly one of 'csv' or 'openml'")
    _require("schema" in entry, f"datasets[{index}] needs a 'schema'")
    try:
        schema = DatasetSchema.from_dict(entry["schema"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"datasets[{index}].schema invalid: {exc}") from None
    csv_path = None
    if "csv" in entry:
        p = Path(entry["csv"])
        csv_path = str(p if p.is_absolute() else base / p)
        _require(Path(csv_path).exists(), f"datasets[{index}]: csv file {csv_path} does not exist")
    name = entry.get("name") or (Path(csv_path).stem if csv_path else f"openml{entry['openml']}")
    return DatasetSource(
        name=str(name), schema=schema, csv=csv_path,
        openml=int(entry["openml"]) if "openml" in entry else None,
        delimiter=entry.get("delimiter", ","),
    )


def _technique(entry, index: int, master_seed: int) -> TechniqueSpec:
    if isinstance(entry, str):
        entry = {"technique": entry}
    _require(isinstance(entry, Mapping) and "technique" in entry, f"valuation[{index}] needs a 'technique'")
    tech = entry["technique"]
    _require(tech in EXPERIMENT_TECHNIQUES, f"valuation[{index}]: unknown technique {tech!r}")
    unknown = set(entry) - _VALUATION_KEYS
    _require(not unknown, f"valuation[{index}]: unknown keys {sorted(unknown)}")
    kwargs = {k: v for k, v in entry.items() if k in ValuationConfig.__dataclass_fields__}
    if kwargs.get("truncation_tolerance") == "inf":
        kwargs["truncation_tolerance"] = float("inf")
    kwargs.setdefault("seed", master_seed)
    try:
        vconfig = ValuationConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"valuation[{index}]: {exc}") from None
    return TechniqueSpec(tech, vconfig, entry.get("variant", "SVAcc"))


def parse_config(raw: Mapping, base: str | Path = ".", output_dir: str | Path | None = None) -> ExperimentConfig:
    """Validate a config mapping; raises ConfigError naming the offending key."""
    _require(isinstance(raw, Mapping), "config must be a JSON object")
    base = Path(base)
    entries = raw.get("datasets")
    if entries is None and "dataset" in raw:
        entries = [raw["dataset"]]
    _require(bool(entries), "config needs a non-empty 'datasets' list")
    datasets = tuple(_dataset(e, i, base) for i, e in enumerate(entries))
    _require(len({d.name for d in datasets}) == len(datasets), "dataset names must be unique")

    master_seed = raw.get("master_seed", 0)
    _require(isinstance(master_seed, int) and master_seed >= 0, "master_seed must be a non-negative integer")

    split_cfg = raw.get("split", {})
    ratio = float(split_cfg.get("ratio", 0.8))
    _require(0.0 < ratio < 1.0, "split.ratio must lie in (0, 1)")

    miss = raw.get("missingness", {})
    patterns = tuple(str(p).upper() for p in miss.get("patterns", ("MCAR",)))
    epsilons = tuple(float(e) for e in miss.get("epsilons", (0.1,)))
    _require(bool(patterns) and bool(epsilons), "missingness grid must be non-empty")
    bad = [p for p in patterns if p not in PATTERNS]
    _require(not bad, f"missingness.patterns: unknown {bad}")
    _require(all(0.0 < e < 1.0 for e in epsilons), "missingness.epsilons must lie in (0, 1)")
    features = miss.get("features")

    imp_specs = raw.get("imputation", ("mean",))
    _require(bool(imp_specs), "imputation grid must be non-empty")
    try:
        imputations = tuple(ImputationMethod.parse(s) for s in imp_specs)
    except (ValueError, KeyError, DValError) as exc:
        raise ConfigError(f"imputation: {exc}") from None
    _require(len({m.spec() for m in imputations}) == len(imputations), "imputation specs must be unique")

    tech_entries = raw.get("valuation", ("loo",))
    _require(bool(tech_entries), "valuation grid must be non-empty")
    techniques = tuple(_technique(e, i, master_seed) for i, e in enumerate(tech_entries))
    _require(len({t.label for t in techniques}) == len(techniques), "valuation techniques must be unique")

    try:
        train = TrainConfig(**raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None

    a = dict(raw.get("analysis", {}))
    for key in ("fractions", "directions"):
        if key in a:
            a[key] = tuple(a[key])
    try:
        analysis = AnalysisSettings(**a)
    except TypeError as exc:
        raise ConfigError(f"analysis: {exc}") from None
    fr = analysis.fractions
    _require(bool(fr) and all(0.0 <= f < 1.0 for f in fr) and all(b > x for x, b in zip(fr, fr[1:])),
             "analysis.fractions must be strictly increasing within [0, 1)")
    _require(all(d in DIRECTIONS for d in analysis.directions), f"analysis.directions must be among {DIRECTIONS}")
    _require(0.0 <= analysis.condition_fraction < 1.0, "analysis.condition_fraction must lie in [0, 1)")
    _require(0.0 < analysis.selection_fraction < 1.0, "analysis.selection_fraction must lie in (0, 1)")

    out = Path(output_dir) if output_dir is not None else Path(raw.get("output_dir", "runs"))
    if not out.is_absolute():
        out = base / out
    return ExperimentConfig(
        datasets=datasets, split_ratio=ratio, split_seed=int(split_cfg.get("seed", master_seed)),
        patterns=patterns, epsilons=epsilons,
        features=tuple(int(f) for f in features) if features is not None else None,
        one_based=bool(miss.get("one_based", False)),
        imputations=imputations, techniques=techniques, train=train, analysis=analysis,
        output_dir=out, master_seed=master_seed, card=dict(raw.get("card", {})),
        raw=_canonical_raw(raw),
    )


def _canonical_raw(raw: Mapping) -> dict:
    """Config content that determines results (output_dir excluded so moving a run keeps its id)."""
    return {k: v for k, v in raw.items() if k != "output_dir"}


def load_config(path: str | Path, output_dir: str | Path | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return parse_config(raw, base=path.parent, output_dir=output_dir)
