"""Value vectors, valuation settings and their on-disk format."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TECHNIQUES = ("loo", "tmc", "gshapley", "banzhaf", "cs_shapley", "fairshap", "exact_shapley")


@dataclass(frozen=True)
class ValuationConfig:
    n_permutations: int = 1000
    truncation_tolerance: float = 0.01
    convergence_threshold: float | None = None
    g_learning_rate: float = 0.1
    banzhaf_n_subsets: int = 1000
    banzhaf_mode: str = "auto"
    knn_k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")
        if self.truncation_tolerance < 0:
            raise ValueError("truncation_tolerance must be >= 0")
        if self.banzhaf_mode not in ("auto", "exact", "msr"):
            raise ValueError(f"unknown banzhaf_mode {self.banzhaf_mode!r}")
        if self.banzhaf_n_subsets < 1 or self.knn_k < 1:
            raise ValueError("banzhaf_n_subsets and knn_k must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["truncation_tolerance"] == float("inf"):
            d["truncation_tolerance"] = "inf"
        return d


def config_digest(*parts: Mapping) -> str:
    payload = json.dumps([dict(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class ValueVector:
    """Per-datum values from one valuation run, keyed by datum_id."""

    ids: np.ndarray
    values: np.ndarray
    technique: str
    seed: int = 0
    n_samples: int = 0
    config_digest: str = ""
    utility_full: float = float("nan")
    utility_empty: float = float("nan")
    stderr: np.ndarray | None = None
    flags: tuple[str, ...] = ()
    extra: Mapping = field(default_factory=dict)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        if ids.shape != values.shape or ids.ndim != 1:
            raise ValueError("ids and values must be 1-d arrays of equal length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate datum_ids in value vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", values)
        if self.stderr is not None:
            object.__setattr__(self, "stderr", np.asarray(self.stderr, dtype=float))
        object.__setattr__(self, "flags", tuple(self.flags))

    def __len__(self) -> int:
        return len(self.ids)

    def as_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.ids, self.values)}

    def __getitem__(self, datum_id: int) -> float:
        hit = np.nonzero(self.ids == datum_id)[0]
        if len(hit) == 0:
            raise KeyError(datum_id)
        return float(self.values[hit[0]])

    def sidecar(self) -> dict:
        return {
            "technique": self.technique,
            "seed": int(self.seed),
            "n_samples": int(self.n_samples),
            "config_digest": self.config_digest,
            "utility_full": float(self.utility_full),
            "utility_empty": float(self.utility_empty),
            "flags": list(self.flags),
            "extra": dict(self.extra),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["datum_id", "value"])
        for i, v in zip(self.ids, self.values):
            writer.writerow([int(i), repr(float(v))])
        return buf.getvalue()

    def save(self, csv_path: str | Path) -> tuple[Path, Path]:
        csv_path = Path(csv_path)
        json_path = csv_path.with_suffix(".json")
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.sidecar(), sort_keys=True, indent=1) + "\n")
        return csv_path, json_path

    @classmethod
    def load(cls, csv_path: str | Path) -> "ValueVector":
        csv_path = Path(csv_path)
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        meta_path = csv_path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"technique": "unknown"}
        return cls(
            ids=np.array([int(r["datum_id"]) for r in rows], dtype=np.int64),
            values=np.array([float(r["value"]) for r in rows]),
            technique=meta["technique"],
            seed=meta.get("seed", 0),
            n_samples=meta.get("n_samples", 0),
            config_digest=meta.get("config_digest", ""),
            utility_full=meta.get("utility_full", float("nan")),
            utility_empty=meta.get("utility_empty", float("nan")),
            flags=tuple(meta.get("flags", ())),
            extra=meta.get("extra", {}),
        )
