"""Tabular dataset substrate: loading, encoding, splitting and subsetting.

Every dataset row carries a stable ``datum_id`` assigned at load time. Later
stages (missingness, imputation, valuation, analysis) key all cross-condition
comparisons on those ids, so row removal never loses provenance.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import urllib.error
import urllib.request
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .errors import (
    CacheCorrupt,
    DegenerateSplit,
    EmptyFile,
    MissingLabel,
    MissingTarget,
    NetworkError,
    RaggedRow,
    UnknownId,
    UnsupportedArff,
)

MISSING_TOKENS = frozenset({"", "?", "na", "nan", "null", "none"})

OPENML_DESCRIPTION_URL = "https://www.openml.org/api/v1/json/data/{id}"
OPENML_DOWNLOAD_URL = "https://www.openml.org/data/v1/download/{file_id}"


def _is_missing(token: str) -> bool:
    return token.strip().lower() in MISSING_TOKENS


def _parse_float(token: str) -> float | None:
    try:
        value = float(token)
    except ValueError:
        return None
    # "nan"/"inf" strings are not treated as numbers; nan is a missing token
    if not math.isfinite(value):
        return None
    return value


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class DatasetSchema:
    target_column: str
    sensitive_columns: tuple[str, ...] = ()
    positive_label: str | None = None
    id_column: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "sensitive_columns", tuple(self.sensitive_columns))

    def validate(self, header: Sequence[str]) -> None:
        if self.target_column not in header:
            raise MissingTarget(f"target column {self.target_column!r} not in header")
        absent = [c for c in self.sensitive_columns if c not in header]
        if absent:
            raise MissingTarget(f"sensitive columns not in header: {absent}")
        if self.id_column is not None and self.id_column not in header:
            raise MissingTarget(f"id column {self.id_column!r} not in header")

    def to_dict(self) -> dict:
        return {
            "target_column": self.target_column,
            "sensitive_columns": list(self.sensitive_columns),
            "positive_label": self.positive_label,
            "id_column": self.id_column,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSchema":
        return cls(
            target_column=d["target_column"],
            sensitive_columns=tuple(d.get("sensitive_columns", ())),
            positive_label=d.get("positive_label"),
            id_column=d.get("id_column"),
        )


@dataclass(frozen=True, eq=False)
class TabularDataset:
    """Encoded feature matrix, labels and column metadata.

    Missing cells hold NaN in ``features``; when ``observed`` is not None it
    is the authoritative n x d mask (True = observed) and NaN is only a
    sentinel.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    class_names: tuple[str, ...]
    categorical_maps: Mapping[str, Mapping[str, int]] = field(default_factory=dict)
    datum_ids: np.ndarray | None = None
    observed: np.ndarray | None = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2:
            features = features.reshape(len(self.labels), -1)
        labels = np.asarray(self.labels, dtype=np.int64)
        n, d = features.shape
        if labels.shape != (n,):
            raise ValueError(f"labels shape {labels.shape} does not match n={n}")
        if len(self.feature_names) != d:
            raise ValueError("feature_names length does not match d")
        if n and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise ValueError("label index out of range of class_names")
        ids = np.arange(n, dtype=np.int64) if self.datum_ids is None else np.asarray(self.datum_ids, dtype=np.int64)
        if ids.shape != (n,) or len(np.unique(ids)) != n:
            raise ValueError("datum_ids must be n unique integers")
        for name, mapping in self.categorical_maps.items():
            if len(set(mapping.values())) != len(mapping):
                raise ValueError(f"categorical map for {name!r} is not injective")
        observed = self.observed
        if observed is not None:
            observed = np.asarray(observed, dtype=bool)
            if observed.shape != (n, d):
                raise ValueError("observed mask shape mismatch")
            if observed.all():
                observed = None
        object.__setattr__(self, "features", _freeze(features))
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "datum_ids", _freeze(ids))
        object.__setattr__(self, "observed", None if observed is None else _freeze(observed))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(
            self,
            "categorical_maps",
            {k: dict(v) for k, v in self.categorical_maps.items()},
        )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def missing(self) -> np.ndarray:
        """Boolean n x d matrix, True where a cell is missing."""
        if self.observed is None:
            return np.zeros(self.features.shape, dtype=bool)
        return ~self.observed

    @property
    def has_missing(self) -> bool:
        return self.observed is not None

    def row_of(self) -> dict[int, int]:
        return {int(i): r for r, i in enumerate(self.datum_ids)}

    def column_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"no feature column named {name!r}") from None

    def class_index(self, name: str) -> int:
        return self.class_names.index(name)

    def replace(self, **changes) -> "TabularDataset":
        fields = {
            "features": self.features,
            "labels": self.labels,
            "feature_names": self.feature_names,
            "class_names": self.class_names,
            "categorical_maps": self.categorical_maps,
            "datum_ids": self.datum_ids,
            "observed": self.observed,
        }
        fields.update(changes)
        return TabularDataset(**fields)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TabularDataset):
            return NotImplemented
        return (
            self.feature_names == other.feature_names
            and self.class_names == other.class_names
            and self.categorical_maps == other.categorical_maps
            and np.array_equal(self.datum_ids, other.datum_ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features, equal_nan=True)
            and np.array_equal(self.missing, other.missing)
        )

    __hash__ = None

    def decode_column(self, name: str) -> list[str | float | None]:
        """Map a column back to raw values (category strings where encoded)."""
        col = self.features[:, self.column_index(name)]
        missing = self.missing[:, self.column_index(name)]
        inverse = {code: raw for raw, code in self.categorical_maps.get(name, {}).items()}
        out: list[str | float | None] = []
        for value, miss in zip(col, missing):
            if miss:
                out.append(None)
            elif inverse:
                out.append(inverse[int(value)])
            else:
                out.append(float(value))
        return out

    def to_dict(self) -> dict:
        features = [[None if m else float(v) for v, m in zip(row, mrow)] for row, mrow in zip(self.features, self.missing)]
        return {
            "feature_names": list(self.feature_names),
            "class_names": list(self.class_names),
            "categorical_maps": self.categorical_maps,
            "datum_ids": self.datum_ids.tolist(),
            "labels": self.labels.tolist(),
            "features": features,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TabularDataset":
        names = list(d["feature_names"])
        rows = d["features"]
        features = np.array(
            [[np.nan if v is None else float(v) for v in row] for row in rows], dtype=float
        ).reshape(len(rows), len(names))
        return cls(
            features=features,
            labels=np.asarray(d["labels"], dtype=np.int64),
            feature_names=tuple(names),
            class_names=tuple(d["class_names"]),
            categorical_maps=d.get("categorical_maps", {}),
            datum_ids=np.asarray(d["datum_ids"], dtype=np.int64),
            observed=~np.isnan(features),
        )


@dataclass(frozen=True)
class DataSplit:
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    seed: int
    ratio: float

    def digest(self) -> str:
        payload = json.dumps([self.train_ids, self.test_ids, self.seed, self.ratio])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "seed": self.seed,
            "ratio": self.ratio,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DataSplit":
        return cls(tuple(d["train_ids"]), tuple(d["test_ids"]), int(d["seed"]), float(d["ratio"]))


@dataclass(frozen=True)
class RawTable:
    """Header plus string cells, as read from CSV or ARFF."""

    header: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]
    # column -> declared category order (ARFF nominal attributes)
    declared: Mapping[str, tuple[str, ...]] = field(default_factory=dict)


def encode_column(values: Sequence[str], declared: Sequence[str] | None = None):
    """Encode one raw column.

    Returns ``(codes, mapping)`` where ``mapping`` is empty for numeric
    columns. A column is numeric only if every non-missing cell parses as a
    finite float; otherwise the whole column is categorical, coded in
    first-appearance order (or in ``declared`` order when given).
    """
    missing = [_is_missing(v) for v in values]
    if declared is None:
        parsed = [None if m else _parse_float(v) for v, m in zip(values, missing)]
        if all(p is not None for p, m in zip(parsed, missing) if not m):
            codes = np.array([np.nan if m else p for p, m in zip(parsed, missing)], dtype=float)
            return codes, {}
        mapping: dict[str, int] = {}
    else:
        mapping = {v: i for i, v in enumerate(declared)}
    codes = np.empty(len(values), dtype=float)
    for r, (v, m) in enumerate(zip(values, missing)):
        if m:
            codes[r] = np.nan
            continue
        key = v.strip()
        if key not in mapping:
            if declared is not None:
                raise UnsupportedArff(f"value {key!r} not among declared nominal values")
            mapping[key] = len(mapping)
        codes[r] = mapping[key]
    return codes, mapping


def _label_order(values: Sequence[str], declared: Sequence[str] | None) -> tuple[str, ...]:
    if declared is not None:
        return tuple(declared)
    uniq = sorted(set(values))
    parsed = [_parse_float(v) for v in uniq]
    if all(p is not None for p in parsed):
        uniq = [v for _, v in sorted(zip(parsed, uniq))]
    return tuple(uniq)


def encode_categoricals(raw: RawTable, schema: DatasetSchema) -> TabularDataset:
    """Turn a raw string table into an encoded ``TabularDataset``."""
    schema.validate(raw.header)
    col = {name: j for j, name in enumerate(raw.header)}
    target_j = col[schema.target_column]
    skip = {target_j}
    if schema.id_column is not None:
        skip.add(col[schema.id_column])

    raw_labels = [row[target_j].strip() for row in raw.rows]
    for r, lab in enumerate(raw_labels):
        if _is_missing(lab):
            raise MissingLabel(f"row {r} has a missing target value")
    class_names = _label_order(raw_labels, raw.declared.get(schema.target_column))
    class_code = {c: i for i, c in enumerate(class_names)}
    labels = np.array([class_code[v] for v in raw_labels], dtype=np.int64)

    feature_names = [name for j, name in enumerate(raw.header) if j not in skip]
    columns = []
    maps: dict[str, dict[str, int]] = {}
    for j, name in enumerate(raw.header):
        if j in skip:
            continue
        codes, mapping = encode_column([row[j] for row in raw.rows], raw.declared.get(name))
        columns.append(codes)
        if mapping:
            maps[name] = mapping
    n = len(raw.rows)
    features = np.column_stack(columns) if columns else np.empty((n, 0))
    return TabularDataset(
        features=features.reshape(n, len(feature_names)),
        labels=labels,
        feature_names=tuple(feature_names),
        class_names=class_names,
        categorical_maps=maps,
        observed=~np.isnan(features.reshape(n, len(feature_names))),
    )


def read_csv_table(path: str | Path, delimiter: str = ",") -> RawTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        rows = [row for row in reader if row]
    if not rows:
        raise EmptyFile(f"{path} is empty")
    header = tuple(h.strip() for h in rows[0])
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise RaggedRow(f"{path}:{lineno}: {len(row)} cells, header has {len(header)}")
        body.append(tuple(row))
    if not body:
        raise EmptyFile(f"{path} has a header but no data rows")
    return RawTable(header=header, rows=tuple(body))


def load_csv(path: str | Path, schema: DatasetSchema, delimiter: str = ",") -> TabularDataset:
    """Load a header-first CSV file; datum_ids are the 0-based row order."""
    return encode_categoricals(read_csv_table(path, delimiter), schema)


# ---------------------------------------------------------------- ARFF


def _split_arff_row(line: str) -> list[str]:
    quote = '"' if '"' in line else "'"
    return next(csv.reader([line], quotechar=quote, skipinitialspace=True))


def _unquote(token: str) -> str:
    token = token.strip()
    if len(token) >= 2 and token[0] == token[-1] and token[0] in "'\"":
        return token[1:-1]
    return token


def parse_arff(text: str) -> RawTable:
    """Parse the dense ARFF subset: numeric and nominal attributes only."""
    header: list[str] = []
    declared: dict[str, tuple[str, ...]] = {}
    rows: list[tuple[str, ...]] = []
    in_data = False
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("%"):
            continue
        if in_data:
            if line.startswith("{"):
                raise UnsupportedArff(f"line {lineno}: sparse ARFF rows are not supported")
            cells = [_unquote(c) for c in _split_arff_row(line)]
            if len(cells) != len(header):
                raise RaggedRow(f"line {lineno}: {len(cells)} cells, {len(header)} attributes")
            rows.append(tuple(cells))
            continue
        keyword = line.split(None, 1)[0].lower()
        if keyword == "@relation":
            continue
        if keyword == "@data":
            in_data = True
            continue
        if keyword != "@attribute":
            raise UnsupportedArff(f"line {lineno}: unexpected declaration {keyword!r}")
        rest = line.split(None, 1)[1].strip()
        if rest[0] in "'\"":
            end = rest.index(rest[0], 1)
            name, spec = rest[1:end], rest[end + 1 :].strip()
        else:
            name, spec = (rest.split(None, 1) + [""])[:2]
        header.append(name)
        if spec.startswith("{"):
            body = spec[1 : spec.rindex("}")]
            declared[name] = tuple(_unquote(v) for v in _split_arff_row(body))
        elif spec.split()[0].lower() not in ("numeric", "real", "integer"):
            raise UnsupportedArff(f"attribute {name!r} has unsupported type {spec!r}")
    if not header:
        raise EmptyFile("ARFF text declares no attributes")
    if not rows:
        raise EmptyFile("ARFF text has no data rows")
    return RawTable(header=tuple(header), rows=tuple(rows), declared=declared)


Transport = Callable[[str], bytes]


def http_transport(url: str, timeout: float = 60.0) -> bytes:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return resp.read()
    except (urllib.error.URLError, OSError) as exc:
        raise NetworkError(f"GET {url} failed: {exc}") from exc


def fetch_openml(
    dataset_id: int,
    cache_dir: str | Path,
    schema: DatasetSchema | None = None,
    transport: Transport | None = None,
) -> TabularDataset:
    """Download (or read from cache) an OpenML dataset and encode it.

    The cache holds ``openml/<id>.arff`` with a ``<id>.sha256`` checksum and a
    small ``<id>.json`` description carrying the default target attribute.
    Without a schema the default target is used, falling back to the last
    attribute.
    """
    transport = transport or http_transport
    root = Path(cache_dir) / "openml"
    root.mkdir(parents=True, exist_ok=True)
    arff_path = root / f"{dataset_id}.arff"
    sha_path = root / f"{dataset_id}.sha256"
    desc_path = root / f"{dataset_id}.json"

    with FileLock(str(root / f"{dataset_id}.lock")):
        if arff_path.exists():
            payload = arff_path.read_bytes()
            expected = sha_path.read_text().strip() if sha_path.exists() else None
            if expected != hashlib.sha256(payload).hexdigest():
                raise CacheCorrupt(f"checksum mismatch for cached dataset {dataset_id}")
            description = json.loads(desc_path.read_text()) if desc_path.exists() else {}
        else:
            meta = json.loads(transport(OPENML_DESCRIPTION_URL.format(id=dataset_id)))
            info = meta.get("data_set_description", meta)
            description = {
                "id": dataset_id,
                "name": info.get("name"),
                "file_id": info.get("file_id"),
                "default_target_attribute": info.get("default_target_attribute"),
            }
            payload = transport(OPENML_DOWNLOAD_URL.format(file_id=info.get("file_id", dataset_id)))
            arff_path.write_bytes(payload)
            sha_path.write_text(hashlib.sha256(payload).hexdigest() + "\n")
            desc_path.write_text(json.dumps(description, sort_keys=True) + "\n")

    raw = parse_arff(payload.decode("utf-8"))
    if schema is None:
        target = description.get("default_target_attribute") or raw.header[-1]
        schema = DatasetSchema(target_column=target)
    return encode_categoricals(raw, schema)


# ---------------------------------------------------------------- split / subset


def split(dataset: TabularDataset, ratio: float, seed: int) -> DataSplit:
    """Seeded uniform train/test partition of the dataset's datum_ids."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    ids = np.sort(dataset.datum_ids)
    n = len(ids)
    n_train = int(math.floor(ratio * n + 0.5))
    if n_train == 0 or n_train == n:
        raise DegenerateSplit(f"ratio {ratio} on n={n} leaves one side empty")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = ids[order]
    return DataSplit(
        train_ids=tuple(int(i) for i in shuffled[:n_train]),
        test_ids=tuple(int(i) for i in shuffled[n_train:]),
        seed=int(seed),
        ratio=float(ratio),
    )


def subset(dataset: TabularDataset, ids: Sequence[int]) -> TabularDataset:
    """Rows for ``ids`` in the given order, original ids preserved."""
    index = dataset.row_of()
    try:
        rows = np.array([index[int(i)] for i in ids], dtype=np.int64)
    except KeyError as exc:
        raise UnknownId(f"datum_id {exc.args[0]} not in dataset") from None
    observed = None if dataset.observed is None else dataset.observed[rows]
    return dataset.replace(
        features=dataset.features[rows].reshape(len(rows), dataset.d),
        labels=dataset.labels[rows],
        datum_ids=dataset.datum_ids[rows],
        observed=observed,
    )


def train_test(dataset: TabularDataset, data_split: DataSplit) -> tuple[TabularDataset, TabularDataset]:
    """Materialize a split, keeping only ids that survive in ``dataset``.

    Row removal may have deleted some split members; the split itself stays
    fixed on the original ids.
    """
    present = set(int(i) for i in dataset.datum_ids)
    train_ids = [i for i in data_split.train_ids if i in present]
    test_ids = [i for i in data_split.test_ids if i in present]
    return subset(dataset, train_ids), subset(dataset, test_ids)
