"""DValCard transparency reports.

A card has a title and six sections rendered in fixed order. The rendered
markdown opens with a machine-readable JSON block (fenced as
```` ```json dvalcard ````) that ``parse_front_matter`` reads back, and embeds
the system flowchart as a fenced mermaid diagram.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetSchema, TabularDataset
from .errors import EmptySection, IdMismatch
from .valuation.values import ValueVector

SECTION_TITLES = (
    "Introduction",
    "System Flowchart",
    "DVal Candidate Data",
    "DVal Method",
    "DVal Report",
    "Ethical Statement and Recommendations",
)
REQUIRED = "REQUIRED"
FRONT_MATTER_FENCE = "```json dvalcard"
DEFAULT_BINS = 20

ETHICS_FIELDS = {
    "intended_users": "Intended users, and in/out-of-scope use cases",
    "ethical_issues": "Potential ethical issues to consider",
    "legal": "Legal considerations",
    "environmental": "Environmental considerations",
    "recommendations": "Recommendations",
}
INTRO_FIELDS = ("authors", "contact", "version", "created_date", "updated_date")

# stage name -> (label, style class)
STAGES = {
    "load": ("Load candidate data", "data"),
    "missing": ("Induce missingness", "data"),
    "impute": ("Impute / clean", "data"),
    "split": ("Train/evaluation split", "data"),
    "value": ("Data valuation", "analysis"),
    "subsample": ("Value-based subsampling", "analysis"),
    "analyze": ("Analyze data values", "analysis"),
    "retrain": ("Retrain model", "model"),
    "train": ("Train model", "model"),
    "evaluate": ("Evaluate model", "model"),
}
STYLE_CLASSES = {
    "data": "fill:#d9f2d9,stroke:#2e7d32",
    "analysis": "fill:#f8d7da,stroke:#c62828",
    "model": "fill:#fff3cd,stroke:#f9a825",
}
FULL_PIPELINE = ("load", "missing", "impute", "value", "subsample", "retrain", "evaluate")


@dataclass
class ValueStats:
    min: float
    max: float
    mean: float
    count: int
    included: int
    excluded: int
    included_by_class: dict[str, int]
    excluded_by_class: dict[str, int]
    included_by_group: dict[str, dict[str, int]]
    excluded_by_group: dict[str, dict[str, int]]
    histogram_edges: list[float]
    histogram_counts: list[int]

    @classmethod
    def from_dict(cls, d: Mapping) -> "ValueStats":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def value_histogram(values: np.ndarray, bins: int = DEFAULT_BINS) -> tuple[list[float], list[int]]:
    """Equal-width bins over [min, max]; a constant vector gets one bin."""
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return [lo, hi], [int(len(values))]
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return [float(e) for e in edges], [int(c) for c in counts]


def compute_value_stats(
    values: ValueVector,
    dataset: TabularDataset,
    retained: Sequence[int],
    groups: Mapping[str, Mapping[int, object]] | None = None,
    bins: int = DEFAULT_BINS,
) -> ValueStats:
    label_of = {int(i): dataset.class_names[int(y)] for i, y in zip(dataset.datum_ids, dataset.labels)}
    missing = [int(i) for i in values.ids if int(i) not in label_of]
    if missing:
        raise IdMismatch(f"{len(missing)} valued ids are absent from the dataset, e.g. {missing[:3]}")
    kept = set(int(i) for i in retained)
    unknown = kept - set(int(i) for i in values.ids)
    if unknown:
        raise IdMismatch(f"retained ids not among valued ids: {sorted(unknown)[:3]}")
    inc_ids = [int(i) for i in values.ids if int(i) in kept]
    exc_ids = [int(i) for i in values.ids if int(i) not in kept]

    def by_class(ids):
        counts = Counter(label_of[i] for i in ids)
        return {c: counts.get(c, 0) for c in dataset.class_names}

    def by_group(ids):
        out = {}
        for name, member in (groups or {}).items():
            counts = Counter(str(member[i]) for i in ids)
            keys = sorted({str(v) for v in member.values()})
            out[name] = {k: counts.get(k, 0) for k in keys}
        return out

    edges, counts = value_histogram(values.values, bins)
    return ValueStats(
        min=float(values.values.min()),
        max=float(values.values.max()),
        mean=float(values.values.mean()),
        count=len(values),
        included=len(inc_ids),
        excluded=len(exc_ids),
        included_by_class=by_class(inc_ids),
        excluded_by_class=by_class(exc_ids),
        included_by_group=by_group(inc_ids),
        excluded_by_group=by_group(exc_ids),
        histogram_edges=edges,
        histogram_counts=counts,
    )


@dataclass
class DValCard:
    title: str
    introduction: dict
    system_flowchart: dict
    candidate_data: dict
    method: dict
    report: dict
    ethics: dict
    value_stats: ValueStats | None = None
    metadata: dict = field(default_factory=dict)

    def sections(self) -> dict[str, dict]:
        return dict(zip(SECTION_TITLES, (
            self.introduction, self.system_flowchart, self.candidate_data,
            self.method, self.report, self.ethics,
        )))


def render_flowchart(stages: Sequence[str] = FULL_PIPELINE, edges: Sequence[tuple[str, str]] | None = None) -> str:
    """Mermaid flowchart of the pipeline; node classes mark data / analysis / model stages."""
    stages = list(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown pipeline stages: {unknown}")
    if edges is None:
        edges = list(zip(stages, stages[1:]))
    lines = ["flowchart TD"]
    for s in stages:
        label, _ = STAGES[s]
        lines.append(f'    {s}["{label}"]')
    for a, b in edges:
        lines.append(f"    {a} --> {b}")
    for cls in ("data", "analysis", "model"):
        lines.append(f"    classDef {cls} {STYLE_CLASSES[cls]}")
    for s in stages:
        lines.append(f"    class {s} {STAGES[s][1]}")
    return "\n".join(lines) + "\n"


def _text(value, default=REQUIRED) -> str:
    if value is None or (isinstance(value, str) and not value.strip()):
        return default
    return str(value)


def _fmt(v: float) -> str:
    return f"{v:.7g}"


def _counts(d: Mapping) -> str:
    return ", ".join(f"{k}: {v}" for k, v in d.items()) or "none"


def build_card(
    meta: Mapping,
    values: ValueVector,
    retained: Sequence[int],
    dataset: TabularDataset,
    schema: DatasetSchema | None = None,
    free_text: Mapping | None = None,
    groups: Mapping[str, Mapping[int, object]] | None = None,
    pipeline: Sequence[str] = FULL_PIPELINE,
) -> DValCard:
    """Assemble a card from run metadata, a value vector and a subsample.

    ``meta`` carries machine provenance (dataset source, missingness and
    imputation settings, split digest, valuation and training configs,
    thresholds). ``free_text`` carries the human-authored fields; absent ones
    become ``REQUIRED`` placeholders.
    """
    free = dict(free_text or {})
    stats = compute_value_stats(values, dataset, retained, groups)
    intro = {k: free.get(k) for k in INTRO_FIELDS}
    intro["version"] = int(free.get("version", 1))
    if intro["version"] < 1:
        raise ValueError("card version must be a positive integer")
    intro = {k: (_text(v) if k != "version" else v) for k, v in intro.items()}

    fraction = meta.get("removal_fraction", 0.0)
    direction = meta.get("direction", "drop_low")
    kept_word = "highest" if direction == "drop_low" else "lowest"
    excluded_word = "lowest" if direction == "drop_low" else "highest"
    included_pct = 100.0 * stats.included / stats.count if stats.count else 0.0

    candidate = {
        "data_information": _text(free.get("data_information") or meta.get("dataset_description")),
        "data_source": _text(meta.get("dataset_source")),
        "basic_statistics": f"{dataset.n} instances, {dataset.d} features, classes {list(dataset.class_names)}",
        "preprocessing": _text(meta.get("preprocessing")),
        "split": _text(meta.get("split")),
    }
    method = {
        "technique": _text(meta.get("technique", values.technique)),
        "learning_algorithm": _text(meta.get("learning_algorithm")),
        "performance_metric": _text(meta.get("performance_metric", "test accuracy (fraction of correct argmax predictions)")),
        "evaluation_data": _text(meta.get("evaluation_data")),
        "configuration": _text(meta.get("configuration")),
        "seed": values.seed,
        "config_digest": _text(values.config_digest),
        "conventions": _text(meta.get("conventions")),
    }
    report = {
        "value_stats": (
            f"The data values range from a minimum of {_fmt(stats.min)} to a maximum of {_fmt(stats.max)}, "
            f"with mean {_fmt(stats.mean)} over {stats.count} instances."
        ),
        "excluded_summary": (
            f"{stats.excluded} instances with the {excluded_word} data values were excluded "
            f"(by class: {_counts(stats.excluded_by_class)})."
        ),
        "included_summary": (
            f"{included_pct:g}% of instances with the {kept_word} data values were included: "
            f"{stats.included} instances (by class: {_counts(stats.included_by_class)})."
        ),
        "thresholds": f"removal fraction {fraction:g} ({direction}); ties broken by ascending datum_id",
    }
    if stats.excluded_by_group:
        report["excluded_by_group"] = "; ".join(f"{k}: {_counts(v)}" for k, v in stats.excluded_by_group.items())
        report["included_by_group"] = "; ".join(f"{k}: {_counts(v)}" for k, v in stats.included_by_group.items())
    if "performance" in meta:
        report["performance"] = _text(meta["performance"])
    ethics = {k: _text(free.get(k)) for k in ETHICS_FIELDS}
    flowchart = {
        "lifecycle_context": _text(
            free.get("lifecycle_context"),
            "Data valuation runs during data preprocessing, before the model is retrained on the value-based subsample.",
        ),
        "diagram": render_flowchart(pipeline),
    }
    metadata = {
        "technique": values.technique,
        "seed": int(values.seed),
        "config_digest": values.config_digest,
        "n_samples": int(values.n_samples),
        "utility_full": values.utility_full,
        "utility_empty": values.utility_empty,
        "dataset_source": meta.get("dataset_source"),
        "split_digest": meta.get("split_digest"),
        "missingness": meta.get("missingness"),
        "imputation": meta.get("imputation"),
        "run_id": meta.get("run_id"),
    }
    if schema is not None:
        metadata["schema"] = schema.to_dict()
    return DValCard(
        title=_text(free.get("title") or meta.get("title"), f"{values.technique} values"),
        introduction=intro,
        system_flowchart=flowchart,
        candidate_data=candidate,
        method=method,
        report=report,
        ethics=ethics,
        value_stats=stats,
        metadata=metadata,
    )


_LABELS = {
    "authors": "Developed by", "contact": "Contact", "version": "Version",
    "created_date": "Created", "updated_date": "Updated",
    "lifecycle_context": "DVal in the life cycle context",
    "data_information": "Data information", "data_source": "Data source",
    "basic_statistics": "Basic statistics", "preprocessing": "Data preprocessing", "split": "Split",
    "technique": "DVal technique", "learning_algorithm": "Learning algorithm",
    "performance_metric": "Performance metric", "evaluation_data": "Evaluation data",
    "configuration": "Configuration", "seed": "Seed", "config_digest": "Config digest",
    "conventions": "Conventions",
    "value_stats": "Data values", "excluded_summary": "Removed/excluded instances",
    "included_summary": "Chosen/included instances", "thresholds": "Thresholds",
    "excluded_by_group": "Excluded by group", "included_by_group": "Included by group",
    "performance": "Performance before/after",
    **ETHICS_FIELDS,
}


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list | tuple):
        return [_json_safe(v) for v in obj]
    return obj


def render_markdown(card: DValCard) -> str:
    """Deterministic markdown: JSON front matter, title, then the six sections."""
    for name, body in card.sections().items():
        if not body or all(v in (None, "") for v in body.values()):
            raise EmptySection(f"section {name!r} is empty")
    front = {
        "title": card.title,
        "metadata": card.metadata,
        "value_stats": asdict(card.value_stats) if card.value_stats else None,
        "sections": {name: sorted(body) for name, body in card.sections().items()},
    }
    out = [FRONT_MATTER_FENCE, json.dumps(_json_safe(front), sort_keys=True, indent=1), "```", ""]
    out.append(f"# DValCard: {card.title}")
    out.append("")
    for name, body in card.sections().items():
        out.append(f"## {name}")
        out.append("")
        for key, value in body.items():
            if key == "diagram":
                continue
            out.append(f"- **{_LABELS.get(key, key)}.** {value}")
        if "diagram" in body:
            out.extend(["", "```mermaid", body["diagram"].rstrip("\n"), "```"])
        out.append("")
    return "\n".join(out)


def parse_front_matter(text: str) -> dict:
    start = text.index(FRONT_MATTER_FENCE) + len(FRONT_MATTER_FENCE)
    end = text.index("\n```", start)
    return json.loads(text[start:end])


def lint_card(card: DValCard | str) -> list[str]:
    """Completeness findings; an empty list means the card is clean."""
    findings = []
    if isinstance(card, str):
        headings = re.findall(r"^## (.+)$", card, flags=re.M)
        for title in SECTION_TITLES:
            if title not in headings:
                findings.append(f"missing section: {title}")
        if headings != list(SECTION_TITLES) and not findings:
            findings.append("sections out of order")
        try:
            front = parse_front_matter(card)
        except (ValueError, json.JSONDecodeError):
            return findings + ["missing or malformed front matter"]
        meta = front.get("metadata", {})
        stats = front.get("value_stats") or {}
        for line in card.splitlines():
            if REQUIRED in line and line.startswith("- **"):
                findings.append(f"placeholder: {line.split('**')[1].rstrip('.')}")
    else:
        for title, body in card.sections().items():
            if not body:
                findings.append(f"missing section: {title}")
            for key, value in body.items():
                if value == REQUIRED:
                    findings.append(f"placeholder: {title} / {_LABELS.get(key, key)}")
        meta = card.metadata
        stats = asdict(card.value_stats) if card.value_stats else {}
    if not meta.get("dataset_source"):
        findings.append("absent dataset provenance")
    if not meta.get("config_digest") or meta.get("seed") is None:
        findings.append("absent seed or config digest")
    if stats.get("excluded", 0) > 0 and not stats.get("excluded_by_class"):
        findings.append("exclusion occurred without a per-class breakdown (Removed/Excluded Instances)")
    return findings
