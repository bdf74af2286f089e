"""Command-line entry point: ``dvalaudit <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 computation error (including any failed grid cell).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .analysis import overlap_fraction, selection, subsample_by_value, subsampling_curve, tau_matrix_csv, tidy_csv
from .config import EXPERIMENT_TECHNIQUES, DatasetSource, TechniqueSpec, load_config
from .data import DatasetSchema, DataSplit, TabularDataset, split, subset, train_test
from .dvalcard import build_card, lint_card, render_markdown
from .errors import ConfigError, DValError, MissingArtifact
from .imputation import ImputationMethod, impute
from .learners import TrainConfig
from .missingness import MissingnessMask, apply_mask, induce, select_missing_features
from .runner import CURVE_COLUMNS, OVERLAP_COLUMNS, compute_values, default_cache_dir, load_source, run_experiment
from .valuation import ValuationConfig, ValueVector

EXIT_CONFIG, EXIT_MISSING, EXIT_COMPUTE = 2, 3, 4
log = logging.getLogger("dvalaudit")


# ---------------------------------------------------------------- artifacts


def write_dataset_artifact(path: str | Path, dataset: TabularDataset, schema: DatasetSchema, provenance: dict) -> None:
    payload = {"kind": "dataset", "schema": schema.to_dict(), "provenance": provenance, "data": dataset.to_dict()}
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def read_dataset_artifact(path: str | Path) -> tuple[TabularDataset, DatasetSchema, dict]:
    payload = json.loads(_read(path))
    if payload.get("kind") != "dataset":
        raise ConfigError(f"{path} is not a dataset artifact")
    return TabularDataset.from_dict(payload["data"]), DatasetSchema.from_dict(payload["schema"]), payload["provenance"]


def _read(path: str | Path) -> str:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"required artifact {p} does not exist; run the upstream command first")
    return p.read_text()


def _dataset_split(dataset: TabularDataset, args) -> DataSplit:
    if getattr(args, "split", None):
        return DataSplit.from_dict(json.loads(_read(args.split)))
    return split(dataset, args.split_ratio, args.split_seed)


def _train_config(args) -> TrainConfig:
    return TrainConfig(max_iter=args.max_iter, l2=args.l2, seed=args.seed)


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    schema = DatasetSchema(
        target_column=args.target,
        sensitive_columns=tuple(args.sensitive or ()),
        positive_label=args.positive_label,
        id_column=args.id_column,
    )
    if (args.csv is None) == (args.openml is None):
        raise ConfigError("give exactly one of --csv or --openml")
    source = DatasetSource(
        name=args.name or "dataset", schema=schema, csv=args.csv, openml=args.openml, delimiter=args.delimiter
    )
    if args.csv is not None and not Path(args.csv).exists():
        raise MissingArtifact(f"csv file {args.csv} does not exist")
    dataset = load_source(source, default_cache_dir())
    write_dataset_artifact(args.out, dataset, schema, {"source": source.describe()})
    print(f"{args.out}: n={dataset.n} d={dataset.d} classes={list(dataset.class_names)}")
    return 0


def cmd_missing(args) -> int:
    dataset, schema, prov = read_dataset_artifact(args.data)
    if args.features:
        features = [f - 1 for f in args.features] if args.one_based_features else list(args.features)
    else:
        features = select_missing_features(dataset.d, args.one_based_features)
    mask = induce(dataset, args.pattern, features, args.epsilon, args.seed)
    Path(args.out).write_text(mask.to_json())
    if args.out_data:
        masked = apply_mask(dataset, mask)
        write_dataset_artifact(args.out_data, masked, schema, {**prov, "missingness": f"{mask.pattern}-{mask.epsilon:g}"})
    print(f"{args.out}: {mask.n_missing} cells masked ({mask.realized_fraction():.4f} of affected cells)")
    return 0


def cmd_impute(args) -> int:
    dataset, schema, prov = read_dataset_artifact(args.data)
    if args.mask:
        dataset = apply_mask(dataset, MissingnessMask.from_json(_read(args.mask), shape=dataset.features.shape))
    result = impute(dataset, ImputationMethod.parse(args.method), seed=args.seed)
    write_dataset_artifact(args.out, result.data, schema, {**prov, "imputation": result.provenance()})
    print(f"{args.out}: n={result.data.n} d={result.data.d} ({result.method.spec()})")
    return 0


def cmd_value(args) -> int:
    dataset, schema, _ = read_dataset_artifact(args.data)
    if dataset.has_missing:
        raise ConfigError(f"{args.data} still has missing cells; run impute first")
    data_split = _dataset_split(dataset, args)
    train, test = train_test(dataset, data_split)
    vconfig = ValuationConfig(
        n_permutations=args.n_perm,
        truncation_tolerance=args.truncation,
        g_learning_rate=args.g_learning_rate,
        banzhaf_n_subsets=args.n_subsets,
        knn_k=args.k,
        seed=args.seed,
    )
    spec = TechniqueSpec(args.technique, vconfig, args.variant)
    values = compute_values(spec, train, test, _train_config(args), schema, dataset, args.jobs)
    values.save(args.out)
    print(f"{args.out}: {len(values)} values ({spec.label}, seed {args.seed})")
    return 0


def cmd_analyze(args) -> int:
    vectors = [ValueVector.load(_checked(p)) for p in args.values]
    labels = args.labels or [Path(p).stem for p in args.values]
    if len(labels) != len(vectors):
        raise ConfigError("--labels must match --values in length")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tau.csv").write_text(tau_matrix_csv(labels, vectors))
    rows = []
    for which in ("high", "low"):
        ref = selection(vectors[0], args.selection_fraction, which)
        for label, vec in zip(labels, vectors):
            rows.append({"which": which, "baseline": labels[0], "imputation": label,
                         "overlap_percent": overlap_fraction(ref, selection(vec, args.selection_fraction, which))})
    (out / "overlap.csv").write_text(tidy_csv(rows, ("which", "baseline", "imputation", "overlap_percent")))
    if args.data:
        dataset, schema, _ = read_dataset_artifact(args.data)
        train, test = train_test(dataset, _dataset_split(dataset, args))
        curve_rows = []
        for label, vec in zip(labels, vectors):
            for direction in args.directions:
                curve = subsampling_curve(
                    train, test, vec, args.fractions, direction, _train_config(args), schema, reference=dataset
                )
                curve_rows.extend(curve.tidy_rows(dataset=Path(args.data).stem, missingness="", imputation=label))
        (out / "curves.csv").write_text(tidy_csv(curve_rows, CURVE_COLUMNS))
    print(f"analysis written to {out}")
    return 0


def _checked(path: str) -> str:
    if not Path(path).exists():
        raise MissingArtifact(f"value artifact {path} does not exist; run `value` first")
    return path


def cmd_card(args) -> int:
    values = ValueVector.load(_checked(args.values))
    dataset, schema, prov = read_dataset_artifact(args.data)
    free_text = json.loads(_read(args.free_text)) if args.free_text else {}
    retained = subsample_by_value(values, args.fraction, args.direction)
    train = subset(dataset, values.ids.tolist())
    meta = {
        "dataset_source": prov.get("source"),
        "preprocessing": json.dumps({k: v for k, v in prov.items() if k != "source"}, sort_keys=True) or None,
        "removal_fraction": args.fraction,
        "direction": args.direction,
        "learning_algorithm": "multinomial logistic regression (full-batch gradient descent, standardized features)",
        "evaluation_data": "held-out test split",
        "configuration": json.dumps(values.sidecar(), sort_keys=True),
        "conventions": "empty coalition scores 1/K; value ties broken by ascending datum_id",
        "split": "see value artifact",
        "run_id": values.config_digest,
    }
    card = build_card(meta, values, retained, train, schema, free_text)
    Path(args.out).write_text(render_markdown(card))
    findings = lint_card(card)
    for f in findings:
        print(f"lint: {f}")
    print(f"{args.out}: {len(findings)} lint findings")
    return 0


def cmd_experiment_run(args) -> int:
    config_path = Path(args.config)
    if args.seed is not None:
        try:
            raw = json.loads(config_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        raw["master_seed"] = args.seed
        from .config import parse_config

        config = parse_config(raw, base=config_path.parent, output_dir=args.output_dir)
    else:
        config = load_config(config_path, output_dir=args.output_dir)
    manifest, recomputed = run_experiment(config, n_jobs=args.jobs, force=args.force, cache_dir=default_cache_dir())
    state = "computed" if recomputed else "up to date"
    print(f"run {manifest.run_id} {state}: {len(manifest.cells)} cells, {len(manifest.failed)} failed -> {config.run_dir}")
    for cell in manifest.failed:
        print(f"failed cell {cell['dataset']}/{cell['missingness']}/{cell['imputation']}/{cell['technique']}: "
              f"{cell.get('error')}", file=sys.stderr)
    return EXIT_COMPUTE if manifest.failed else 0


# ---------------------------------------------------------------- parser


def _add_train_args(p) -> None:
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--l2", type=float, default=1e-4)


def _add_split_args(p) -> None:
    p.add_argument("--split", help="split JSON artifact (overrides ratio/seed)")
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvalaudit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dvalaudit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a CSV or OpenML dataset into a dataset artifact")
    p.add_argument("--csv")
    p.add_argument("--openml", type=int)
    p.add_argument("--name")
    p.add_argument("--target", required=True)
    p.add_argument("--sensitive", nargs="*")
    p.add_argument("--positive-label")
    p.add_argument("--id-column")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("missing", help="induce a missingness mask")
    p.add_argument("--data", required=True)
    p.add_argument("--pattern", required=True, choices=["MCAR", "MAR", "MNAR", "mcar", "mar", "mnar"])
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--features", type=int, nargs="*")
    p.add_argument("--one-based-features", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--out-data", help="also write the masked dataset artifact")
    p.set_defaults(func=cmd_missing)

    p = sub.add_parser("impute", help="impute or drop missing cells")
    p.add_argument("--data", required=True)
    p.add_argument("--mask")
    p.add_argument("--method", required=True, help="e.g. mean, knn:k=5, mice:max_iter=10")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("value", help="compute data values")
    p.add_argument("--data", required=True)
    p.add_argument("--technique", required=True, choices=EXPERIMENT_TECHNIQUES)
    p.add_argument("--variant", default="SVAcc")
    p.add_argument("--n-perm", type=int, default=1000)
    p.add_argument("--n-subsets", type=int, default=1000)
    p.add_argument("--truncation", type=float, default=0.01)
    p.add_argument("--g-learning-rate", type=float, default=0.1)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    _add_split_args(p)
    _add_train_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_value)

    p = sub.add_parser("analyze", help="rank stability, overlap and subsampling curves")
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--labels", nargs="*")
    p.add_argument("--data", help="dataset artifact; enables subsampling curves")
    p.add_argument("--fractions", type=float, nargs="*", default=[0.0, 0.1, 0.2, 0.3])
    p.add_argument("--directions", nargs="*", default=["drop_low", "drop_high"])
    p.add_argument("--selection-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    _add_split_args(p)
    _add_train_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("card", help="render a DValCard")
    p.add_argument("--values", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--free-text", help="JSON file of author, intro and ethics fields")
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--direction", choices=["drop_low", "drop_high"], default="drop_low")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_card)

    p = sub.add_parser("experiment", help="grid experiments")
    esub = p.add_subparsers(dest="action", required=True)
    r = esub.add_parser("run", help="run every cell of a config grid")
    r.add_argument("config")
    r.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    r.add_argument("--force", action="store_true")
    r.add_argument("--seed", type=int, help="override master_seed")
    r.add_argument("--output-dir")
    r.set_defaults(func=cmd_experiment_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DValError, ValueError, ArithmeticError) as exc:
        print(f"computation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
