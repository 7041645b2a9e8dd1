"""Command-line interface.

Every subcommand is a pure function of its input files and flags: reruns
produce byte-identical artifacts, and each output file is accompanied by a
``<out>.manifest.txt`` recording the command, resolved arguments, seed,
input digests, and toolkit version (manifests differ between reruns only in
their timestamp line). Exit codes: 0 success, 1 I/O failure, 2 validation
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .datamodel import (
    Dataset,
    parse_metadata_csv,
    parse_predictions_csv,
    write_predictions_csv,
)
from .ensemble import rank_average
from .errors import FormatError, LesionbenchError
from .features import (
    FeatureTable,
    build_site_vocab,
    compute_n_images,
    encode_dataset,
    fit_norm_stats,
    write_feature_csv,
)
from .folds import (
    DEFAULT_FOLDS,
    DEFAULT_SEED,
    assign_folds,
    fold_ratio_report,
    read_folds_csv,
    write_folds_csv,
)
from .fusion import TrainConfig, read_cnn_csv, save_model, train
from .hashing import fnv1a64
from .metrics import (
    METRIC_NAMES,
    evaluate_cv,
    load_reference_scores,
    parse_score_table,
    stability,
)
from .targets import TargetScheme

THREADS_ENV_VAR = "LESIONBENCH_THREADS"


def _digest(path: Path) -> str:
    return f"fnv1a:{fnv1a64(path.read_bytes()):016x}"


def _write_manifest(
    out_path: Path,
    command: str,
    args: dict[str, object],
    inputs: dict[str, Path],
    seed: int | None,
) -> None:
    lines = [
        f"command={command}",
        f"version={__version__}",
        f"timestamp={datetime.now(timezone.utc).isoformat()}",
    ]
    if seed is not None:
        lines.append(f"seed={seed}")
    for key in sorted(args):
        lines.append(f"arg.{key}={args[key]}")
    for key in sorted(inputs):
        lines.append(f"input.{key}={_digest(inputs[key])}")
    manifest = out_path.with_name(out_path.name + ".manifest.txt")
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_dataset(path: Path) -> Dataset:
    return parse_metadata_csv(path.read_text(encoding="utf-8"))


def _cmd_split(args: argparse.Namespace) -> int:
    meta_path = Path(args.meta)
    out_path = Path(args.out)
    dataset = _load_dataset(meta_path)
    assignment = assign_folds(dataset, args.folds, args.seed)
    out_path.write_text(write_folds_csv(dataset, assignment), encoding="utf-8")
    _write_manifest(
        out_path,
        "split",
        {"meta": args.meta, "folds": args.folds, "out": args.out},
        {"meta": meta_path},
        seed=args.seed,
    )
    report = fold_ratio_report(dataset, assignment)
    for k, stats in enumerate(report.per_fold):
        print(
            f"fold {k}: size={stats.size} positives={stats.positives} "
            f"ratio={stats.positive_ratio:.6f}"
        )
    print(
        f"total: size={report.total.size} positives={report.total.positives} "
        f"ratio={report.total.positive_ratio:.6f}"
    )
    return 0


def _read_sizes_csv(text: str) -> dict[str, int]:
    import csv
    import io

    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["image_name", "image_size_bytes"]:
        raise FormatError(
            "sizes CSV must have header image_name,image_size_bytes"
        )
    sizes: dict[str, int] = {}
    for row_num, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != 2:
            raise FormatError(f"row {row_num}: expected 2 fields, got {len(row)}")
        try:
            sizes[row[0]] = int(row[1])
        except ValueError:
            raise FormatError(
                f"row {row_num}: non-integer image_size_bytes {row[1]!r}"
            ) from None
    return sizes


def _apply_sizes(dataset: Dataset, sizes: dict[str, int]) -> Dataset:
    records = [
        dataclasses.replace(r, image_size_bytes=sizes.get(r.image_name, r.image_size_bytes))
        for r in dataset.records
    ]
    return Dataset.from_records(records)


def _cmd_features(args: argparse.Namespace) -> int:
    meta_path = Path(args.meta)
    out_path = Path(args.out)
    dataset = _load_dataset(meta_path)
    inputs = {"meta": meta_path}
    if args.sizes:
        sizes_path = Path(args.sizes)
        dataset = _apply_sizes(dataset, _read_sizes_csv(sizes_path.read_text(encoding="utf-8")))
        inputs["sizes"] = sizes_path
    if any(r.image_size_bytes is None for r in dataset.records):
        print(
            "warning: image sizes missing for some records; their log-size "
            "feature encodes as 0",
            file=sys.stderr,
        )
    n_images = compute_n_images(dataset)
    vocab = build_site_vocab(dataset)
    stats = fit_norm_stats(dataset, n_images)
    matrix = encode_dataset(dataset, vocab, stats, n_images)
    table = FeatureTable(dataset.image_names, matrix)
    out_path.write_text(write_feature_csv(table), encoding="utf-8")
    _write_manifest(
        out_path,
        "features",
        {"meta": args.meta, "sizes": args.sizes or "", "out": args.out},
        inputs,
        seed=None,
    )
    return 0


def _parse_hidden(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise FormatError(f"--hidden expects H1,H2, got {text!r}")
    try:
        h1, h2 = int(parts[0]), int(parts[1])
    except ValueError:
        raise FormatError(f"--hidden expects integers, got {text!r}") from None
    return h1, h2


def _parse_scheme(text: str) -> TargetScheme:
    if text == "9c":
        return TargetScheme.NINE_CLASS
    if text == "4c":
        return TargetScheme.FOUR_CLASS
    raise FormatError(f"--scheme must be 9c or 4c, got {text!r}")


def _max_workers() -> int:
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return 1
    try:
        workers = int(raw)
    except ValueError:
        print(
            f"warning: ignoring non-integer {THREADS_ENV_VAR}={raw!r}",
            file=sys.stderr,
        )
        return 1
    return max(1, workers)


def _cmd_train(args: argparse.Namespace) -> int:
    meta_path = Path(args.meta)
    folds_path = Path(args.folds_csv)
    out_dir = Path(args.out_dir)
    dataset = _load_dataset(meta_path)
    assignment = read_folds_csv(folds_path.read_text(encoding="utf-8"))
    inputs = {"meta": meta_path, "folds": folds_path}

    n_images = compute_n_images(dataset)
    vocab = build_site_vocab(dataset)
    stats = fit_norm_stats(dataset, n_images)
    feats = FeatureTable(
        dataset.image_names, encode_dataset(dataset, vocab, stats, n_images)
    )

    cnn = None
    if args.cnn:
        cnn_path = Path(args.cnn)
        cnn = read_cnn_csv(cnn_path.read_text(encoding="utf-8"))
        inputs["cnn"] = cnn_path

    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr_peak=args.lr,
        seed=args.seed,
        hidden=_parse_hidden(args.hidden),
        scheme=_parse_scheme(args.scheme),
    )
    result = train(dataset, feats, cnn, assignment, cfg, max_workers=_max_workers())

    out_dir.mkdir(parents=True, exist_ok=True)
    oof_path = out_dir / "oof.csv"
    oof_path.write_text(write_predictions_csv(result.oof), encoding="utf-8")
    for k, model in enumerate(result.models):
        (out_dir / f"model_fold{k}.lsnb").write_bytes(save_model(model))
    history_lines = ["fold,epoch,lr,train_loss,val_auc"]
    for row in result.history:
        val = "" if row.val_auc is None else repr(row.val_auc)
        history_lines.append(
            f"{row.fold},{row.epoch},{row.lr!r},{row.train_loss!r},{val}"
        )
    (out_dir / "history.csv").write_text(
        "\n".join(history_lines) + "\n", encoding="utf-8"
    )
    _write_manifest(
        out_dir / "train",
        "train",
        {
            "meta": args.meta,
            "folds_csv": args.folds_csv,
            "cnn": args.cnn or "",
            "scheme": args.scheme,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "hidden": args.hidden,
            "out_dir": args.out_dir,
        },
        inputs,
        seed=args.seed,
    )
    report = evaluate_cv(result.oof, dataset, assignment)
    print(_format_cv(report))
    return 0


def _format_auc(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.6f}"


def _format_cv(report) -> str:
    lines = [
        f"cv_all={_format_auc(report.cv_all)}",
        f"cv_2020={_format_auc(report.cv_2020)}",
    ]
    for k, value in enumerate(report.per_fold):
        lines.append(f"fold_{k}={_format_auc(value)}")
    return "\n".join(lines)


def _cmd_evaluate(args: argparse.Namespace) -> int:
    dataset = _load_dataset(Path(args.meta))
    assignment = read_folds_csv(Path(args.folds_csv).read_text(encoding="utf-8"))
    preds = parse_predictions_csv(Path(args.preds).read_text(encoding="utf-8"))
    report = evaluate_cv(preds.to_scalar(), dataset, assignment)
    print(_format_cv(report))
    return 0


def _cmd_ensemble(args: argparse.Namespace) -> int:
    pred_paths = [Path(p) for p in args.preds.split(",") if p]
    if not pred_paths:
        raise FormatError("--preds expects a comma-separated list of CSV paths")
    models = [
        parse_predictions_csv(p.read_text(encoding="utf-8")).to_scalar()
        for p in pred_paths
    ]
    combined = rank_average(models)
    out_path = Path(args.out)
    out_path.write_text(write_predictions_csv(combined), encoding="utf-8")
    _write_manifest(
        out_path,
        "ensemble",
        {"preds": args.preds, "out": args.out},
        {f"preds{i}": p for i, p in enumerate(pred_paths)},
        seed=None,
    )
    return 0


def _cmd_stability(args: argparse.Namespace) -> int:
    if args.scores:
        table = parse_score_table(Path(args.scores).read_text(encoding="utf-8"))
    else:
        table = load_reference_scores()
    result = stability(table)
    for name, std in zip(METRIC_NAMES, result.stds):
        print(f"{name} std={std:.6f}")
    print("ranking: " + " > ".join(result.ranking))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionbench",
        description="Tabular pipeline toolkit: folds, features, fusion-head "
        "training, AUC evaluation, rank ensembling, stability analysis.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="assign patient-grouped stratified folds")
    p.add_argument("--meta", required=True, help="metadata CSV path")
    p.add_argument("--folds", type=int, default=DEFAULT_FOLDS)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True, help="output folds CSV path")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("features", help="export 14-column metadata features")
    p.add_argument("--meta", required=True)
    p.add_argument("--sizes", default=None, help="optional image_name,image_size_bytes CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("train", help="train fusion heads per fold, write OOF scores")
    p.add_argument("--meta", required=True)
    p.add_argument("--folds-csv", required=True)
    p.add_argument("--cnn", default=None, help="optional external feature CSV")
    p.add_argument("--scheme", default="9c", help="9c or 4c")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--hidden", default="512,128")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score OOF predictions against labels")
    p.add_argument("--meta", required=True)
    p.add_argument("--folds-csv", required=True)
    p.add_argument("--preds", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ensemble", help="rank-average prediction files")
    p.add_argument("--preds", required=True, help="comma-separated prediction CSVs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ensemble)

    p = sub.add_parser("stability", help="per-metric standard deviations")
    p.add_argument("--scores", default=None, help="score CSV (default: shipped table)")
    p.set_defaults(func=_cmd_stability)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LesionbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
