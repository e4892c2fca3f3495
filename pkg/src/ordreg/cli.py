"""Command-line front end.

Commands: ``generate`` (synthetic dataset to CSV), ``train`` (fit one method,
save checkpoints), ``cv`` (cross-validated experiment over a method list),
``evaluate`` (metric suite over an exported records CSV), ``compare``
(fold-paired significance test between two result directories), ``curves``
(calibration / risk-coverage / confusion tables from records).

Exit codes: 0 success, 1 input or config error (the message names the
offending field or file), 2 runtime failure. All file outputs are written
atomically. ``ORDREG_LOG`` selects the log level (debug/info/warning/error).

Flag-vs-config precedence: ``--config`` supplies a JSON document; any flag
given on the command line overrides the corresponding config entry. The
``--seed`` flag rewrites the training seed list to seed, seed+1, ... of the
configured length (and the generator seed for ``generate``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import InputError, ProblemSpec
from .data import (
    Dataset,
    SyntheticConfig,
    TIE_POLICY_LOWEST,
    TIE_POLICY_RESAMPLE,
    generate_synthetic,
    load_csv,
    save_csv,
)
from .harness import (
    ALL_DECODES,
    METHODS,
    SUMMARY_FILE,
    TrainConfig,
    build_summary,
    compare_methods,
    paired_t_test_one_sided,
    read_records_csv,
    run_cv,
    train_single,
    write_experiment_result,
    write_summary,
)
from .ioutil import atomic_write_text, canonical_json, read_json
from .metrics import (
    ALPHA,
    DIRECTION_HIGHER,
    DIRECTION_LOWER,
    calibration_curve,
    compute_metric_report,
    confusion_matrix,
    risk_coverage,
)
from .model import EncoderConfig, save_params

log = logging.getLogger("ordreg")

TIES_PAPER = "paper"
TIES_LOWEST = "lowest"
_TIE_VOCAB = {TIES_PAPER: TIE_POLICY_RESAMPLE, TIES_LOWEST: TIE_POLICY_LOWEST}

# experiment-config defaults; any key a config file may set must appear here
_CONFIG_DEFAULTS: dict = {
    "data": None,
    "synthetic": None,
    "methods": None,
    "out": None,
    "num_classes": None,
    "folds": 5,
    "split_seed": 0,
    "seeds": [0, 1, 2],
    "epochs": 1000,
    "batch_size": 16,
    "lr": 1e-5,
    "hidden_dims": [16],
    "activation": "relu",
    "val_fraction": 0.8,
    "decode": None,
    "ties": TIES_PAPER,
    "num_bins": 10,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract reserves 2 for
    # runtime failures, so surface parse problems as input errors instead
    def error(self, message: str):
        raise InputError(message)


def _load_config(path: Optional[str]) -> dict:
    cfg = dict(_CONFIG_DEFAULTS)
    if path is None:
        return cfg
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise InputError(f"{path}: config must be a JSON object")
    for key, value in doc.items():
        if key not in _CONFIG_DEFAULTS:
            raise InputError(f"{path}: unknown config field {key!r}")
        cfg[key] = value
    return cfg


def _apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "data", None):
        cfg["data"] = args.data
    if getattr(args, "methods", None):
        cfg["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "out", None):
        cfg["out"] = args.out
    if getattr(args, "folds", None):
        cfg["folds"] = args.folds
    if getattr(args, "decode", None):
        cfg["decode"] = args.decode
    if getattr(args, "ties", None):
        cfg["ties"] = args.ties
    if getattr(args, "seed", None) is not None:
        cfg["seeds"] = [args.seed + i for i in range(len(cfg["seeds"]))]
        cfg["split_seed"] = args.seed
    return cfg


def _check_methods(names: Sequence[str]) -> list[str]:
    if not names:
        raise InputError("field 'methods': at least one method is required")
    for name in names:
        if name not in METHODS:
            raise InputError(
                f"unknown method {name!r}; valid methods: {', '.join(sorted(METHODS))}"
            )
    return list(names)


def _infer_num_classes(path: str) -> int:
    """Number of classes implied by a data CSV: count columns if present, else max vote."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        c_cols = [name for name in header if name.strip().startswith("c_")]
        if c_cols:
            try:
                return max(int(name.strip()[2:]) for name in c_cols)
            except ValueError:
                raise InputError(f"{path}: malformed count column name") from None
        r_cols = [i for i, name in enumerate(header) if name.strip().startswith("r_")]
        if not r_cols:
            raise InputError(f"{path}: no vote (r_) or count (c_) columns in header")
        top = 0
        for row in reader:
            for i in r_cols:
                field = row[i].strip() if i < len(row) else ""
                if field:
                    try:
                        top = max(top, int(field))
                    except ValueError:
                        continue  # load_csv reports the precise line later
    if top < 2:
        raise InputError(f"{path}: could not infer at least two classes from votes")
    return top


def _load_dataset(cfg: dict, seed_override: Optional[int]) -> tuple[Dataset, dict]:
    """Dataset plus a summary block describing its source."""
    if cfg["data"] is not None:
        k = cfg["num_classes"] or _infer_num_classes(cfg["data"])
        dataset = load_csv(cfg["data"], ProblemSpec(int(k)))
        source = str(cfg["data"])
    elif cfg["synthetic"] is not None:
        synth = SyntheticConfig.from_dict(cfg["synthetic"])
        if seed_override is not None:
            synth = SyntheticConfig.from_dict({**synth.to_dict(), "seed": seed_override})
        dataset = generate_synthetic(synth)
        source = "synthetic"
    else:
        raise InputError("field 'data': a data CSV (--data) or a synthetic block is required")
    info = {
        "source": source,
        "num_examples": len(dataset),
        "num_features": dataset.num_features,
        "num_classes": dataset.spec.num_classes,
        "num_tied": int(dataset.tied_mask.sum()),
    }
    return dataset, info


def _train_config(cfg: dict, method: str, input_dim: int) -> TrainConfig:
    if cfg["ties"] not in _TIE_VOCAB:
        raise InputError(f"field 'ties': must be 'paper' or 'lowest', got {cfg['ties']!r}")
    encoder = EncoderConfig(
        input_dim=input_dim,
        hidden_dims=tuple(int(h) for h in cfg["hidden_dims"]),
        activation=cfg["activation"],
    )
    return TrainConfig(
        method=method,
        encoder=encoder,
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        seeds=tuple(int(s) for s in cfg["seeds"]),
        val_fraction=float(cfg["val_fraction"]),
        decode=cfg["decode"],
        tie_policy=_TIE_VOCAB[cfg["ties"]],
        num_bins=int(cfg["num_bins"]),
    )


def _config_echo(cfg: dict, num_classes: int) -> dict:
    # everything that shapes the numbers; nothing volatile (out, jobs, argv)
    return {
        "methods": list(cfg["methods"]),
        "num_classes": num_classes,
        "folds": int(cfg["folds"]),
        "split_seed": int(cfg["split_seed"]),
        "seeds": [int(s) for s in cfg["seeds"]],
        "epochs": int(cfg["epochs"]),
        "batch_size": int(cfg["batch_size"]),
        "lr": float(cfg["lr"]),
        "hidden_dims": [int(h) for h in cfg["hidden_dims"]],
        "activation": cfg["activation"],
        "val_fraction": float(cfg["val_fraction"]),
        "decode": cfg["decode"],
        "ties": cfg["ties"],
        "num_bins": int(cfg["num_bins"]),
    }


def _meta(args: argparse.Namespace) -> dict:
    return {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "argv": list(sys.argv),
        "jobs": getattr(args, "jobs", 1),
        "out": getattr(args, "out", None),
        "version": __version__,
    }


# ===== commands =====


def _cmd_generate(args: argparse.Namespace) -> None:
    synth = SyntheticConfig.from_dict(read_json(args.config))
    if args.seed is not None:
        synth = SyntheticConfig.from_dict({**synth.to_dict(), "seed": args.seed})
    dataset = generate_synthetic(synth)
    save_csv(dataset, args.out)
    log.info("wrote %d examples to %s", len(dataset), args.out)


def _cmd_train(args: argparse.Namespace) -> None:
    cfg = _apply_flags(_load_config(args.config), args)
    methods = _check_methods(cfg["methods"] or [])
    if len(methods) != 1:
        raise InputError("field 'methods': train takes exactly one method")
    if cfg["out"] is None:
        raise InputError("field 'out': an output directory is required")
    dataset, _ = _load_dataset(cfg, args.seed)
    config = _train_config(cfg, methods[0], dataset.num_features)
    outcomes = train_single(dataset, config, split_seed=int(cfg["split_seed"]))
    out = Path(cfg["out"]) / methods[0]
    out.mkdir(parents=True, exist_ok=True)
    from .harness import history_csv_text

    histories = {o.seed: o.history for o in outcomes}
    atomic_write_text(out / "history.csv", history_csv_text(histories))
    for outcome in outcomes:
        save_params(outcome.params, out / f"seed_{outcome.seed}_params.json")
        log.info(
            "%s seed %d: best epoch %d, val UW-MAE %.6f",
            methods[0], outcome.seed, outcome.best_epoch,
            min(h.val_uw_mae for h in outcome.history),
        )
    print(f"trained {methods[0]} on {len(dataset)} examples; checkpoints in {out}")


def _cmd_cv(args: argparse.Namespace) -> None:
    cfg = _apply_flags(_load_config(args.config), args)
    methods = _check_methods(cfg["methods"] or [])
    if cfg["out"] is None:
        raise InputError("field 'out': an output directory is required")
    dataset, dataset_doc = _load_dataset(cfg, args.seed)
    results = []
    for method in methods:
        config = _train_config(cfg, method, dataset.num_features)
        result = run_cv(
            dataset,
            config,
            k=int(cfg["folds"]),
            split_seed=int(cfg["split_seed"]),
            jobs=args.jobs,
        )
        write_experiment_result(cfg["out"], result)
        results.append(result)
        mae_uw = result.mean.get("mae_uw")
        log.info("%s: mean UW-MAE %s", method, "n/a" if mae_uw is None else f"{mae_uw:.4f}")
    summary = build_summary(
        results, _config_echo(cfg, dataset.spec.num_classes), dataset_doc, _meta(args)
    )
    write_summary(cfg["out"], summary)
    print(f"wrote {Path(cfg['out']) / SUMMARY_FILE}")


def _cmd_evaluate(args: argparse.Namespace) -> None:
    records = read_records_csv(args.data)
    report = compute_metric_report(records)
    text = canonical_json(report.to_dict())
    if args.out:
        atomic_write_text(args.out, text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)


def _fold_metric_values(result_dir: Path, metric: str) -> dict[int, float]:
    from .metrics import MetricReport

    values: dict[int, float] = {}
    for fold_dir in sorted(result_dir.glob("fold_*")):
        metrics_path = fold_dir / "metrics.json"
        if not metrics_path.is_file():
            continue
        try:
            fold = int(fold_dir.name.split("_", 1)[1])
        except ValueError:
            continue
        report = MetricReport.from_dict(read_json(metrics_path))
        if metric not in report.values:
            raise InputError(f"unknown metric {metric!r}; valid: {', '.join(report.values)}")
        value = report[metric]
        if value is None:
            raise InputError(f"metric {metric!r} is undefined on fold {fold} of {result_dir}")
        values[fold] = value
    if not values:
        raise InputError(f"{result_dir}: no fold_*/metrics.json files")
    return values


def _cmd_compare(args: argparse.Namespace) -> None:
    dir_a, dir_b = Path(args.result_dirs[0]), Path(args.result_dirs[1])
    values_a = _fold_metric_values(dir_a, args.metric)
    values_b = _fold_metric_values(dir_b, args.metric)
    if set(values_a) != set(values_b):
        raise InputError("result directories do not share an identical set of folds")
    order = sorted(values_a)
    a = [values_a[f] for f in order]
    b = [values_b[f] for f in order]
    p = paired_t_test_one_sided(a, b, args.direction)
    significant = p < ALPHA
    doc = {
        "method_a": dir_a.name,
        "method_b": dir_b.name,
        "metric": args.metric,
        "direction": args.direction,
        "folds": order,
        "per_fold_a": a,
        "per_fold_b": b,
        "p_value": p,
        "alpha": ALPHA,
        "significant": significant,
    }
    verdict = "significant" if significant else "not significant"
    print(
        f"{dir_a.name} vs {dir_b.name} on {args.metric} ({args.direction}): "
        f"p = {p:.6g} ({verdict} at alpha = {ALPHA})"
    )
    if args.out:
        atomic_write_text(args.out, canonical_json(doc))


def _cmd_curves(args: argparse.Namespace) -> None:
    path = Path(args.data)
    if path.is_dir():
        path = path / "records.csv"  # fold directory shorthand
    records = read_records_csv(path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bins = calibration_curve(records)
    lines = ["bin_low,bin_high,mean_confidence,mean_true_accuracy,count"]
    for b in bins:
        conf = "" if b.mean_confidence is None else repr(b.mean_confidence)
        acc = "" if b.mean_true_accuracy is None else repr(b.mean_true_accuracy)
        lines.append(f"{b.bin_low!r},{b.bin_high!r},{conf},{acc},{b.count}")
    atomic_write_text(out / "calibration.csv", "\n".join(lines) + "\n")

    points, area = risk_coverage(records)
    lines = ["coverage,risk"]
    lines += [f"{cov!r},{risk!r}" for cov, risk in points]
    atomic_write_text(out / "risk_coverage.csv", "\n".join(lines) + "\n")
    atomic_write_text(out / "aurc.txt", repr(area) + "\n")

    for name, normalize in (("confusion.csv", False), ("confusion_row_normalized.csv", True)):
        table = confusion_matrix(records, row_normalize=normalize)
        rows = [",".join(repr(float(x)) for x in row) for row in table]
        atomic_write_text(out / name, "\n".join(rows) + "\n")
    print(f"wrote curves for {len(records)} records to {out}")


# ===== entry point =====


def _build_parser() -> _Parser:
    parser = _Parser(prog="ordreg", description=(
        "Soft-label ordinal regression: synthetic data, training, "
        "cross-validated evaluation, and uncertainty-aware metrics."
    ))
    parser.add_argument("--version", action="version", version=f"ordreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, jobs: bool = False) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--data", help="input data CSV")
        p.add_argument("--methods", help="comma-separated method names")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override all configured seeds")
        p.add_argument("--folds", type=int, help="number of cross-validation folds")
        p.add_argument("--decode", choices=ALL_DECODES, help="decode rule override")
        p.add_argument("--ties", choices=(TIES_PAPER, TIES_LOWEST),
                       help="tie policy: paper = exclude from eval, resample in training")
        if jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="worker processes for (fold, seed) jobs")

    p = sub.add_parser("generate", help="draw a synthetic dataset and write it as CSV")
    p.add_argument("--config", required=True, help="synthetic config JSON")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train one method and save per-seed checkpoints")
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("cv", help="cross-validated experiment over a method list")
    common(p, jobs=True)
    p.set_defaults(func=_cmd_cv)

    p = sub.add_parser("evaluate", help="metric suite over an exported records CSV")
    p.add_argument("--data", required=True, help="records.csv from a cv fold")
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("compare", help="paired one-sided t-test between two result dirs")
    p.add_argument("result_dirs", nargs=2, help="two <out>/<method> directories")
    p.add_argument("--metric", required=True, help="metric name, e.g. ece or mae_uw")
    p.add_argument("--direction", required=True, choices=(DIRECTION_LOWER, DIRECTION_HIGHER),
                   help="alternative hypothesis for the first directory")
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("curves", help="calibration / risk-coverage / confusion tables")
    p.add_argument("--data", required=True, help="records.csv or a fold directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_curves)

    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("ORDREG_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    try:
        args.func(args)
        return 0
    except (InputError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure, not an input problem
        log.debug("unhandled failure", exc_info=True)
        print(f"failure: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
