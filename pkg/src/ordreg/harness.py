"""Experiment orchestration: training loops, cross-validation, method comparison.

A method name binds a loss to its head and a default decode rule:

    ce, ce_soft          softmax head, argmax decode
    sord_ae, sord_se     softmax head, argmax decode
    or_cnn, or_soft      independent task head, counting decode
    coral, coral_soft    shared-slope-bias task head, counting decode
    corn                 independent task head (conditional), counting decode

The cross-validation pipeline per fold: train one model per seed, average the
predicted class distributions across seeds, decode the ensemble, evaluate on
the non-tied test examples. Model selection within a training run snapshots
the epoch with the lowest validation uncertainty-weighted MAE.

Determinism contract: every number in an ExperimentResult is fixed by the
dataset, the split seed, and the config, independent of how many worker
processes computed it. Jobs are (fold, seed) pairs; the reduce is ordered.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import losses as losses_mod
from .core import (
    ClassDistribution,
    InputError,
    ProblemSpec,
    RatingDistribution,
    TIE_LOWEST,
    TaskProbabilities,
    class_distribution_from_tasks,
    decode_argmax,
    decode_count,
    exceedance_from_soft,
)
from .data import (
    ALL_TIE_POLICIES,
    Dataset,
    Fold,
    TIE_POLICY_RESAMPLE,
    resolve_ties,
    stratified_k_fold,
    train_val_split,
)
from .ioutil import atomic_write_text, canonical_json
from .metrics import (
    ALPHA,
    DEFAULT_NUM_BINS,
    EvalRecord,
    MetricReport,
    compute_metric_report,
    eval_record,
    paired_t_test_one_sided,
)
from .model import (
    EncoderConfig,
    ModelParams,
    adam_step,
    ensemble_average,
    forward,
    init_adam_state,
    init_params,
    loss_and_gradient,
    sigmoid,
    softmax,
)

DECODE_COUNT = "count"
DECODE_ARGMAX = "argmax"
ALL_DECODES = (DECODE_COUNT, DECODE_ARGMAX)

# per-operation RNG streams (see data.py for the dataset-side constants)
_STREAM_SHUFFLE = 41
_STREAM_TIE_RESAMPLE = 42

METRICS_FILE = "metrics.json"
RECORDS_FILE = "records.csv"
HISTORY_FILE = "history.csv"
SUMMARY_FILE = "summary.json"


class TrainingDiverged(RuntimeError):
    """Raised when a training run produces a non-finite loss."""


@dataclass(frozen=True)
class MethodSpec:
    name: str
    loss_kind: str
    head_kind: str
    default_decode: str
    uses_hard_targets: bool


METHODS: dict[str, MethodSpec] = {
    m.name: m
    for m in (
        MethodSpec("ce", losses_mod.LOSS_CE, "softmax", DECODE_ARGMAX, True),
        MethodSpec("ce_soft", losses_mod.LOSS_CE_SOFT, "softmax", DECODE_ARGMAX, False),
        MethodSpec("or_cnn", losses_mod.LOSS_OR_CNN, "independent", DECODE_COUNT, True),
        MethodSpec("or_soft", losses_mod.LOSS_OR_SOFT, "independent", DECODE_COUNT, False),
        MethodSpec("coral", losses_mod.LOSS_OR_CNN, "shared-slope-bias", DECODE_COUNT, True),
        MethodSpec("coral_soft", losses_mod.LOSS_OR_SOFT, "shared-slope-bias", DECODE_COUNT, False),
        MethodSpec("corn", losses_mod.LOSS_CORN, "independent", DECODE_COUNT, True),
        MethodSpec("sord_ae", losses_mod.LOSS_SORD_AE, "softmax", DECODE_ARGMAX, True),
        MethodSpec("sord_se", losses_mod.LOSS_SORD_SE, "softmax", DECODE_ARGMAX, True),
    )
}


@dataclass(frozen=True)
class TrainConfig:
    """One method's training settings. ``decode=None`` keeps the method default."""

    method: str
    encoder: EncoderConfig
    epochs: int = 1000
    batch_size: int = 16
    lr: float = 1e-5
    seeds: tuple[int, ...] = (0, 1, 2)
    val_fraction: float = 0.8
    decode: Optional[str] = None
    tie_policy: str = TIE_POLICY_RESAMPLE
    num_bins: int = DEFAULT_NUM_BINS
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise InputError(
                f"unknown method {self.method!r}; valid: {', '.join(sorted(METHODS))}"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise InputError(f"lr must be > 0, got {self.lr}")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds or len(set(seeds)) != len(seeds):
            raise InputError("seeds must be a non-empty list of distinct integers")
        object.__setattr__(self, "seeds", seeds)
        if not 0.0 < self.val_fraction < 1.0:
            raise InputError("val_fraction must lie strictly between 0 and 1")
        if self.decode is not None and self.decode not in ALL_DECODES:
            raise InputError(f"decode must be one of {ALL_DECODES}, got {self.decode!r}")
        if self.tie_policy not in ALL_TIE_POLICIES:
            raise InputError(
                f"tie_policy must be one of {ALL_TIE_POLICIES}, got {self.tie_policy!r}"
            )
        if self.num_bins < 1:
            raise InputError("num_bins must be >= 1")

    @property
    def effective_decode(self) -> str:
        return self.decode if self.decode is not None else METHODS[self.method].default_decode


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_uw_mae: float


@dataclass(frozen=True)
class TrainOutcome:
    seed: int
    params: ModelParams
    history: tuple[EpochStats, ...]
    best_epoch: int


def predict_prob_matrix(params: ModelParams, method: str, features: np.ndarray) -> np.ndarray:
    """Per-example predicted class distributions, one row per feature row."""
    spec = METHODS[method]
    logits = np.atleast_2d(forward(params, features))
    if spec.head_kind == "softmax":
        return softmax(logits)
    probs = sigmoid(logits)
    rows = []
    for row in probs:
        if spec.loss_kind == losses_mod.LOSS_CORN:
            tasks = losses_mod.corn_unconditional(row)
        else:
            tasks = TaskProbabilities(row)
        rows.append(class_distribution_from_tasks(tasks).probs)
    return np.asarray(rows)


def decode_distribution(dist: ClassDistribution, rule: str) -> int:
    """Hard class from a predicted distribution under the given decode rule."""
    if rule == DECODE_ARGMAX:
        return decode_argmax(dist, TIE_LOWEST)
    if rule == DECODE_COUNT:
        exc = exceedance_from_soft(dist)
        return decode_count(TaskProbabilities(exc.exceed))
    raise InputError(f"decode must be one of {ALL_DECODES}, got {rule!r}")


def _epoch_targets(
    dataset: Dataset, config: TrainConfig, indices: Sequence[int], hard: np.ndarray
) -> list:
    kind = METHODS[config.method].loss_kind
    if kind in (losses_mod.LOSS_CE, losses_mod.LOSS_OR_CNN, losses_mod.LOSS_CORN,
                losses_mod.LOSS_SORD_AE, losses_mod.LOSS_SORD_SE):
        return [int(hard[i]) for i in indices]
    if kind == losses_mod.LOSS_CE_SOFT:
        return [dataset.soft[i] for i in indices]
    return [dataset.exceed[i] for i in indices]  # or_soft


def train_one(
    dataset: Dataset,
    config: TrainConfig,
    train_indices: Sequence[int],
    val_indices: Sequence[int],
    seed: int,
) -> TrainOutcome:
    """Train one model, snapshotting the best-validation epoch.

    Snapshot rule: strictly lower validation UW-MAE replaces the incumbent,
    so ties keep the earliest epoch. Non-finite losses abort the run with
    :class:`TrainingDiverged`.
    """
    if len(train_indices) == 0 or len(val_indices) == 0:
        raise InputError("train and validation sets must be non-empty")
    method = METHODS[config.method]
    spec = dataset.spec
    params = init_params(config.encoder, method.head_kind, spec, seed)
    adam = init_adam_state(params, lr=config.lr, beta1=config.beta1,
                           beta2=config.beta2, eps=config.eps)
    ties = resolve_ties(dataset, config.tie_policy)
    mask = ties.eval_mask()
    val_keep = [i for i in val_indices if mask[i]]
    if not val_keep:
        raise InputError("every validation example is tie-excluded; cannot select a model")
    val_x = dataset.features[val_keep]
    val_w = dataset.soft[val_keep].max(axis=1)
    val_h = dataset.hard[val_keep].astype(np.float64)
    decode_rule = config.effective_decode

    shuffle_rng = np.random.default_rng([int(seed), _STREAM_SHUFFLE])
    tie_rng = np.random.default_rng([int(seed), _STREAM_TIE_RESAMPLE])
    resampling = method.uses_hard_targets and config.tie_policy == TIE_POLICY_RESAMPLE

    train_idx = [int(i) for i in train_indices]
    n_train = len(train_idx)
    static_targets = None
    if not resampling:
        static_targets = _epoch_targets(dataset, config, train_idx, dataset.hard)

    best_mae = np.inf
    best_params = params
    best_epoch = 0
    history: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        if resampling:
            targets = _epoch_targets(
                dataset, config, train_idx, ties.sample_hard_labels(tie_rng)
            )
        else:
            targets = static_targets
        perm = shuffle_rng.permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, config.batch_size):
            chunk = perm[start : start + config.batch_size]
            batch = [(dataset.features[train_idx[j]], targets[j]) for j in chunk]
            loss, grad = loss_and_gradient(params, batch, method.loss_kind)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"{config.method} seed {seed}: non-finite loss at epoch {epoch}"
                )
            params, adam = adam_step(params, grad, adam)
            loss_sum += loss * len(chunk)
        train_loss = loss_sum / n_train

        probs = predict_prob_matrix(params, config.method, val_x)
        preds = np.asarray(
            [decode_distribution(ClassDistribution(row), decode_rule) for row in probs],
            dtype=np.float64,
        )
        val_mae = float((val_w * np.abs(preds - val_h)).sum() / val_w.sum())
        history.append(EpochStats(epoch=epoch, train_loss=train_loss, val_uw_mae=val_mae))
        if val_mae < best_mae:
            best_mae = val_mae
            best_params = params  # adam_step allocates fresh arrays, aliasing is safe
            best_epoch = epoch
    return TrainOutcome(seed=int(seed), params=best_params,
                        history=tuple(history), best_epoch=best_epoch)


@dataclass(frozen=True)
class FoldOutcome:
    fold: int
    status: str
    error: str
    report: Optional[MetricReport]
    records: tuple[EvalRecord, ...]
    best_epochs: dict[int, int]
    histories: dict[int, tuple[EpochStats, ...]]


@dataclass(frozen=True)
class ExperimentResult:
    method: str
    folds: tuple[FoldOutcome, ...]
    mean: dict[str, Optional[float]]
    std: dict[str, Optional[float]]
    partial: bool

    def completed_folds(self) -> tuple[FoldOutcome, ...]:
        return tuple(f for f in self.folds if f.status == "ok")


def _fold_seed_job(
    dataset: Dataset, config: TrainConfig, fold: Fold, seed: int
) -> tuple[int, tuple[EpochStats, ...], int, np.ndarray]:
    outcome = train_one(dataset, config, fold.train, fold.val, seed)
    probs = predict_prob_matrix(outcome.params, config.method, dataset.features[list(fold.test)])
    return outcome.seed, outcome.history, outcome.best_epoch, probs


def _aggregate(
    reports: Sequence[MetricReport],
) -> tuple[dict[str, Optional[float]], dict[str, Optional[float]]]:
    from .metrics import _METRIC_NAMES  # same fixed ordering as the reports

    mean: dict[str, Optional[float]] = {}
    std: dict[str, Optional[float]] = {}
    for name in _METRIC_NAMES:
        values = [r[name] for r in reports if r[name] is not None]
        mean[name] = float(np.mean(values)) if values else None
        std[name] = float(np.std(values, ddof=1)) if len(values) >= 2 else None
    return mean, std


def run_cv(
    dataset: Dataset,
    config: TrainConfig,
    k: int = 5,
    split_seed: int = 0,
    jobs: int = 1,
) -> ExperimentResult:
    """Cross-validated evaluation of one method with per-fold seed ensembling.

    ``jobs`` > 1 trains (fold, seed) pairs in worker processes; results are
    reduced in a fixed order, so the output is identical to a serial run.
    """
    split = stratified_k_fold(dataset, k, split_seed, config.val_fraction)
    ties = resolve_ties(dataset, config.tie_policy)
    mask = ties.eval_mask()
    keys = [(fi, seed) for fi in range(k) for seed in config.seeds]

    job_out: dict[tuple[int, int], tuple] = {}
    job_err: dict[tuple[int, int], BaseException] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                key: pool.submit(_fold_seed_job, dataset, config, split.folds[key[0]], key[1])
                for key in keys
            }
            for key in keys:
                try:
                    job_out[key] = futures[key].result()
                except TrainingDiverged as err:
                    job_err[key] = err
    else:
        for fi, seed in keys:
            try:
                job_out[(fi, seed)] = _fold_seed_job(dataset, config, split.folds[fi], seed)
            except TrainingDiverged as err:
                job_err[(fi, seed)] = err

    fold_outcomes: list[FoldOutcome] = []
    for fi in range(k):
        fold = split.folds[fi]
        failures = [job_err[(fi, s)] for s in config.seeds if (fi, s) in job_err]
        histories = {}
        best_epochs = {}
        prob_stack = []
        for s in config.seeds:
            if (fi, s) in job_out:
                seed, history, best_epoch, probs = job_out[(fi, s)]
                histories[seed] = history
                best_epochs[seed] = best_epoch
                prob_stack.append(probs)
        if failures:
            fold_outcomes.append(
                FoldOutcome(fold=fi + 1, status="failed", error=str(failures[0]),
                            report=None, records=(), best_epochs=best_epochs,
                            histories=histories)
            )
            continue
        ens = np.mean(np.asarray(prob_stack), axis=0)
        records = []
        for row, idx in zip(ens, fold.test):
            if not mask[idx]:
                continue  # tie-excluded from evaluation
            dist = ClassDistribution(row)
            pred = decode_distribution(dist, config.effective_decode)
            records.append(
                eval_record(
                    soft=dataset.soft_distribution(idx),
                    pred_dist=dist,
                    pred_hard=pred,
                    example_id=dataset.ids[idx],
                )
            )
        if not records:
            fold_outcomes.append(
                FoldOutcome(fold=fi + 1, status="failed",
                            error="no evaluable test examples after tie exclusion",
                            report=None, records=(), best_epochs=best_epochs,
                            histories=histories)
            )
            continue
        report = compute_metric_report(records, config.num_bins)
        fold_outcomes.append(
            FoldOutcome(fold=fi + 1, status="ok", error="", report=report,
                        records=tuple(records), best_epochs=best_epochs,
                        histories=histories)
        )

    completed = [f.report for f in fold_outcomes if f.status == "ok"]
    partial = len(completed) < k
    if partial:
        warnings.warn(
            f"{config.method}: {k - len(completed)} of {k} folds failed; "
            "aggregates cover completed folds only",
            stacklevel=2,
        )
    mean, std = _aggregate(completed) if completed else ({}, {})
    return ExperimentResult(
        method=config.method,
        folds=tuple(fold_outcomes),
        mean=mean,
        std=std,
        partial=partial,
    )


def train_single(
    dataset: Dataset, config: TrainConfig, split_seed: int = 0
) -> list[TrainOutcome]:
    """Train one model per seed on a stratified train/val split of the whole set."""
    train, val = train_val_split(
        range(len(dataset)), dataset.hard, config.val_fraction, split_seed
    )
    return [train_one(dataset, config, train, val, s) for s in config.seeds]


@dataclass(frozen=True)
class Comparison:
    """Paired one-sided fold-level test between two methods on one metric."""

    method_a: str
    method_b: str
    metric: str
    direction: str
    per_fold_a: tuple[float, ...]
    per_fold_b: tuple[float, ...]
    p_value: float
    alpha: float
    significant: bool

    def to_dict(self) -> dict:
        return {
            "method_a": self.method_a,
            "method_b": self.method_b,
            "metric": self.metric,
            "direction": self.direction,
            "per_fold_a": list(self.per_fold_a),
            "per_fold_b": list(self.per_fold_b),
            "p_value": self.p_value,
            "alpha": self.alpha,
            "significant": self.significant,
        }


def compare_methods(
    result_a: ExperimentResult,
    result_b: ExperimentResult,
    metric: str,
    direction: str,
    alpha: float = ALPHA,
) -> Comparison:
    """Significance of method a vs b, paired across the shared test folds."""
    folds_a = {f.fold: f for f in result_a.completed_folds()}
    folds_b = {f.fold: f for f in result_b.completed_folds()}
    if set(folds_a) != set(folds_b) or not folds_a:
        raise InputError("results do not share an identical set of completed folds")
    order = sorted(folds_a)
    values_a, values_b = [], []
    for fold in order:
        va = folds_a[fold].report[metric]
        vb = folds_b[fold].report[metric]
        if va is None or vb is None:
            raise InputError(f"metric {metric!r} is undefined on fold {fold}")
        values_a.append(va)
        values_b.append(vb)
    p = paired_t_test_one_sided(values_a, values_b, direction)
    return Comparison(
        method_a=result_a.method,
        method_b=result_b.method,
        metric=metric,
        direction=direction,
        per_fold_a=tuple(values_a),
        per_fold_b=tuple(values_b),
        p_value=p,
        alpha=alpha,
        significant=p < alpha,
    )


# ===== result files =====
#
# results/<method>/fold_<i>/{metrics.json, records.csv, history.csv} plus
# results/summary.json. metrics.json and records.csv are free of volatile
# fields so re-running the metrics over the records reproduces the json
# byte for byte; timestamps and process facts live only in summary's meta.


def _fmt(x: float) -> str:
    return repr(float(x))  # shortest round-trip decimal


def records_csv_text(records: Sequence[EvalRecord]) -> str:
    if not records:
        raise InputError("no records to export")
    k = records[0].soft.num_classes
    header = (
        ["id", "hard", "pred_hard", "weight"]
        + [f"soft_{c}" for c in range(1, k + 1)]
        + [f"pred_{c}" for c in range(1, k + 1)]
    )
    lines = [",".join(header)]
    for r in records:
        fields = [r.example_id, str(r.hard), str(r.pred_hard), _fmt(r.weight)]
        fields += [_fmt(x) for x in r.soft.probs]
        fields += [_fmt(x) for x in r.pred_dist.probs]
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def read_records_csv(path) -> list[EvalRecord]:
    """Rebuild EvalRecords from an exported records.csv, bit-exact."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty records file") from None
        soft_cols = [i for i, name in enumerate(header) if name.startswith("soft_")]
        pred_cols = [i for i, name in enumerate(header) if name.startswith("pred_") and name != "pred_hard"]
        try:
            id_col = header.index("id")
            hard_col = header.index("hard")
            pred_hard_col = header.index("pred_hard")
            weight_col = header.index("weight")
        except ValueError as missing:
            raise InputError(f"{path}: records header is missing a column: {missing}") from None
        if not soft_cols or len(soft_cols) != len(pred_cols):
            raise InputError(f"{path}: records header needs matching soft_/pred_ columns")
        records = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                soft = np.asarray([float(row[i]) for i in soft_cols])
                pred = np.asarray([float(row[i]) for i in pred_cols])
                records.append(
                    EvalRecord(
                        soft=RatingDistribution(soft),
                        hard=int(row[hard_col]),
                        pred_dist=ClassDistribution(pred),
                        pred_hard=int(row[pred_hard_col]),
                        weight=float(row[weight_col]),
                        rater_classes=frozenset(
                            int(i) + 1 for i in np.flatnonzero(soft > 0.0)
                        ),
                        example_id=row[id_col],
                    )
                )
            except (ValueError, InputError) as err:
                raise InputError(f"{path} line {line_no}: {err}") from None
    if not records:
        raise InputError(f"{path}: no records")
    return records


def history_csv_text(histories: dict[int, tuple[EpochStats, ...]]) -> str:
    lines = ["seed,epoch,train_loss,val_uw_mae"]
    for seed in sorted(histories):
        for stats in histories[seed]:
            lines.append(
                f"{seed},{stats.epoch},{_fmt(stats.train_loss)},{_fmt(stats.val_uw_mae)}"
            )
    return "\n".join(lines) + "\n"


def write_experiment_result(out_dir, result: ExperimentResult) -> None:
    base = Path(out_dir) / result.method
    for fold in result.folds:
        fold_path = base / f"fold_{fold.fold}"
        fold_path.mkdir(parents=True, exist_ok=True)
        if fold.histories:
            atomic_write_text(fold_path / HISTORY_FILE, history_csv_text(fold.histories))
        if fold.status != "ok":
            continue
        atomic_write_text(fold_path / METRICS_FILE, canonical_json(fold.report.to_dict()))
        atomic_write_text(fold_path / RECORDS_FILE, records_csv_text(list(fold.records)))


def result_summary_block(result: ExperimentResult) -> dict:
    folds = []
    for fold in result.folds:
        if fold.status == "ok":
            doc = fold.report.to_dict()
            folds.append(
                {
                    "fold": fold.fold,
                    "status": "ok",
                    "metrics": doc["metrics"],
                    "num_records": doc["num_records"],
                    "missing_classes": doc["missing_classes"],
                    "undefined": doc["undefined"],
                    "best_epochs": {str(s): e for s, e in fold.best_epochs.items()},
                }
            )
        else:
            folds.append({"fold": fold.fold, "status": "failed", "error": fold.error})
    return {
        "mean": result.mean,
        "std": result.std,
        "partial": result.partial,
        "folds": folds,
    }


def build_summary(
    results: Sequence[ExperimentResult],
    config_doc: dict,
    dataset_doc: dict,
    meta: dict,
) -> dict:
    """Assemble summary.json. Everything volatile must arrive inside ``meta``."""
    return {
        "meta": meta,
        "config": config_doc,
        "dataset": dataset_doc,
        "methods": {r.method: result_summary_block(r) for r in results},
    }


def write_summary(out_dir, doc: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / SUMMARY_FILE, canonical_json(doc))
