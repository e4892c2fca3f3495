"""Evaluation suite over per-example records carrying rater-distribution labels.

The unit every metric consumes is an :class:`EvalRecord`: one example's rating
distribution (soft label), its mode rating (hard label), the model's predicted
class distribution, the decoded hard prediction, and an agreement weight
``w`` equal to the fraction of raters that chose the mode.

Conventions shared by the whole suite:

* "UW" metrics weigh example i by ``w_i``; unweighted variants set ``w_i = 1``.
* Confidence of a prediction is the max entry of the predicted distribution;
  "true accuracy" of a prediction is the soft-label mass on the predicted
  class, so calibration is judged against the rater distribution rather than
  the mode.
* Metrics that are undefined for degenerate inputs (constant ranks, empty
  agreement mass) return None and are listed in the report's ``undefined``
  field, never NaN.

All functions are pure over immutable record sequences and safe to call
concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ClassDistribution, InputError, RatingDistribution

DEFAULT_NUM_BINS = 10
ALPHA = 0.05

DIRECTION_LOWER = "lower"
DIRECTION_HIGHER = "higher"

_WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class EvalRecord:
    """One evaluated example.

    ``rater_classes`` is the set of classes any rater chose (nonzero soft
    mass); ``weight`` is the soft-label maximum. ``example_id`` is optional
    plumbing for traceable exports and does not affect any metric.
    """

    soft: RatingDistribution
    hard: int
    pred_dist: ClassDistribution
    pred_hard: int
    weight: float
    rater_classes: frozenset[int]
    example_id: str = ""

    def __post_init__(self) -> None:
        k = self.soft.num_classes
        if self.pred_dist.num_classes != k:
            raise InputError("soft and pred_dist disagree on the number of classes")
        if not 1 <= self.hard <= k or not 1 <= self.pred_hard <= k:
            raise InputError(f"labels must lie in 1..{k}")
        if abs(self.weight - float(self.soft.probs.max())) > _WEIGHT_TOL:
            raise InputError("weight must equal the soft label's maximum entry")
        if not 0.0 < self.weight <= 1.0:
            raise InputError("weight must lie in (0, 1]")
        object.__setattr__(self, "rater_classes", frozenset(int(c) for c in self.rater_classes))
        if self.hard not in self.rater_classes:
            raise InputError("the mode class must be one of the rater classes")


def eval_record(
    soft, pred_dist, pred_hard: Optional[int] = None, example_id: str = ""
) -> EvalRecord:
    """Build an EvalRecord, deriving mode, weight, and rater classes from ``soft``.

    ``pred_hard`` defaults to the argmax of ``pred_dist`` (lowest class on an
    exact tie). Accepts bare arrays or the wrapper types.
    """
    soft_d = soft if isinstance(soft, RatingDistribution) else RatingDistribution(np.asarray(soft, float))
    pred_d = pred_dist if isinstance(pred_dist, ClassDistribution) else ClassDistribution(np.asarray(pred_dist, float))
    p = soft_d.probs
    hard = int(np.argmax(p)) + 1  # lowest class on ties
    if pred_hard is None:
        pred_hard = int(np.argmax(pred_d.probs)) + 1
    return EvalRecord(
        soft=soft_d,
        hard=hard,
        pred_dist=pred_d,
        pred_hard=int(pred_hard),
        weight=float(p.max()),
        rater_classes=frozenset(int(i) + 1 for i in np.flatnonzero(p > 0.0)),
        example_id=example_id,
    )


def _require_records(records: Sequence[EvalRecord]) -> int:
    if len(records) == 0:
        raise InputError("metrics need at least one record")
    k = records[0].soft.num_classes
    if any(r.soft.num_classes != k for r in records):
        raise InputError("records disagree on the number of classes")
    return k


def abs_error(record: EvalRecord) -> float:
    return float(abs(record.pred_hard - record.hard))


def is_correct(record: EvalRecord) -> float:
    return 1.0 if record.pred_hard == record.hard else 0.0


def weighted_metric_mean(
    records: Sequence[EvalRecord],
    per_example_metric: Callable[[EvalRecord], float],
    use_weights: bool,
) -> float:
    """Agreement-weighted mean of a per-example metric: sum(w m) / sum(w)."""
    _require_records(records)
    values = np.asarray([per_example_metric(r) for r in records])
    if not use_weights:
        return float(values.sum() / len(records))
    w = np.asarray([r.weight for r in records])
    return float((w * values).sum() / w.sum())


def mae(records: Sequence[EvalRecord], use_weights: bool = True) -> float:
    return weighted_metric_mean(records, abs_error, use_weights)


def accuracy(records: Sequence[EvalRecord], use_weights: bool = True) -> float:
    return weighted_metric_mean(records, is_correct, use_weights)


def qwk_from_pairs(
    labels_a: Sequence[int],
    labels_b: Sequence[int],
    num_classes: int,
    weights: Optional[Sequence[float]] = None,
) -> Optional[float]:
    """Quadratically weighted kappa between two label sequences.

    kappa = 1 - S_O / S_E with S_O the quadratic-penalty mass of the observed
    contingency table and S_E that of the expected table (outer product of
    the observed marginals, normalized to the observed mass). The (K-1)^2
    penalty normalization cancels in the ratio and is omitted, which keeps
    clean cases exact in floating point. ``weights`` accumulates per-example
    mass into the table (agreement weighting); omitted means counts.

    Returns None when S_E is zero (all mass in one cell of both marginals),
    where agreement-above-chance is undefined.
    """
    a = np.asarray(labels_a, dtype=np.int64)
    b = np.asarray(labels_b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise InputError("label sequences must be equal-length, 1-d, non-empty")
    if np.any(a < 1) or np.any(a > num_classes) or np.any(b < 1) or np.any(b > num_classes):
        raise InputError(f"labels must lie in 1..{num_classes}")
    w = np.ones(a.size) if weights is None else np.asarray(weights, dtype=np.float64)
    table = np.zeros((num_classes, num_classes))
    np.add.at(table, (a - 1, b - 1), w)
    idx = np.arange(num_classes, dtype=np.float64)
    penalty = (idx[:, None] - idx[None, :]) ** 2
    mass = table.sum()
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / mass
    s_obs = float((penalty * table).sum())
    s_exp = float((penalty * expected).sum())
    if s_exp == 0.0:
        return None
    return 1.0 - s_obs / s_exp


def qwk(records: Sequence[EvalRecord], use_weights: bool = True) -> Optional[float]:
    """Kappa between hard labels and hard predictions over the records."""
    k = _require_records(records)
    labels = [r.hard for r in records]
    preds = [r.pred_hard for r in records]
    weights = [r.weight for r in records] if use_weights else None
    return qwk_from_pairs(labels, preds, k, weights)


def any_rater_accuracy(records: Sequence[EvalRecord]) -> float:
    """Fraction of predictions that match at least one rater's class."""
    _require_records(records)
    hits = sum(1 for r in records if r.pred_hard in r.rater_classes)
    return hits / len(records)


def _confidences(records: Sequence[EvalRecord]) -> np.ndarray:
    return np.asarray([float(r.pred_dist.probs.max()) for r in records])


def _true_accuracies(records: Sequence[EvalRecord]) -> np.ndarray:
    return np.asarray([float(r.soft.probs[r.pred_hard - 1]) for r in records])


def _bin_indices(conf: np.ndarray, num_bins: int) -> np.ndarray:
    # equal-width bins over (0,1]; an exact edge value belongs to the lower bin
    uppers = np.linspace(0.0, 1.0, num_bins + 1)[1:]
    return np.searchsorted(uppers, conf, side="left")


def ece(records: Sequence[EvalRecord], num_bins: int = DEFAULT_NUM_BINS) -> float:
    """Expected calibration error against the soft labels.

    Confidence is the predicted distribution's maximum; per-example true
    accuracy is the soft-label mass on the predicted class. Bins are
    equal-width over (0,1], count-weighted, empty bins skipped. A predictor
    that emits the soft label itself scores exactly 0.
    """
    _require_records(records)
    if num_bins < 1:
        raise InputError("num_bins must be >= 1")
    conf = _confidences(records)
    acc = _true_accuracies(records)
    idx = _bin_indices(conf, num_bins)
    total = 0.0
    for b in range(num_bins):
        members = idx == b
        n = int(members.sum())
        if n == 0:
            continue
        gap = abs(float(conf[members].mean()) - float(acc[members].mean()))
        total += (n / len(records)) * gap
    return total


@dataclass(frozen=True)
class CalibrationBin:
    bin_low: float
    bin_high: float
    mean_confidence: Optional[float]
    mean_true_accuracy: Optional[float]
    count: int


def calibration_curve(
    records: Sequence[EvalRecord], num_bins: int = DEFAULT_NUM_BINS
) -> list[CalibrationBin]:
    """Per-bin mean confidence / mean true accuracy / count, one row per bin.

    Uses the same binning as :func:`ece`; empty bins appear with count 0 so a
    density panel can be drawn from the counts.
    """
    _require_records(records)
    if num_bins < 1:
        raise InputError("num_bins must be >= 1")
    conf = _confidences(records)
    acc = _true_accuracies(records)
    idx = _bin_indices(conf, num_bins)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    rows = []
    for b in range(num_bins):
        members = idx == b
        n = int(members.sum())
        rows.append(
            CalibrationBin(
                bin_low=float(edges[b]),
                bin_high=float(edges[b + 1]),
                mean_confidence=float(conf[members].mean()) if n else None,
                mean_true_accuracy=float(acc[members].mean()) if n else None,
                count=n,
            )
        )
    return rows


def risk_coverage(
    records: Sequence[EvalRecord],
) -> tuple[list[tuple[float, float]], float]:
    """Risk-coverage points and their mean (the area under the curve).

    Records are ranked by confidence, descending, ties kept in input order.
    At coverage n/N the risk is the agreement-weighted error rate
    1 - Accuracy(UW) over the n most confident records; the area is the mean
    of the N risk values.
    """
    _require_records(records)
    conf = _confidences(records)
    order = np.argsort(-conf, kind="stable")
    w = np.asarray([records[i].weight for i in order])
    correct = np.asarray([is_correct(records[i]) for i in order])
    cum_w = np.cumsum(w)
    cum_wc = np.cumsum(w * correct)
    n = len(records)
    risks = 1.0 - cum_wc / cum_w
    points = [((i + 1) / n, float(risks[i])) for i in range(n)]
    return points, float(risks.mean())


def aurc(records: Sequence[EvalRecord]) -> float:
    return risk_coverage(records)[1]


def brier(records: Sequence[EvalRecord]) -> float:
    """Mean squared distance between predicted distribution and soft label."""
    _require_records(records)
    return float(
        np.mean([np.sum((r.pred_dist.probs - r.soft.probs) ** 2) for r in records])
    )


def cross_entropy_metric(records: Sequence[EvalRecord]) -> float:
    """Mean cross entropy of the predicted distribution against the soft label."""
    from .losses import ce_soft_loss

    _require_records(records)
    return float(np.mean([ce_soft_loss(r.pred_dist, r.soft) for r in records]))


def coverage_error(records: Sequence[EvalRecord]) -> float:
    """How deep into the prediction ranking one must go to cover every rater class.

    Classes are ranked by predicted probability, descending, stable on ties
    (lower class first); an example's error is the worst rank among its rater
    classes. Averaged over records; 1 is perfect.
    """
    _require_records(records)
    total = 0.0
    for r in records:
        order = np.argsort(-r.pred_dist.probs, kind="stable")
        rank_of = np.empty(order.size, dtype=np.int64)
        rank_of[order] = np.arange(1, order.size + 1)
        total += max(int(rank_of[c - 1]) for c in r.rater_classes)
    return total / len(records)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for pos in range(i, j + 1):
            ranks[order[pos]] = avg
        i = j + 1
    return ranks


def auroc_macro(records: Sequence[EvalRecord]) -> Optional[float]:
    """One-vs-rest AUROC per class from the predicted probabilities, macro-averaged.

    Classes absent from the hard labels (or with no negatives) are skipped;
    None when no class admits a defined AUROC.
    """
    k = _require_records(records)
    hard = np.asarray([r.hard for r in records])
    per_class = []
    for cls in range(1, k + 1):
        pos = hard == cls
        n_pos = int(pos.sum())
        n_neg = len(records) - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        scores = np.asarray([float(r.pred_dist.probs[cls - 1]) for r in records])
        ranks = _average_ranks(scores)
        auc = (float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        per_class.append(auc)
    if not per_class:
        return None
    return float(np.mean(per_class))


def spearman(records: Sequence[EvalRecord]) -> Optional[float]:
    """Rank correlation between hard predictions and hard labels (average ranks).

    None when either side is constant.
    """
    _require_records(records)
    preds = np.asarray([float(r.pred_hard) for r in records])
    hard = np.asarray([float(r.hard) for r in records])
    if np.all(preds == preds[0]) or np.all(hard == hard[0]):
        return None
    ra = _average_ranks(preds)
    rb = _average_ranks(hard)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    denom = math.sqrt(float((ra * ra).sum()) * float((rb * rb).sum()))
    return float((ra * rb).sum() / denom)


def confusion_matrix(records: Sequence[EvalRecord], row_normalize: bool = False) -> np.ndarray:
    """K x K table, rows = true hard label, columns = prediction.

    With ``row_normalize`` each nonzero row sums to 1; all-zero rows (classes
    absent from the records) stay zero.
    """
    k = _require_records(records)
    table = np.zeros((k, k))
    for r in records:
        table[r.hard - 1, r.pred_hard - 1] += 1.0
    if row_normalize:
        sums = table.sum(axis=1, keepdims=True)
        nonzero = sums[:, 0] > 0
        table[nonzero] = table[nonzero] / sums[nonzero]
    return table


def missing_classes(records: Sequence[EvalRecord]) -> tuple[int, ...]:
    """Classes with no hard label among the records (flagged in reports)."""
    k = _require_records(records)
    present = {r.hard for r in records}
    return tuple(c for c in range(1, k + 1) if c not in present)


# ===== Student-t machinery for fold-level significance tests =====


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    max_iter = 300
    tiny = 1e-300
    tol = 1e-16
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        num = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + num * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + num / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        num = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + num * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + num / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        step = d * c
        h *= step
        if abs(step - 1.0) < tol:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), deterministic to ~1e-14 via the Lentz continued fraction."""
    if not 0.0 <= x <= 1.0:
        raise InputError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_cdf(t: float, dof: int) -> float:
    """P(T <= t) for Student's t with ``dof`` degrees of freedom."""
    if dof < 1:
        raise InputError(f"degrees of freedom must be >= 1, got {dof}")
    if t == 0.0:
        return 0.5
    x = dof / (dof + t * t)
    half_tail = 0.5 * regularized_incomplete_beta(0.5 * dof, 0.5, x)
    return half_tail if t < 0.0 else 1.0 - half_tail


def paired_t_test_one_sided(
    metric_a_per_fold: Sequence[float],
    metric_b_per_fold: Sequence[float],
    direction: str,
) -> float:
    """One-sided paired t-test p-value on per-fold metric values.

    ``direction`` is the alternative for method a: ``"lower"`` tests
    mean(a - b) < 0, ``"higher"`` tests mean(a - b) > 0. Degenerate inputs
    follow fixed conventions: zero-variance differences give p = 0 or 1 by
    the sign of the mean, and all-zero differences give p = 0.5.
    """
    a = np.asarray(metric_a_per_fold, dtype=np.float64)
    b = np.asarray(metric_b_per_fold, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise InputError("paired test needs two equal-length sequences of length >= 2")
    if direction not in (DIRECTION_LOWER, DIRECTION_HIGHER):
        raise InputError(f"direction must be 'lower' or 'higher', got {direction!r}")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.5
        favors = mean < 0.0 if direction == DIRECTION_LOWER else mean > 0.0
        return 0.0 if favors else 1.0
    t = mean / (sd / math.sqrt(d.size))
    if direction == DIRECTION_LOWER:
        return student_t_cdf(t, d.size - 1)
    return student_t_cdf(-t, d.size - 1)


# ===== report assembly =====

_METRIC_NAMES = (
    "mae_uw",
    "qwk_uw",
    "accuracy_uw",
    "accuracy_ar",
    "ece",
    "aurc",
    "brier",
    "cross_entropy",
    "coverage_error",
    "auroc_macro",
    "spearman",
    "mae",
    "qwk",
    "accuracy",
)


@dataclass(frozen=True)
class MetricReport:
    """Named scalar results for one record collection (one fold, usually)."""

    values: dict[str, Optional[float]]
    num_records: int
    missing_classes: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        unknown = set(self.values) - set(_METRIC_NAMES)
        if unknown:
            raise InputError(f"unknown metric names: {sorted(unknown)}")
        if set(self.values) != set(_METRIC_NAMES):
            raise InputError("a MetricReport must carry every suite metric")

    @property
    def undefined(self) -> tuple[str, ...]:
        return tuple(name for name in _METRIC_NAMES if self.values[name] is None)

    def __getitem__(self, name: str) -> Optional[float]:
        return self.values[name]

    def to_dict(self) -> dict:
        return {
            "metrics": {name: self.values[name] for name in _METRIC_NAMES},
            "num_records": self.num_records,
            "missing_classes": list(self.missing_classes),
            "undefined": list(self.undefined),
        }

    @staticmethod
    def from_dict(doc: dict) -> "MetricReport":
        return MetricReport(
            values={name: doc["metrics"][name] for name in _METRIC_NAMES},
            num_records=int(doc["num_records"]),
            missing_classes=tuple(doc.get("missing_classes", ())),
        )


def compute_metric_report(
    records: Sequence[EvalRecord], num_bins: int = DEFAULT_NUM_BINS
) -> MetricReport:
    """The full suite over one record collection."""
    _require_records(records)
    values: dict[str, Optional[float]] = {
        "mae_uw": mae(records, use_weights=True),
        "qwk_uw": qwk(records, use_weights=True),
        "accuracy_uw": accuracy(records, use_weights=True),
        "accuracy_ar": any_rater_accuracy(records),
        "ece": ece(records, num_bins),
        "aurc": aurc(records),
        "brier": brier(records),
        "cross_entropy": cross_entropy_metric(records),
        "coverage_error": coverage_error(records),
        "auroc_macro": auroc_macro(records),
        "spearman": spearman(records),
        "mae": mae(records, use_weights=False),
        "qwk": qwk(records, use_weights=False),
        "accuracy": accuracy(records, use_weights=False),
    }
    return MetricReport(
        values=values,
        num_records=len(records),
        missing_classes=missing_classes(records),
    )
