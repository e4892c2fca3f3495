"""Label representations and transforms for ordinal problems with rater distributions.

Classes are the integers 1..K, ordered. A "hard label" is a plain int in that
range (no wrapper type). Distribution-like values are thin validated wrappers
around float64 arrays:

* :class:`RatingDistribution`: probability vector over the K classes, e.g. the
  fraction of raters voting each class.
* :class:`ExceedanceLabel`: the K-1 tail masses P(y > k), non-increasing in k.
* :class:`TaskProbabilities`: a model's K-1 estimates of P(y > k); monotonicity
  is NOT required here (independent per-task heads may violate it).
* :class:`ClassDistribution`: a predicted probability vector over the K classes.

All operations are pure functions on immutable values and are safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

__all__ = [
    "InputError",
    "ProblemSpec",
    "Tie",
    "RatingDistribution",
    "ExceedanceLabel",
    "TaskProbabilities",
    "ClassDistribution",
    "TIE_LOWEST",
    "TIE_REPORT",
    "DISTANCE_AE",
    "DISTANCE_SE",
    "soft_label_from_votes",
    "hard_label_from_soft",
    "exceedance_from_soft",
    "class_distribution_from_tasks",
    "decode_count",
    "decode_argmax",
    "sord_soft_label",
]

PROB_SUM_TOL = 1e-9

# Tie policies for argmax-style decodes. "lowest-class" is the deterministic
# default (never over-reports severity on an exact tie); "report-tie" returns
# the tied class set so callers can treat ties specially.
TIE_LOWEST = "lowest-class"
TIE_REPORT = "report-tie"

# Distance kinds for distance-smoothed soft labels.
DISTANCE_AE = "ae"
DISTANCE_SE = "se"


class InputError(ValueError):
    """Raised when a caller-supplied value violates an operation's contract."""


@dataclass(frozen=True)
class ProblemSpec:
    """Number of ordered classes, optionally with display names."""

    num_classes: int
    class_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise InputError(f"num_classes must be an integer >= 2, got {self.num_classes!r}")
        if self.class_names is not None:
            names = tuple(self.class_names)
            if len(names) != self.num_classes:
                raise InputError(
                    f"class_names has {len(names)} entries for {self.num_classes} classes"
                )
            object.__setattr__(self, "class_names", names)


@dataclass(frozen=True)
class Tie:
    """An exact tie between two or more classes, as reported by tie-aware decodes."""

    classes: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        if len(self.classes) < 2:
            raise InputError("a Tie needs at least two classes")


def _frozen_vector(name: str, values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} entries must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RatingDistribution:
    """Probability vector over K classes; entries in [0,1], summing to 1."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_vector("RatingDistribution.probs", self.probs)
        if arr.size < 2:
            raise InputError("a rating distribution needs at least two classes")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise InputError("rating probabilities must lie in [0, 1]")
        if abs(float(arr.sum()) - 1.0) > PROB_SUM_TOL:
            raise InputError(f"rating probabilities sum to {arr.sum()!r}, not 1")
        object.__setattr__(self, "probs", arr)

    @property
    def num_classes(self) -> int:
        return int(self.probs.size)


@dataclass(frozen=True)
class ExceedanceLabel:
    """Tail masses [P(y>1), ..., P(y>K-1)]; entries in [0,1], non-increasing."""

    exceed: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_vector("ExceedanceLabel.exceed", self.exceed)
        if arr.size < 1:
            raise InputError("an exceedance label needs at least one entry")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise InputError("exceedance entries must lie in [0, 1]")
        if np.any(np.diff(arr) > 0.0):
            raise InputError("exceedance entries must be non-increasing")
        object.__setattr__(self, "exceed", arr)

    @property
    def num_classes(self) -> int:
        return int(self.exceed.size) + 1


@dataclass(frozen=True)
class TaskProbabilities:
    """Model estimates of P(y > k) for k = 1..K-1.

    Entries live in [0, 1] and need not be monotone: independently
    parameterized task heads can produce rank-inconsistent estimates, and
    downstream transforms must cope. (Training-time sigmoid outputs stay in
    the open interval; exact 0/1 only appears for saturated logits, which the
    log-clamped losses handle.)
    """

    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_vector("TaskProbabilities.probs", self.probs)
        if arr.size < 1:
            raise InputError("task probabilities need at least one entry")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise InputError("task probabilities must lie in [0, 1]")
        object.__setattr__(self, "probs", arr)

    @property
    def num_classes(self) -> int:
        return int(self.probs.size) + 1


@dataclass(frozen=True)
class ClassDistribution:
    """Predicted probability vector over the K classes; sums to 1."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_vector("ClassDistribution.probs", self.probs)
        if arr.size < 2:
            raise InputError("a class distribution needs at least two classes")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise InputError("class probabilities must lie in [0, 1]")
        if abs(float(arr.sum()) - 1.0) > PROB_SUM_TOL:
            raise InputError(f"class probabilities sum to {arr.sum()!r}, not 1")
        object.__setattr__(self, "probs", arr)

    @property
    def num_classes(self) -> int:
        return int(self.probs.size)


def check_class_index(label: int, spec: ProblemSpec) -> int:
    """Validate a 1-based class index against the problem spec."""
    idx = int(label)
    if idx != label or not 1 <= idx <= spec.num_classes:
        raise InputError(f"class index {label!r} outside 1..{spec.num_classes}")
    return idx


def soft_label_from_votes(votes: Sequence[int], spec: ProblemSpec) -> RatingDistribution:
    """Empirical rating distribution: entry k is the fraction of votes for class k.

    Parameters
    ----------
    votes : sequence of int
        One class index in 1..K per rater. Must be non-empty.
    spec : ProblemSpec
    """
    if len(votes) == 0:
        raise InputError("votes must be non-empty")
    counts = np.zeros(spec.num_classes, dtype=np.float64)
    for v in votes:
        counts[check_class_index(v, spec) - 1] += 1.0
    return RatingDistribution(counts / len(votes))


def _argmax_classes(probs: np.ndarray) -> np.ndarray:
    # exact float equality on purpose: only true ties count as ties
    return np.flatnonzero(probs == probs.max())


def hard_label_from_soft(
    dist: RatingDistribution, tie_policy: str = TIE_LOWEST
) -> Union[int, Tie]:
    """Mode of a rating distribution; exact ties resolved per ``tie_policy``."""
    top = _argmax_classes(dist.probs)
    if len(top) == 1 or tie_policy == TIE_LOWEST:
        return int(top[0]) + 1
    if tie_policy == TIE_REPORT:
        return Tie(tuple(int(i) + 1 for i in top))
    raise InputError(f"unknown tie policy {tie_policy!r}")


def exceedance_from_soft(dist: RatingDistribution) -> ExceedanceLabel:
    """Tail masses of a rating distribution: entry k = sum of probs above class k."""
    p = dist.probs
    # suffix sums; cumsum of non-negative terms is exactly non-decreasing,
    # so the reversed result is exactly non-increasing
    suffix = np.cumsum(p[::-1])[::-1]
    return ExceedanceLabel(np.minimum(suffix[1:], 1.0))


def class_distribution_from_tasks(tasks: TaskProbabilities) -> ClassDistribution:
    """Adjacent differences of task probabilities, clamped and renormalized.

    raw[1] = 1 - t[1], raw[k] = t[k-1] - t[k], raw[K] = t[K-1]. On
    rank-consistent input the raw vector is already non-negative and the clamp
    is a no-op; rank-inconsistent input produces negative raw entries, which
    are clamped to zero before renormalizing. The raw vector telescopes to 1,
    so the clamped sum is always positive.
    """
    t = tasks.probs
    k = t.size + 1
    raw = np.empty(k, dtype=np.float64)
    raw[0] = 1.0 - t[0]
    if k > 2:
        raw[1:-1] = t[:-1] - t[1:]
    raw[-1] = t[-1]
    clamped = np.maximum(raw, 0.0)
    total = float(clamped.sum())
    assert total > 0.0, "clamped class mass vanished; raw telescopes to 1 so this cannot happen"
    return ClassDistribution(clamped / total)


def decode_count(tasks: TaskProbabilities) -> int:
    """Counting decode: 1 plus the number of tasks with probability strictly above 0.5."""
    # strict > keeps an exact 0.5 boundary deterministic (counts as "does not exceed")
    return 1 + int(np.count_nonzero(tasks.probs > 0.5))


def decode_argmax(
    dist: ClassDistribution, tie_policy: str = TIE_LOWEST
) -> Union[int, Tie]:
    """Argmax decode of a predicted class distribution; ties per ``tie_policy``."""
    top = _argmax_classes(dist.probs)
    if len(top) == 1 or tie_policy == TIE_LOWEST:
        return int(top[0]) + 1
    if tie_policy == TIE_REPORT:
        return Tie(tuple(int(i) + 1 for i in top))
    raise InputError(f"unknown tie policy {tie_policy!r}")


def sord_soft_label(
    true_class: int, spec: ProblemSpec, distance: str = DISTANCE_AE
) -> RatingDistribution:
    """Distance-smoothed synthetic soft label around ``true_class``.

    probs[k] = exp(-phi(k, y)) / sum_j exp(-phi(j, y)) with phi the absolute
    (``"ae"``) or squared (``"se"``) class-index distance. The result is
    unimodal with its mode at the true class.
    """
    y = check_class_index(true_class, spec)
    ks = np.arange(1, spec.num_classes + 1, dtype=np.float64)
    if distance == DISTANCE_AE:
        phi = np.abs(ks - y)
    elif distance == DISTANCE_SE:
        phi = (ks - y) ** 2
    else:
        raise InputError(f"unknown distance kind {distance!r} (use 'ae' or 'se')")
    w = np.exp(-phi)
    return RatingDistribution(w / w.sum())
