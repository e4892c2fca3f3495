"""Training objectives, as pure functions of model output probabilities and targets.

Loss kinds and the target each expects:

====================  =========================================
kind                  target
====================  =========================================
``ce``                hard label (int)
``ce_soft``           RatingDistribution
``or_cnn``            hard label (int)
``or_soft``           ExceedanceLabel
``corn``              batch of hard labels (batch-level loss)
``sord_ae``/``sord_se``  hard label (smoothed internally)
====================  =========================================

CORAL and its soft variant reuse ``or_cnn``/``or_soft`` on a shared-slope head;
there is no separate loss kind for them. All probabilities are clamped to
[LOG_EPS, 1-LOG_EPS] before any log.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from .core import (
    ClassDistribution,
    ExceedanceLabel,
    InputError,
    ProblemSpec,
    RatingDistribution,
    TaskProbabilities,
    sord_soft_label,
)

LOG_EPS = 1e-12

LOSS_CE = "ce"
LOSS_CE_SOFT = "ce_soft"
LOSS_OR_CNN = "or_cnn"
LOSS_OR_SOFT = "or_soft"
LOSS_CORN = "corn"
LOSS_SORD_AE = "sord_ae"
LOSS_SORD_SE = "sord_se"

ALL_LOSS_KINDS = (
    LOSS_CE,
    LOSS_CE_SOFT,
    LOSS_OR_CNN,
    LOSS_OR_SOFT,
    LOSS_CORN,
    LOSS_SORD_AE,
    LOSS_SORD_SE,
)

ArrayLike = Union[np.ndarray, Sequence[float]]


def _probs(x, name: str) -> np.ndarray:
    arr = x.probs if hasattr(x, "probs") else np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be a 1-d probability vector")
    return arr


def _log(p: np.ndarray) -> np.ndarray:
    return np.log(np.clip(p, LOG_EPS, 1.0 - LOG_EPS))


def _bce(p: np.ndarray, target: np.ndarray) -> np.ndarray:
    return -(target * _log(p) + (1.0 - target) * _log(1.0 - p))


def or_cnn_loss(tasks: Union[TaskProbabilities, ArrayLike], y: int) -> float:
    """Sum of per-task binary cross entropies against the indicators 1(y > k)."""
    p = _probs(tasks, "tasks")
    k = p.size + 1
    if not 1 <= int(y) <= k:
        raise InputError(f"hard label {y!r} outside 1..{k}")
    targets = (int(y) > np.arange(1, k)).astype(np.float64)
    return float(_bce(p, targets).sum())


def or_soft_loss(
    tasks: Union[TaskProbabilities, ArrayLike],
    target: Union[ExceedanceLabel, ArrayLike],
) -> float:
    """Sum of per-task weighted binary cross entropies.

    Task k's term weighs the two BCE branches by the target tail mass
    P(y > k) and its complement. With a one-hot rating distribution the tail
    masses are exactly the hard indicators and this reduces to
    :func:`or_cnn_loss`.
    """
    p = _probs(tasks, "tasks")
    t = target.exceed if isinstance(target, ExceedanceLabel) else np.asarray(target, np.float64)
    if t.shape != p.shape:
        raise InputError(f"target shape {t.shape} does not match tasks shape {p.shape}")
    return float(_bce(p, t).sum())


def ce_loss(class_dist: Union[ClassDistribution, ArrayLike], y: int) -> float:
    """Multi-class cross entropy against a hard label: -log p[y]."""
    p = _probs(class_dist, "class_dist")
    if not 1 <= int(y) <= p.size:
        raise InputError(f"hard label {y!r} outside 1..{p.size}")
    return float(-_log(p[int(y) - 1]))


def ce_soft_loss(
    class_dist: Union[ClassDistribution, ArrayLike],
    target: Union[RatingDistribution, ArrayLike],
) -> float:
    """Cross entropy against a soft target: -sum_k target[k] log p[k]."""
    p = _probs(class_dist, "class_dist")
    t = _probs(target, "target")
    if t.shape != p.shape:
        raise InputError(f"target shape {t.shape} does not match prediction shape {p.shape}")
    return float(-(t * _log(p)).sum())


def corn_loss(task_cond_probs: ArrayLike, ys: Sequence[int]) -> float:
    """Conditional-subtask ordinal loss over a batch.

    ``task_cond_probs[i, k]`` is example i's predicted P(y > k+1 | y >= k+1).
    Task k is scored only on the examples with y >= k (1-based), against the
    target 1(y > k); each task's BCE is averaged over its subset and the
    per-task means are summed. Tasks whose subset is empty contribute 0.
    """
    if isinstance(task_cond_probs, np.ndarray):
        p = np.atleast_2d(task_cond_probs.astype(np.float64, copy=False))
    else:
        p = np.atleast_2d([_probs(row, "task_cond_probs") for row in task_cond_probs])
    labels = np.asarray(ys, dtype=np.int64)
    if p.shape[0] != labels.size:
        raise InputError(f"{p.shape[0]} probability rows for {labels.size} labels")
    num_classes = p.shape[1] + 1
    if labels.size == 0:
        raise InputError("corn_loss needs a non-empty batch")
    if np.any(labels < 1) or np.any(labels > num_classes):
        raise InputError(f"hard labels outside 1..{num_classes}")
    total = 0.0
    for k in range(1, num_classes):
        subset = labels >= k
        n = int(subset.sum())
        if n == 0:
            continue
        targets = (labels[subset] > k).astype(np.float64)
        total += float(_bce(p[subset, k - 1], targets).sum()) / n
    return total


def corn_unconditional(
    task_cond_probs: Union[TaskProbabilities, ArrayLike],
) -> TaskProbabilities:
    """Chain conditional task probabilities into unconditional P(y > k).

    P(y > k) = prod_{j<=k} P(y > j | y >= j). Products of factors in [0, 1]
    are non-increasing, so the output is always rank-consistent.
    """
    p = _probs(task_cond_probs, "task_cond_probs")
    return TaskProbabilities(np.cumprod(p))


def sord_loss(
    class_dist: Union[ClassDistribution, ArrayLike],
    y: int,
    spec: ProblemSpec,
    distance: str,
) -> float:
    """Cross entropy against the distance-smoothed soft label of ``y``."""
    return ce_soft_loss(class_dist, sord_soft_label(y, spec, distance))
