"""A small differentiable model: MLP encoder, one of three head kinds, exact
gradients, and a functional Adam optimizer.

The encoder is a fully connected network on feature vectors. Heads:

* ``independent``: K-1 separate affine task heads (binary-subtask methods).
* ``shared-slope-bias``: one shared affine output plus K-1 free biases, so
  task logit k is w.z + b_k; task probabilities are rank-consistent exactly
  when the biases are non-increasing.
* ``softmax``: a K-way affine head for plain classification.

Gradients are computed analytically (fused sigmoid/softmax backward) and are
contract-tested against central finite differences. Everything here is a value:
training owns its params/optimizer state and never shares mutable state across
runs, so folds and seeds can run in parallel freely.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses as losses_mod
from .core import ClassDistribution, InputError, ProblemSpec, sord_soft_label
from .ioutil import atomic_write_json, read_json

ACT_RELU = "relu"
ACT_TANH = "tanh"

HEAD_INDEPENDENT = "independent"
HEAD_SHARED_SLOPE_BIAS = "shared-slope-bias"
HEAD_SOFTMAX = "softmax"

ALL_HEAD_KINDS = (HEAD_INDEPENDENT, HEAD_SHARED_SLOPE_BIAS, HEAD_SOFTMAX)

# loss kinds that score K-1 task logits; all others need the K-way softmax head
_TASK_LOSSES = (losses_mod.LOSS_OR_CNN, losses_mod.LOSS_OR_SOFT, losses_mod.LOSS_CORN)

_CHECKPOINT_FORMAT = "ordreg-params"
_CHECKPOINT_VERSION = 1

_INIT_STREAM = 11


@dataclass(frozen=True)
class EncoderConfig:
    """MLP shape: input width, hidden widths (empty = linear encoder), activation."""

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = ACT_RELU

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise InputError(f"input_dim must be >= 1, got {self.input_dim}")
        dims = tuple(int(d) for d in self.hidden_dims)
        if any(d < 1 for d in dims):
            raise InputError(f"hidden dims must all be >= 1, got {dims}")
        object.__setattr__(self, "hidden_dims", dims)
        if self.activation not in (ACT_RELU, ACT_TANH):
            raise InputError(f"unknown activation {self.activation!r}")

    @property
    def output_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim


@dataclass
class ParamBundle:
    """Arrays for every trainable tensor; also the shape of gradients and moments."""

    encoder_w: tuple[np.ndarray, ...]
    encoder_b: tuple[np.ndarray, ...]
    head_w: np.ndarray
    head_b: np.ndarray

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (*self.encoder_w, *self.encoder_b, self.head_w, self.head_b)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamBundle":
        return ParamBundle(
            encoder_w=tuple(fn(a) for a in self.encoder_w),
            encoder_b=tuple(fn(a) for a in self.encoder_b),
            head_w=fn(self.head_w),
            head_b=fn(self.head_b),
        )

    def zip_map(
        self, fn: Callable[..., np.ndarray], *others: "ParamBundle"
    ) -> "ParamBundle":
        return ParamBundle(
            encoder_w=tuple(
                fn(a, *(o.encoder_w[i] for o in others))
                for i, a in enumerate(self.encoder_w)
            ),
            encoder_b=tuple(
                fn(a, *(o.encoder_b[i] for o in others))
                for i, a in enumerate(self.encoder_b)
            ),
            head_w=fn(self.head_w, *(o.head_w for o in others)),
            head_b=fn(self.head_b, *(o.head_b for o in others)),
        )


@dataclass
class ModelParams:
    encoder: EncoderConfig
    head_kind: str
    num_classes: int
    bundle: ParamBundle

    @property
    def num_logits(self) -> int:
        return self.num_classes if self.head_kind == HEAD_SOFTMAX else self.num_classes - 1


@dataclass
class AdamState:
    """First/second moment accumulators plus step counter and hyperparameters."""

    m: ParamBundle
    v: ParamBundle
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def _head_shapes(config: EncoderConfig, head_kind: str, k: int) -> tuple[tuple[int, int], int]:
    d = config.output_dim
    if head_kind == HEAD_INDEPENDENT:
        return (k - 1, d), k - 1
    if head_kind == HEAD_SHARED_SLOPE_BIAS:
        return (1, d), k - 1
    if head_kind == HEAD_SOFTMAX:
        return (k, d), k
    raise InputError(f"unknown head kind {head_kind!r}")


def init_params(
    config: EncoderConfig, head_kind: str, spec: ProblemSpec, seed: int
) -> ModelParams:
    """Deterministic init: fan-in-scaled uniform weights, zero biases."""
    rng = np.random.default_rng([int(seed), _INIT_STREAM])
    dims = (config.input_dim, *config.hidden_dims)
    enc_w, enc_b = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        enc_w.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        enc_b.append(np.zeros(fan_out))
    (w_shape, n_bias) = _head_shapes(config, head_kind, spec.num_classes)
    bound = 1.0 / np.sqrt(config.output_dim)
    bundle = ParamBundle(
        encoder_w=tuple(enc_w),
        encoder_b=tuple(enc_b),
        head_w=rng.uniform(-bound, bound, size=w_shape),
        head_b=np.zeros(n_bias),
    )
    return ModelParams(config, head_kind, spec.num_classes, bundle)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activation(kind: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if kind == ACT_RELU else np.tanh(x)


def _forward_cached(params: ModelParams, x: np.ndarray):
    """Forward pass keeping pre-activations for backprop. x is (B, input_dim)."""
    acts = [x]
    pres = []
    z = x
    for w, b in zip(params.bundle.encoder_w, params.bundle.encoder_b):
        pre = z @ w.T + b
        z = _activation(params.encoder.activation, pre)
        pres.append(pre)
        acts.append(z)
    # for the shared head the (B,1) slope output broadcasts against the K-1 biases
    logits = z @ params.bundle.head_w.T + params.bundle.head_b
    return logits, pres, acts


def forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Logits for one feature vector or a batch of them.

    Returns K-1 task logits for the two task heads, K class logits for the
    softmax head; apply :func:`sigmoid` / :func:`softmax` to interpret them.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.encoder.input_dim:
        raise InputError(
            f"feature dim {x.shape[1]} does not match input_dim {params.encoder.input_dim}"
        )
    logits, _, _ = _forward_cached(params, x)
    return logits[0] if single else logits


def _target_matrix(
    params: ModelParams, batch: Sequence[tuple], loss_kind: str, spec: ProblemSpec
) -> np.ndarray:
    """Per-example target rows matching the logit arity for ``loss_kind``."""
    k = params.num_classes
    rows = []
    for _, target in batch:
        if loss_kind in (losses_mod.LOSS_CE, losses_mod.LOSS_CORN):
            y = int(target)
            if not 1 <= y <= k:
                raise InputError(f"hard label {target!r} outside 1..{k}")
            if loss_kind == losses_mod.LOSS_CORN:
                rows.append(np.zeros(k - 1))  # targets rebuilt per subset later
            else:
                row = np.zeros(k)
                row[y - 1] = 1.0
                rows.append(row)
        elif loss_kind == losses_mod.LOSS_OR_CNN:
            y = int(target)
            if not 1 <= y <= k:
                raise InputError(f"hard label {target!r} outside 1..{k}")
            rows.append((y > np.arange(1, k)).astype(np.float64))
        elif loss_kind == losses_mod.LOSS_OR_SOFT:
            t = target.exceed if hasattr(target, "exceed") else np.asarray(target, np.float64)
            if t.shape != (k - 1,):
                raise InputError("or_soft target must have K-1 exceedance entries")
            rows.append(t)
        elif loss_kind == losses_mod.LOSS_CE_SOFT:
            t = target.probs if hasattr(target, "probs") else np.asarray(target, np.float64)
            if t.shape != (k,):
                raise InputError("ce_soft target must have K probabilities")
            rows.append(t)
        elif loss_kind in (losses_mod.LOSS_SORD_AE, losses_mod.LOSS_SORD_SE):
            dist_kind = "ae" if loss_kind == losses_mod.LOSS_SORD_AE else "se"
            rows.append(sord_soft_label(int(target), spec, dist_kind).probs)
        else:
            raise InputError(f"unknown loss kind {loss_kind!r}")
    return np.asarray(rows)


def loss_and_gradient(
    params: ModelParams, batch: Sequence[tuple], loss_kind: str
) -> tuple[float, ParamBundle]:
    """Mini-batch loss and its exact gradient.

    The loss is the MEAN over examples of the per-example loss (tasks summed
    within an example), so learning-rate semantics do not depend on batch
    size. ``corn`` is inherently batch-level (per-task subset means, summed)
    and is returned as-is; duplicating a batch leaves every loss kind's value
    unchanged.
    """
    if len(batch) == 0:
        raise InputError("batch must be non-empty")
    if loss_kind not in losses_mod.ALL_LOSS_KINDS:
        raise InputError(
            f"unknown loss kind {loss_kind!r}; valid: {', '.join(losses_mod.ALL_LOSS_KINDS)}"
        )
    task_loss = loss_kind in _TASK_LOSSES
    if task_loss and params.head_kind == HEAD_SOFTMAX:
        raise InputError(f"loss {loss_kind!r} needs a task head, not softmax")
    if not task_loss and params.head_kind != HEAD_SOFTMAX:
        raise InputError(f"loss {loss_kind!r} needs the softmax head")

    spec = ProblemSpec(params.num_classes)
    x = np.asarray([np.asarray(f, dtype=np.float64) for f, _ in batch])
    if x.ndim != 2 or x.shape[1] != params.encoder.input_dim:
        raise InputError("batch features must all have length input_dim")
    n = x.shape[0]
    targets = _target_matrix(params, batch, loss_kind, spec)
    logits, pres, acts = _forward_cached(params, x)

    if loss_kind == losses_mod.LOSS_CORN:
        probs = sigmoid(logits)
        ys = np.asarray([int(t) for _, t in batch])
        loss = losses_mod.corn_loss(probs, ys)
        dlogits = np.zeros_like(logits)
        for col in range(params.num_classes - 1):
            subset = ys >= col + 1
            m = int(subset.sum())
            if m == 0:
                continue
            tcol = (ys[subset] > col + 1).astype(np.float64)
            dlogits[subset, col] = (probs[subset, col] - tcol) / m
    elif task_loss:
        probs = sigmoid(logits)
        if loss_kind == losses_mod.LOSS_OR_CNN:
            per_example = [losses_mod.or_cnn_loss(probs[i], int(batch[i][1])) for i in range(n)]
        else:
            per_example = [losses_mod.or_soft_loss(probs[i], targets[i]) for i in range(n)]
        loss = float(np.sum(per_example)) / n
        dlogits = (probs - targets) / n
    else:
        probs = softmax(logits)
        if loss_kind == losses_mod.LOSS_CE:
            per_example = [losses_mod.ce_loss(probs[i], int(batch[i][1])) for i in range(n)]
        else:
            per_example = [losses_mod.ce_soft_loss(probs[i], targets[i]) for i in range(n)]
        loss = float(np.sum(per_example)) / n
        dlogits = (probs - targets) / n

    grad = _backward(params, dlogits, pres, acts)
    return loss, grad


def _backward(
    params: ModelParams, dlogits: np.ndarray, pres: list, acts: list
) -> ParamBundle:
    z_last = acts[-1]
    if params.head_kind == HEAD_SHARED_SLOPE_BIAS:
        gb = dlogits.sum(axis=0)
        dshared = dlogits.sum(axis=1, keepdims=True)  # (B,1): logit_k shares one slope
        gw = dshared.T @ z_last
        dz = dshared @ params.bundle.head_w
    else:
        gb = dlogits.sum(axis=0)
        gw = dlogits.T @ z_last
        dz = dlogits @ params.bundle.head_w

    genc_w: list[np.ndarray] = []
    genc_b: list[np.ndarray] = []
    for i in range(len(params.bundle.encoder_w) - 1, -1, -1):
        pre = pres[i]
        if params.encoder.activation == ACT_RELU:
            dpre = dz * (pre > 0.0)
        else:
            dpre = dz * (1.0 - np.tanh(pre) ** 2)
        genc_w.append(dpre.T @ acts[i])
        genc_b.append(dpre.sum(axis=0))
        dz = dpre @ params.bundle.encoder_w[i]
    genc_w.reverse()
    genc_b.reverse()
    return ParamBundle(tuple(genc_w), tuple(genc_b), gw, gb)


def init_adam_state(
    params: ModelParams,
    lr: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    return AdamState(m=params.bundle.map(np.zeros_like),
                     v=params.bundle.map(np.zeros_like), step=0,
                     lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    params: ModelParams, grad: ParamBundle, state: AdamState
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = state.m.zip_map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, grad)
    v = state.v.zip_map(lambda v_, g: b2 * v_ + (1.0 - b2) * g * g, grad)
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_bundle = params.bundle.zip_map(
        lambda p, m_, v_: p - state.lr * (m_ / bc1) / (np.sqrt(v_ / bc2) + state.eps),
        m,
        v,
    )
    new_params = replace(params, bundle=new_bundle)
    new_state = AdamState(m=m, v=v, step=t, lr=state.lr,
                          beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return new_params, new_state


def ensemble_average(dists: Sequence[ClassDistribution]) -> ClassDistribution:
    """Elementwise mean of class distributions (seed-ensemble prediction)."""
    if len(dists) == 0:
        raise InputError("ensemble_average needs at least one distribution")
    k = dists[0].num_classes
    if any(d.num_classes != k for d in dists):
        raise InputError("ensemble members must share the same number of classes")
    stacked = np.asarray([d.probs for d in dists])
    return ClassDistribution(stacked.mean(axis=0))


def flatten_params(params: ModelParams) -> np.ndarray:
    """All trainable values as one flat vector (finite-difference plumbing)."""
    return np.concatenate([a.ravel() for a in params.bundle.arrays()])


def replace_flat(params: ModelParams, flat: np.ndarray) -> ModelParams:
    """Rebuild params from a flat vector shaped like :func:`flatten_params` output."""
    arrays = params.bundle.arrays()
    total = sum(a.size for a in arrays)
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (total,):
        raise InputError(f"flat vector must have {total} entries, got {flat.shape}")
    out = []
    pos = 0
    for a in arrays:
        out.append(flat[pos : pos + a.size].reshape(a.shape))
        pos += a.size
    n_layers = len(params.bundle.encoder_w)
    bundle = ParamBundle(
        encoder_w=tuple(out[:n_layers]),
        encoder_b=tuple(out[n_layers : 2 * n_layers]),
        head_w=out[2 * n_layers],
        head_b=out[2 * n_layers + 1],
    )
    return replace(params, bundle=bundle)


def save_params(params: ModelParams, path: str | Path) -> None:
    """Checkpoint to versioned JSON; floats round-trip bit-exactly."""
    doc = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "encoder": {
            "input_dim": params.encoder.input_dim,
            "hidden_dims": list(params.encoder.hidden_dims),
            "activation": params.encoder.activation,
        },
        "head_kind": params.head_kind,
        "num_classes": params.num_classes,
        "encoder_w": [a.tolist() for a in params.bundle.encoder_w],
        "encoder_b": [a.tolist() for a in params.bundle.encoder_b],
        "head_w": params.bundle.head_w.tolist(),
        "head_b": params.bundle.head_b.tolist(),
    }
    atomic_write_json(path, doc)


def load_params(path: str | Path) -> ModelParams:
    doc = read_json(path)
    if doc.get("format") != _CHECKPOINT_FORMAT or doc.get("version") != _CHECKPOINT_VERSION:
        raise InputError(f"{path}: not a version-{_CHECKPOINT_VERSION} checkpoint")
    enc = EncoderConfig(
        input_dim=doc["encoder"]["input_dim"],
        hidden_dims=tuple(doc["encoder"]["hidden_dims"]),
        activation=doc["encoder"]["activation"],
    )
    bundle = ParamBundle(
        encoder_w=tuple(np.asarray(a, dtype=np.float64) for a in doc["encoder_w"]),
        encoder_b=tuple(np.asarray(a, dtype=np.float64) for a in doc["encoder_b"]),
        head_w=np.asarray(doc["head_w"], dtype=np.float64),
        head_b=np.asarray(doc["head_b"], dtype=np.float64),
    )
    return ModelParams(enc, doc["head_kind"], int(doc["num_classes"]), bundle)
