"""Shipping criteria, one test each, at their stated tolerances and budgets.

These are the release gates. Every test here restates its oracle locally
(brute-force formulas, numerical integration, finite differences) so a bug
in the library cannot hide inside a shared helper.
"""

import json
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.integrate

from ordreg.cli import run
from ordreg.core import (
    ClassDistribution,
    ProblemSpec,
    RatingDistribution,
    TaskProbabilities,
    class_distribution_from_tasks,
    exceedance_from_soft,
)
from ordreg.data import (
    TIE_POLICY_RESAMPLE,
    SyntheticConfig,
    dataset_from_votes,
    generate_synthetic,
    mean_pairwise_rater_qwk,
    resolve_ties,
    stratified_k_fold,
)
from ordreg.harness import TrainConfig, run_cv
from ordreg.ioutil import canonical_json
from ordreg.losses import (
    LOSS_CE,
    LOSS_CE_SOFT,
    LOSS_CORN,
    LOSS_OR_CNN,
    LOSS_OR_SOFT,
    LOSS_SORD_AE,
    LOSS_SORD_SE,
    ce_loss,
    ce_soft_loss,
    corn_unconditional,
    or_cnn_loss,
    or_soft_loss,
)
from ordreg.metrics import (
    compute_metric_report,
    ece,
    eval_record,
    paired_t_test_one_sided,
    qwk_from_pairs,
    risk_coverage,
)
from ordreg.model import (
    HEAD_INDEPENDENT,
    HEAD_SHARED_SLOPE_BIAS,
    HEAD_SOFTMAX,
    EncoderConfig,
    flatten_params,
    forward,
    init_params,
    loss_and_gradient,
    replace_flat,
    sigmoid,
)

QUARTILES = (-0.6744897501960817, 0.0, 0.6744897501960817)


def _one_hot(k, y):
    v = np.zeros(k)
    v[y - 1] = 1.0
    return v


def _random_soft(rng, k):
    raw = rng.uniform(0.05, 1.0, size=k)
    return raw / raw.sum()


# =====================================================================
# criterion 1: soft losses collapse to their hard counterparts on
# one-hot rating distributions, to 1e-12, over 1000 random instances.
# =====================================================================


def test_criterion_01_loss_reduction_identities():
    rng = np.random.default_rng(1001)
    start = time.monotonic()
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        for _ in range(int(rng.integers(1, 17))):
            y = int(rng.integers(1, k + 1))
            soft = _one_hot(k, y)
            tasks = rng.uniform(1e-6, 1 - 1e-6, size=k - 1)
            dist = _random_soft(rng, k)
            exceed = exceedance_from_soft(RatingDistribution(soft))
            assert abs(or_soft_loss(tasks, exceed) - or_cnn_loss(tasks, y)) < 1e-12
            assert abs(ce_soft_loss(dist, soft) - ce_loss(dist, y)) < 1e-12
    assert time.monotonic() - start < 1.0


# =====================================================================
# criterion 2: analytic gradients match central finite differences with
# relative error < 1e-4 for every loss/head pairing, >= 20 trials each.
# =====================================================================

PAIRINGS = [
    (loss, head)
    for loss in (LOSS_CE, LOSS_CE_SOFT, LOSS_SORD_AE, LOSS_SORD_SE)
    for head in (HEAD_SOFTMAX,)
] + [
    (loss, head)
    for loss in (LOSS_OR_CNN, LOSS_OR_SOFT, LOSS_CORN)
    for head in (HEAD_INDEPENDENT, HEAD_SHARED_SLOPE_BIAS)
]


def _gradient_batch(rng, loss_kind, k, d, n):
    batch = []
    for _ in range(n):
        x = rng.normal(size=d)
        if loss_kind == LOSS_CE_SOFT:
            target = _random_soft(rng, k)
        elif loss_kind == LOSS_OR_SOFT:
            target = exceedance_from_soft(RatingDistribution(_random_soft(rng, k)))
        else:
            target = int(rng.integers(1, k + 1))
        batch.append((x, target))
    return batch


def test_criterion_02_gradients_match_finite_differences():
    start = time.monotonic()
    rng = np.random.default_rng(1002)
    assert len(PAIRINGS) == 10
    for loss_kind, head_kind in PAIRINGS:
        for trial in range(20):
            k = int(rng.integers(3, 6))
            d = int(rng.integers(2, 5))
            hidden = (3,) if trial % 2 else ()
            spec = ProblemSpec(num_classes=k)
            params = init_params(EncoderConfig(d, hidden), head_kind, spec, seed=trial)
            batch = _gradient_batch(rng, loss_kind, k, d, int(rng.integers(1, 5)))
            _, grad = loss_and_gradient(params, batch, loss_kind)
            analytic = np.concatenate([a.ravel() for a in grad.arrays()])
            flat = flatten_params(params)
            h = 1e-5
            fd = np.empty_like(flat)
            for i in range(flat.size):
                up, down = flat.copy(), flat.copy()
                up[i] += h
                down[i] -= h
                lu, _ = loss_and_gradient(replace_flat(params, up), batch, loss_kind)
                ld, _ = loss_and_gradient(replace_flat(params, down), batch, loss_kind)
                fd[i] = (lu - ld) / (2 * h)
            denom = max(np.linalg.norm(analytic), np.linalg.norm(fd))
            assert denom > 0
            assert np.linalg.norm(analytic - fd) / denom < 1e-4, (loss_kind, head_kind)
    assert time.monotonic() - start < 30.0


# =====================================================================
# criterion 3: rank consistency. Chained conditionals are non-increasing
# on 1e5 random inputs; shared-slope-bias task outputs are monotone iff
# the biases are; adjacent differencing never clamps on consistent input.
# =====================================================================


def test_criterion_03_rank_consistency():
    rng = np.random.default_rng(1003)
    for _ in range(10**5):
        cond = rng.uniform(0.0, 1.0, size=rng.integers(1, 6))
        out = corn_unconditional(cond).probs
        assert np.all(out[:-1] >= out[1:])  # exact, no tolerance

    # shared-head algebra: logit_k = w.x + b_k, sigmoid strictly increasing
    spec = ProblemSpec(num_classes=4)
    base = init_params(EncoderConfig(3, ()), HEAD_SHARED_SLOPE_BIAS, spec, seed=0)
    slope_size = base.bundle.head_w.size
    for _ in range(10**4):
        biases = rng.normal(size=3)
        flat = np.concatenate([rng.normal(size=slope_size), biases])
        params = replace_flat(base, flat)
        probs = sigmoid(forward(params, rng.normal(size=3)))
        bias_monotone = bool(np.all(biases[:-1] >= biases[1:]))
        prob_monotone = bool(np.all(probs[:-1] >= probs[1:]))
        assert bias_monotone == prob_monotone

    for _ in range(10**4):
        tasks = np.sort(rng.uniform(0.0, 1.0, size=rng.integers(1, 6)))[::-1]
        raw = np.concatenate([[1.0 - tasks[0]], tasks[:-1] - tasks[1:], [tasks[-1]]])
        assert raw.min() >= 0.0
        got = class_distribution_from_tasks(TaskProbabilities(tasks)).probs
        np.testing.assert_allclose(got, raw / raw.sum(), atol=1e-15)


# =====================================================================
# criterion 4: metric oracles. Brute-force kappa to 1e-10 on 100 sets,
# exact -1 reversal, t-test vs numerical CDF to 1e-6, exactly-zero ECE
# for the oracle predictor on 100 sets, and the 0.25 two-record AURC.
# =====================================================================


def _kappa_oracle(labels, preds, k, weights):
    table = {}
    for a, b, w in zip(labels, preds, weights):
        table[(a, b)] = table.get((a, b), 0.0) + w
    mass = sum(table.values())
    row = {i: 0.0 for i in range(1, k + 1)}
    col = dict(row)
    for (a, b), m in table.items():
        row[a] += m
        col[b] += m
    omega = lambda i, j: (i - j) ** 2 / (k - 1) ** 2
    s_obs = sum(omega(a, b) * m for (a, b), m in table.items())
    s_exp = sum(
        omega(i, j) * row[i] * col[j] / mass
        for i in range(1, k + 1)
        for j in range(1, k + 1)
    )
    return None if s_exp == 0.0 else 1.0 - s_obs / s_exp


def _t_cdf_oracle(t, dof):
    c = math.gamma((dof + 1) / 2) / (math.sqrt(dof * math.pi) * math.gamma(dof / 2))
    val, _ = scipy.integrate.quad(
        lambda x: c * (1 + x * x / dof) ** (-(dof + 1) / 2), -np.inf, t
    )
    return val


def test_criterion_04_metric_oracles():
    rng = np.random.default_rng(1004)

    for _ in range(100):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(2, 40))
        labels = rng.integers(1, k + 1, size=n).tolist()
        preds = rng.integers(1, k + 1, size=n).tolist()
        weights = rng.uniform(0.2, 1.0, size=n).tolist()
        got = qwk_from_pairs(labels, preds, k, weights)
        want = _kappa_oracle(labels, preds, k, weights)
        if want is None:
            assert got is None
        else:
            assert abs(got - want) <= 1e-10

    assert qwk_from_pairs([1, 2, 3, 4], [4, 3, 2, 1], 4) == -1.0

    for _ in range(50):
        n = int(rng.integers(2, 10))
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        d = a - b
        sd = d.std(ddof=1)
        if sd == 0.0:
            continue
        t = d.mean() / (sd / math.sqrt(n))
        want_higher = 1.0 - _t_cdf_oracle(t, n - 1)
        want_lower = _t_cdf_oracle(t, n - 1)
        assert abs(paired_t_test_one_sided(a, b, "higher") - want_higher) <= 1e-6
        assert abs(paired_t_test_one_sided(a, b, "lower") - want_lower) <= 1e-6

    for _ in range(100):
        k = int(rng.integers(2, 6))
        records = [
            eval_record(s, s)
            for s in (_random_soft(rng, k) for _ in range(int(rng.integers(1, 30))))
        ]
        assert ece(records) == 0.0

    two = [
        eval_record(_one_hot(2, 1), np.array([0.9, 0.1])),
        eval_record(_one_hot(2, 2), np.array([0.6, 0.4])),
    ]
    points, area = risk_coverage(two)
    assert area == 0.25
    assert points == [(0.5, 0.0), (1.0, 0.5)]


# =====================================================================
# criterion 5: with every weight equal to 1 each weighted metric equals
# its plain counterpart exactly, over 100 random record sets.
# =====================================================================


def test_criterion_05_weighted_metrics_reduce_at_unit_weights():
    rng = np.random.default_rng(1005)
    pairs = [("mae_uw", "mae"), ("qwk_uw", "qwk"), ("accuracy_uw", "accuracy")]
    for _ in range(100):
        k = int(rng.integers(2, 6))
        records = []
        for _ in range(int(rng.integers(2, 25))):
            soft = _one_hot(k, int(rng.integers(1, k + 1)))  # unanimity: weight 1
            records.append(eval_record(soft, _random_soft(rng, k)))
        assert all(r.weight == 1.0 for r in records)
        report = compute_metric_report(records)
        for weighted, plain in pairs:
            assert report[weighted] == report[plain]


# =====================================================================
# criteria 6 / 8 / 10 share one end-to-end command-line experiment:
# noiseless generator, N=500, K=4, 5-fold, OR-Soft and CE.
# =====================================================================

E2E_EXPERIMENT = {
    "synthetic": {
        "n_examples": 500,
        "n_features": 4,
        "num_classes": 4,
        "n_raters": 5,
        "thresholds": list(QUARTILES),
        "feature_noise_sd": 0.0,
        "rater_noise_sd": 0.0,
        "seed": 101,
    },
    "methods": ["or_soft", "ce"],
    "folds": 5,
    "split_seed": 0,
    "seeds": [0, 1, 2],
    "epochs": 100,
    "batch_size": 16,
    "lr": 0.01,
    "hidden_dims": [16],
}


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    """The same experiment three times: serial, serial again, four workers."""
    root = tmp_path_factory.mktemp("e2e")
    runs = {}
    for name, extra in (("serial_a", []), ("serial_b", []), ("jobs4", ["--jobs", "4"])):
        out = root / name
        cfg = root / f"{name}.json"
        cfg.write_text(json.dumps({**E2E_EXPERIMENT, "out": str(out)}))
        start = time.monotonic()
        assert run(["cv", "--config", str(cfg)] + extra) == 0
        runs[name] = SimpleNamespace(out=out, seconds=time.monotonic() - start)
    return runs


def test_criterion_06_noiseless_end_to_end_accuracy(e2e):
    assert E2E_EXPERIMENT["epochs"] <= 200
    serial = e2e["serial_a"]
    assert serial.seconds < 300.0  # single-threaded budget
    summary = json.loads((serial.out / "summary.json").read_text())
    for method in ("or_soft", "ce"):
        mean = summary["methods"][method]["mean"]
        assert mean["accuracy"] >= 0.98, (method, mean["accuracy"])
        assert mean["mae"] <= 0.02, (method, mean["mae"])
        assert mean["qwk"] >= 0.98, (method, mean["qwk"])
        assert all(f["status"] == "ok" for f in summary["methods"][method]["folds"])


# =====================================================================
# criterion 7: with raters noisy enough that pairwise agreement sits
# near kappa 0.6, soft-target training yields lower mean ECE than its
# hard-target twin in at least 4 of 5 dataset seeds, for both pairs.
# =====================================================================


def test_criterion_07_soft_labels_calibrate_better_under_disagreement():
    start = time.monotonic()
    ece_by = {}
    for seed_offset in range(5):
        dataset = generate_synthetic(
            SyntheticConfig(
                n_examples=400,
                n_features=4,
                num_classes=4,
                n_raters=5,
                thresholds=QUARTILES,
                feature_noise_sd=0.1,
                rater_noise_sd=0.68,  # tuned: mean pairwise rater kappa ~0.60
                seed=300 + seed_offset,
            )
        )
        agreement = mean_pairwise_rater_qwk(dataset)
        assert 0.5 <= agreement <= 0.7, agreement
        for method in ("ce", "ce_soft", "or_cnn", "or_soft"):
            config = TrainConfig(
                method=method,
                encoder=EncoderConfig(4, (16,)),
                epochs=80,
                batch_size=16,
                lr=0.01,
                seeds=(0, 1, 2),
            )
            result = run_cv(dataset, config, k=3, split_seed=0, jobs=4)
            assert not result.partial
            ece_by[(seed_offset, method)] = result.mean["ece"]
    for hard, soft in (("ce", "ce_soft"), ("or_cnn", "or_soft")):
        wins = sum(ece_by[(s, soft)] < ece_by[(s, hard)] for s in range(5))
        assert wins >= 4, (hard, soft, wins)
    assert time.monotonic() - start < 1800.0


# =====================================================================
# criterion 8: reruns are byte-identical outside the meta block, and a
# four-worker run matches the serial one.
# =====================================================================


def test_criterion_08_reruns_are_byte_identical(e2e):
    def stable_summary(run_info):
        doc = json.loads((run_info.out / "summary.json").read_text())
        doc.pop("meta")
        return canonical_json(doc)

    a, b, j = (e2e[k] for k in ("serial_a", "serial_b", "jobs4"))
    assert stable_summary(a) == stable_summary(b)
    assert stable_summary(a) == stable_summary(j)
    for method in ("or_soft", "ce"):
        for fold in range(1, 6):
            for name in ("metrics.json", "records.csv", "history.csv"):
                path = f"{method}/fold_{fold}/{name}"
                assert (a.out / path).read_bytes() == (b.out / path).read_bytes(), path
                assert (a.out / path).read_bytes() == (j.out / path).read_bytes(), path


# =====================================================================
# criterion 9: tied examples never reach evaluation records, and the
# per-epoch label resampling for a tied example is uniform (0.5 within
# a three-sigma binomial band over 2000 epochs).
# =====================================================================


def test_criterion_09_tie_policy():
    dataset = generate_synthetic(
        SyntheticConfig(
            n_examples=120,
            n_features=3,
            num_classes=4,
            n_raters=4,  # even panel so split votes happen
            thresholds=QUARTILES,
            feature_noise_sd=0.1,
            rater_noise_sd=0.8,
            seed=77,
        )
    )
    tied_ids = {dataset.ids[i] for i in np.flatnonzero(dataset.tied_mask)}
    assert tied_ids, "fixture must contain tied examples"

    config = TrainConfig(
        method="or_cnn",
        encoder=EncoderConfig(3, (8,)),
        epochs=3,
        batch_size=16,
        lr=0.01,
        seeds=(0,),
        tie_policy=TIE_POLICY_RESAMPLE,
    )
    result = run_cv(dataset, config, k=3, split_seed=0)
    seen_ids = {r.example_id for fold in result.folds for r in fold.records}
    assert seen_ids.isdisjoint(tied_ids)
    # and nothing else went missing: records cover exactly the untied examples
    split = stratified_k_fold(dataset, 3, seed=0)
    expected = {
        dataset.ids[i]
        for fold in split.folds
        for i in fold.test
        if dataset.ids[i] not in tied_ids
    }
    assert seen_ids == expected

    rng0 = np.random.default_rng(0)
    two_way = dataset_from_votes(
        ProblemSpec(4), rng0.normal(size=(2, 2)), [(1, 3), (2, 2, 3, 4)]
    )
    resolution = resolve_ties(two_way, TIE_POLICY_RESAMPLE)
    draw_rng = np.random.default_rng([0, 42])  # the per-seed training stream
    epochs = 2000
    draws = np.array([resolution.sample_hard_labels(draw_rng) for _ in range(epochs)])
    for cls in (1, 3):
        freq = float((draws[:, 0] == cls).mean())
        assert abs(freq - 0.5) <= 0.035, (cls, freq)
    three_way = dataset_from_votes(ProblemSpec(4), rng0.normal(size=(1, 2)), [(1, 2, 4)])
    res3 = resolve_ties(three_way, TIE_POLICY_RESAMPLE)
    draws3 = np.array([res3.sample_hard_labels(draw_rng)[0] for _ in range(epochs)])
    third_band = 3 * math.sqrt((1 / 3) * (2 / 3) / epochs)
    for cls in (1, 2, 4):
        assert abs(float((draws3 == cls).mean()) - 1 / 3) <= third_band


# =====================================================================
# criterion 10: the evaluate command over exported records reproduces
# every stored per-fold metrics file byte for byte.
# =====================================================================


def test_criterion_10_evaluate_round_trip(e2e, tmp_path):
    serial = e2e["serial_a"]
    checked = 0
    for method in ("or_soft", "ce"):
        for fold in range(1, 6):
            fold_dir = serial.out / method / f"fold_{fold}"
            target = tmp_path / f"{method}_{fold}.json"
            rc = run(
                ["evaluate", "--data", str(fold_dir / "records.csv"), "--out", str(target)]
            )
            assert rc == 0
            assert target.read_bytes() == (fold_dir / "metrics.json").read_bytes()
            checked += 1
    assert checked == 10
