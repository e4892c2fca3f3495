import json

import numpy as np
import pytest

from ordreg.core import InputError, ProblemSpec, Tie
from ordreg.data import (
    TIE_POLICY_LOWEST,
    TIE_POLICY_RESAMPLE,
    Dataset,
    SyntheticConfig,
    combine_rater_sets,
    dataset_from_votes,
    generate_synthetic,
    load_csv,
    load_synthetic_config,
    mean_pairwise_rater_qwk,
    resolve_ties,
    save_csv,
    stratified_k_fold,
    train_val_split,
)

SPEC4 = ProblemSpec(num_classes=4)


def make_dataset(votes, spec=SPEC4, n_features=2, seed=0):
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(len(votes), n_features))
    return dataset_from_votes(spec, features, votes)


NOISELESS = SyntheticConfig(
    n_examples=200,
    n_features=3,
    num_classes=4,
    n_raters=5,
    thresholds=(-0.6744897501960817, 0.0, 0.6744897501960817),
    feature_noise_sd=0.0,
    rater_noise_sd=0.0,
    seed=13,
)


# ---- dataset construction ----


def test_vote_counts_become_soft_label_fractions():
    ds = make_dataset([(2, 2, 3)])
    np.testing.assert_allclose(ds.soft[0], [0.0, 2 / 3, 1 / 3, 0.0])
    assert ds.hard[0] == 2
    assert ds.tie_classes[0] is None


def test_split_vote_yields_tie_metadata():
    ds = make_dataset([(1, 3), (2, 2)])
    assert ds.tie_classes[0] == Tie((1, 3))
    assert ds.hard[0] == 1  # stored mode defaults to the lowest tied class
    assert ds.tie_classes[1] is None
    np.testing.assert_array_equal(ds.tied_mask, [True, False])


def test_exceedance_matches_soft_label_tail_mass():
    ds = make_dataset([(2, 2, 3), (1, 1, 1, 4)])
    np.testing.assert_allclose(ds.exceed[0], [1.0, 1 / 3, 0.0])
    np.testing.assert_allclose(ds.exceed[1], [0.25, 0.25, 0.25])


def test_duplicate_ids_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(InputError, match="unique"):
        dataset_from_votes(SPEC4, rng.normal(size=(2, 2)), [(1,), (2,)], ids=("a", "a"))


def test_vote_outside_class_range_rejected():
    with pytest.raises(InputError):
        make_dataset([(1, 5)])


def test_subset_keeps_rows_aligned():
    ds = make_dataset([(1,), (2, 3), (4, 4), (2,)])
    sub = ds.subset([2, 0])
    assert sub.ids == (ds.ids[2], ds.ids[0])
    np.testing.assert_array_equal(sub.hard, [4, 1])
    np.testing.assert_array_equal(sub.features, ds.features[[2, 0]])
    assert sub.votes == (ds.votes[2], ds.votes[0])


def test_arrays_are_read_only():
    ds = make_dataset([(1,), (2,)])
    with pytest.raises(ValueError):
        ds.features[0, 0] = 9.0
    with pytest.raises(ValueError):
        ds.soft[0, 0] = 0.5


# ---- synthetic generation ----


def test_noiseless_generator_yields_unanimous_raters():
    ds = generate_synthetic(NOISELESS)
    assert len(ds) == 200
    # zero rater noise: every vote equals the true class, soft labels one-hot
    assert all(len(set(v)) == 1 for v in ds.votes)
    assert np.all(np.isclose(ds.soft.max(axis=1), 1.0))
    assert not ds.tied_mask.any()
    assert mean_pairwise_rater_qwk(ds) == pytest.approx(1.0)


def test_noiseless_features_determine_the_class_exactly():
    ds = generate_synthetic(NOISELESS)
    # features = latent * projection with no noise, so projecting back on any
    # nonzero coordinate recovers the latent and hence the threshold rule
    proj = np.random.default_rng([NOISELESS.seed, 22]).standard_normal(3)
    latent = ds.features[:, 0] / proj[0]
    th = np.asarray(NOISELESS.thresholds)
    recovered = 1 + (th[None, :] < latent[:, None]).sum(axis=1)
    np.testing.assert_array_equal(recovered, ds.hard)


def test_generator_is_deterministic_per_seed():
    a = generate_synthetic(NOISELESS)
    b = generate_synthetic(NOISELESS)
    np.testing.assert_array_equal(a.features, b.features)
    assert a.votes == b.votes
    c = generate_synthetic(SyntheticConfig.from_dict({**NOISELESS.to_dict(), "seed": 14}))
    assert not np.array_equal(a.features, c.features)


def test_ids_are_unique_and_zero_padded():
    ds = generate_synthetic(NOISELESS)
    assert ds.ids[0] == "ex001"
    assert ds.ids[-1] == "ex200"
    assert len(set(ds.ids)) == len(ds)


def test_rater_agreement_decreases_with_rater_noise():
    kappas = []
    for sd in (0.0, 0.4, 1.0, 2.5):
        cfg = SyntheticConfig.from_dict({**NOISELESS.to_dict(), "rater_noise_sd": sd})
        vals = []
        for seed in range(5):
            ds = generate_synthetic(SyntheticConfig.from_dict({**cfg.to_dict(), "seed": seed}))
            vals.append(mean_pairwise_rater_qwk(ds))
        kappas.append(np.mean(vals))
    assert all(a > b for a, b in zip(kappas, kappas[1:]))
    assert kappas[0] == pytest.approx(1.0)


def test_config_round_trips_through_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(NOISELESS.to_dict()))
    assert load_synthetic_config(path) == NOISELESS


def test_config_validation():
    base = NOISELESS.to_dict()
    with pytest.raises(InputError, match="thresholds"):
        SyntheticConfig.from_dict({**base, "thresholds": [0.0]})
    with pytest.raises(InputError, match="increasing"):
        SyntheticConfig.from_dict({**base, "thresholds": [0.5, 0.0, 1.0]})
    with pytest.raises(InputError):
        SyntheticConfig.from_dict({**base, "rater_noise_sd": -0.1})
    with pytest.raises(InputError, match="missing"):
        SyntheticConfig.from_dict({k: v for k, v in base.items() if k != "seed"})


# ---- CSV ----


def write_csv(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_csv_vote_columns(tmp_path):
    path = write_csv(
        tmp_path,
        "id,f_1,f_2,r_1,r_2,r_3\n"
        "a,0.5,-1.0,2,2,3\n"
        "b,1.5,0.25,1,,\n",
    )
    ds = load_csv(path, SPEC4)
    assert ds.ids == ("a", "b")
    np.testing.assert_allclose(ds.soft[0], [0.0, 2 / 3, 1 / 3, 0.0])
    assert ds.votes[1] == (1,)  # blank rater cells are missing votes
    np.testing.assert_array_equal(ds.features, [[0.5, -1.0], [1.5, 0.25]])


def test_load_csv_count_columns(tmp_path):
    path = write_csv(
        tmp_path,
        "f_1,c_1,c_2,c_3,c_4\n"
        "0.0,0,2,1,0\n"
        "1.0,3,,,\n",
    )
    ds = load_csv(path, SPEC4)
    assert ds.votes[0] == (2, 2, 3)
    assert ds.votes[1] == (1, 1, 1)
    assert ds.ids == ("1", "2")  # generated when no id column exists


def test_load_csv_rejects_out_of_range_vote_with_line_number(tmp_path):
    path = write_csv(tmp_path, "f_1,r_1\n0.0,2\n1.0,5\n")
    with pytest.raises(InputError, match="line 3.*vote 5"):
        load_csv(path, SPEC4)


def test_load_csv_header_errors(tmp_path):
    with pytest.raises(InputError, match="not both"):
        load_csv(write_csv(tmp_path, "f_1,r_1,c_1,c_2,c_3,c_4\n0,1,1,0,0,0\n", "both.csv"), SPEC4)
    with pytest.raises(InputError):
        load_csv(write_csv(tmp_path, "f_1\n0.0\n", "neither.csv"), SPEC4)
    with pytest.raises(InputError, match="c_1"):
        load_csv(write_csv(tmp_path, "f_1,c_1,c_2\n0,1,0\n", "short.csv"), SPEC4)


def test_load_csv_empty_file_and_empty_example(tmp_path):
    with pytest.raises(InputError, match="line 1"):
        load_csv(write_csv(tmp_path, "", "empty.csv"), SPEC4)
    with pytest.raises(InputError, match="line 2.*no votes"):
        load_csv(write_csv(tmp_path, "f_1,r_1,r_2\n0.0,,\n", "novote.csv"), SPEC4)


def test_load_csv_malformed_fields(tmp_path):
    with pytest.raises(InputError, match="line 2.*feature"):
        load_csv(write_csv(tmp_path, "f_1,r_1\nabc,1\n", "badf.csv"), SPEC4)
    with pytest.raises(InputError, match="line 3.*vote"):
        load_csv(write_csv(tmp_path, "f_1,r_1\n0.0,1\n0.0,x\n", "badv.csv"), SPEC4)
    with pytest.raises(InputError, match="line 2"):
        load_csv(write_csv(tmp_path, "f_1,r_1\n0.0\n", "width.csv"), SPEC4)


def test_save_then_load_round_trips_exactly(tmp_path):
    cfg = SyntheticConfig.from_dict({**NOISELESS.to_dict(), "rater_noise_sd": 0.8, "n_examples": 40})
    ds = generate_synthetic(cfg)
    path = tmp_path / "out.csv"
    save_csv(ds, path)
    back = load_csv(path, ProblemSpec(num_classes=4))
    assert back.ids == ds.ids
    np.testing.assert_array_equal(back.features, ds.features)  # repr round-trip, bit exact
    assert back.votes == ds.votes
    np.testing.assert_array_equal(back.soft, ds.soft)


# ---- rater-set combination ----


def test_single_consensus_vote_is_replicated_before_merging():
    assert combine_rater_sets([3], [2, 4], 3) == (3, 3, 3, 2, 4)


def test_multi_rater_base_concatenates_unchanged():
    assert combine_rater_sets([2, 3], [4], 3) == (2, 3, 4)


def test_no_extra_votes_still_replicates_single_base():
    assert combine_rater_sets([1], [], 4) == (1, 1, 1, 1)


def test_combine_rejects_bad_inputs():
    with pytest.raises(InputError):
        combine_rater_sets([1], [2], 0)
    with pytest.raises(InputError):
        combine_rater_sets([], [2], 3)


# ---- tie resolution ----


def test_resample_policy_excludes_ties_from_evaluation():
    ds = make_dataset([(1, 3), (2, 2), (4,)])
    res = resolve_ties(ds, TIE_POLICY_RESAMPLE)
    np.testing.assert_array_equal(res.eval_mask(), [False, True, True])
    assert res.tied_indices == (0,)


def test_lowest_policy_keeps_everything_with_lowest_class_mode():
    ds = make_dataset([(1, 3), (2, 2)])
    res = resolve_ties(ds, TIE_POLICY_LOWEST)
    np.testing.assert_array_equal(res.eval_mask(), [True, True])
    labels = res.sample_hard_labels(np.random.default_rng(0))
    np.testing.assert_array_equal(labels, [1, 2])


def test_resampled_labels_stay_within_the_tied_classes():
    ds = make_dataset([(1, 3), (2, 2), (2, 4)])
    res = resolve_ties(ds, TIE_POLICY_RESAMPLE)
    rng = np.random.default_rng(1)
    for _ in range(50):
        labels = res.sample_hard_labels(rng)
        assert labels[0] in (1, 3)
        assert labels[1] == 2
        assert labels[2] in (2, 4)


def test_resampling_is_uniform_over_tied_classes():
    ds = make_dataset([(1, 3)])
    res = resolve_ties(ds, TIE_POLICY_RESAMPLE)
    rng = np.random.default_rng(2)
    draws = [res.sample_hard_labels(rng)[0] for _ in range(2000)]
    freq = draws.count(1) / 2000
    assert abs(freq - 0.5) < 0.035


def test_tie_free_dataset_resolves_to_identity():
    ds = make_dataset([(1,), (2, 2, 3)])
    for policy in (TIE_POLICY_RESAMPLE, TIE_POLICY_LOWEST):
        res = resolve_ties(ds, policy)
        assert res.tied_indices == ()
        np.testing.assert_array_equal(res.sample_hard_labels(np.random.default_rng(0)), ds.hard)
        assert res.eval_mask().all()


def test_unknown_tie_policy_rejected():
    with pytest.raises(InputError, match="tie policy"):
        resolve_ties(make_dataset([(1,)]), "coin_flip")


# ---- splits ----


def _labels_dataset(counts):
    votes = []
    for cls, n in enumerate(counts, start=1):
        votes.extend([(cls,)] * n)
    return make_dataset(votes, spec=ProblemSpec(num_classes=len(counts)))


def test_k_fold_balances_each_class_across_folds():
    ds = _labels_dataset([10, 10, 5])
    split = stratified_k_fold(ds, k=5, seed=3)
    assert split.k == 5
    for fold in split.folds:
        test_labels = ds.hard[list(fold.test)]
        assert (test_labels == 1).sum() == 2
        assert (test_labels == 2).sum() == 2
        assert (test_labels == 3).sum() == 1


def test_k_fold_test_sets_partition_the_dataset():
    ds = _labels_dataset([7, 9, 4])
    split = stratified_k_fold(ds, k=4, seed=0)
    seen = [i for fold in split.folds for i in fold.test]
    assert sorted(seen) == list(range(len(ds)))
    for fold in split.folds:
        assert set(fold.train).isdisjoint(fold.test)
        assert set(fold.val).isdisjoint(fold.test)
        assert set(fold.train).isdisjoint(fold.val)
        assert sorted(fold.train + fold.val + fold.test) == list(range(len(ds)))


def test_k_fold_per_class_test_counts_differ_by_at_most_one():
    ds = _labels_dataset([11, 6, 9])
    split = stratified_k_fold(ds, k=4, seed=5)
    for cls in (1, 2, 3):
        counts = [(ds.hard[list(f.test)] == cls).sum() for f in split.folds]
        assert max(counts) - min(counts) <= 1


def test_k_fold_is_deterministic_and_seed_sensitive():
    ds = _labels_dataset([8, 8, 8])
    assert stratified_k_fold(ds, 4, seed=1) == stratified_k_fold(ds, 4, seed=1)
    assert stratified_k_fold(ds, 4, seed=1) != stratified_k_fold(ds, 4, seed=2)


def test_k_fold_rejects_degenerate_k():
    ds = _labels_dataset([4, 4])
    with pytest.raises(InputError, match="k must be >= 2"):
        stratified_k_fold(ds, 1, seed=0)
    with pytest.raises(InputError, match="exceeds"):
        stratified_k_fold(ds, 9, seed=0)


def test_k_fold_warns_when_a_class_is_rarer_than_k():
    ds = _labels_dataset([6, 6, 2])
    with pytest.warns(UserWarning, match="smallest class"):
        stratified_k_fold(ds, 4, seed=0)


def test_train_val_split_follows_the_fraction_per_class():
    ds = _labels_dataset([10, 5])
    train, val = train_val_split(range(len(ds)), ds.hard, fraction=0.8, seed=0)
    train_labels = ds.hard[list(train)]
    assert (train_labels == 1).sum() == 8
    assert (train_labels == 2).sum() == 4
    assert len(val) == 3
    assert set(train).isdisjoint(val)
    assert sorted(train + val) == list(range(15))


def test_train_val_split_rejects_fraction_bounds():
    ds = _labels_dataset([4, 4])
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(InputError, match="fraction"):
            train_val_split(range(len(ds)), ds.hard, fraction=bad)
    with pytest.raises(InputError, match="empty"):
        train_val_split([], ds.hard)


def test_train_val_split_keeps_one_training_example_per_tiny_class():
    ds = _labels_dataset([1, 9])
    train, val = train_val_split(range(10), ds.hard, fraction=0.8, seed=0)
    assert (ds.hard[list(train)] == 1).sum() == 1  # floor(0.8) would give 0


# ---- property: dataset_from_votes consistency ----


def test_soft_labels_always_sum_to_one_and_match_vote_counts():
    rng = np.random.default_rng(20)
    for _ in range(30):
        n = int(rng.integers(1, 15))
        votes = [
            tuple(int(v) for v in rng.integers(1, 5, size=rng.integers(1, 6)))
            for _ in range(n)
        ]
        ds = make_dataset(votes, seed=int(rng.integers(1000)))
        np.testing.assert_allclose(ds.soft.sum(axis=1), 1.0)
        for i, row in enumerate(votes):
            for cls in range(1, 5):
                assert ds.soft[i, cls - 1] == pytest.approx(row.count(cls) / len(row))
            assert ds.hard[i] == min(
                c for c in range(1, 5) if row.count(c) == max(row.count(x) for x in range(1, 5))
            )
