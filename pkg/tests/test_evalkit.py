import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starhit import evalkit, model, training

from conftest import tiny_config


def test_rank_one_and_rank_three():
    assert evalkit.hr_at_k([4, 1, 2], 4, 5) == 1 and evalkit.ndcg_at_k([4, 1, 2], 4, 5) == 1.0
    assert evalkit.ndcg_at_k([0, 1, 2, 3], 2, 5) == pytest.approx(0.5)
    ranked = list(range(20))
    assert evalkit.hr_at_k(ranked, 10, 10) == 0 and evalkit.ndcg_at_k(ranked, 10, 10) == 0.0


def test_ranking_ties_by_index():
    np.testing.assert_array_equal(evalkit.ranking(np.array([0.2, 0.5, 0.5, 0.1])), [1, 2, 0, 3])
    ranks = evalkit.label_ranks(np.array([[0.2, 0.5, 0.5, 0.1]] * 4), np.arange(4))
    np.testing.assert_array_equal(ranks, [3, 1, 2, 4])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 30))
def test_label_ranks_agree_with_ranking(seed, n):
    r = np.random.default_rng(seed)
    scores = r.integers(0, 4, size=(3, n)).astype(float)
    labels = r.integers(0, n, size=3)
    ranks = evalkit.label_ranks(scores, labels)
    for i in range(3):
        order = list(evalkit.ranking(scores[i]))
        assert ranks[i] == order.index(labels[i]) + 1
        for K in (5, 10):
            assert evalkit.ndcg_at_k(order, labels[i], K) <= evalkit.hr_at_k(order, labels[i], K)


def test_report_monotone_transform_invariance():
    r = np.random.default_rng(0)
    scores = r.random((20, 15))
    labels = r.integers(0, 15, 20)
    a = evalkit.report_from_ranks(evalkit.label_ranks(scores, labels))
    b = evalkit.report_from_ranks(evalkit.label_ranks(np.exp(3 * scores) + 1, labels))
    assert a == b
    assert a.hr5 <= a.hr10 and a.ndcg5 <= a.hr5 and a.ndcg10 <= a.hr10


def test_report_text_keys():
    rep = evalkit.report_from_ranks(np.array([1, 3, 11]))
    keys = [line.split("=")[0] for line in rep.to_text("model.").splitlines()]
    assert keys == ["model.HR@5", "model.HR@10", "model.NDCG@5", "model.NDCG@10", "model.n_samples"]
    assert rep.hr5 == pytest.approx(2 / 3)
    assert rep.ndcg5 == pytest.approx((1 + 0.5) / 3)


def test_mflm_scores_counting():
    s = evalkit.mflm_scores([3, 3, 7], 10)
    assert s[3] == pytest.approx(2 / 3) and s[7] == pytest.approx(1 / 3) and s.sum() == pytest.approx(1)
    assert evalkit.ranking(s)[0] == 3
    one = evalkit.mflm_scores([4], 6)
    np.testing.assert_array_equal(evalkit.ranking(one), [4, 0, 1, 2, 3, 5])
    with pytest.raises(ValueError):
        evalkit.mflm_scores([], 5)


def test_evaluate_uniform_scorer(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    params = training.xavier_init(cfg, 0, np.float64)
    params["W_P"].data[...] = 0.0
    samples = tiny_splits.test
    rep = evalkit.evaluate(params, cfg, samples)
    labels = np.array([s.label_poi for s in samples])
    assert rep.hr10 == pytest.approx(np.mean(labels < 10))
    assert rep.n_samples == len(samples)


def test_evaluate_order_invariant_and_single_sample(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    params = training.xavier_init(cfg, 1)
    a = evalkit.evaluate(params, cfg, tiny_splits.valid, batch_size=3)
    b = evalkit.evaluate(params, cfg, tiny_splits.valid[::-1], batch_size=7)
    assert a.hr5 == b.hr5 and a.ndcg10 == pytest.approx(b.ndcg10, abs=1e-15)
    single = evalkit.evaluate(params, cfg, tiny_splits.valid[:1])
    assert single.hr10 in (0.0, 1.0)
    with pytest.raises(ValueError):
        evalkit.evaluate(params, cfg, [])


def test_export_trace_files(tmp_path, tiny_splits):
    cfg = model.ModelConfig(n_pois=tiny_splits.n_pois, d=8, d_k=16, h=2, k=2, l=1, L_max=16, dropout=0.0)
    params = training.xavier_init(cfg, 0)
    sample = tiny_splits.train[2]  # valid_len 3
    _, trace = model.forward(model.make_batch([sample]), params, cfg)
    files = evalkit.export_trace(trace, tmp_path)
    assert sorted(p.name for p in files) == ["attn_e1_h1.csv", "attn_e1_h2.csv", "partition_e1.csv"]
    attn = np.loadtxt(tmp_path / "attn_e1_h1.csv", delimiter=",")
    assert attn.shape == (16, 16)
    np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-5)
    assert attn[:, sample.valid_len :].sum() < 1e-6
    part = np.loadtxt(tmp_path / "partition_e1.csv", delimiter=",", skiprows=1)
    assert (tmp_path / "partition_e1.csv").read_text().splitlines()[0] == "subseq_id,init_center,dx,k_pred,left,right"
    assert np.all(part[:, 4] >= 0) and np.all(part[:, 4] < part[:, 5]) and np.all(part[:, 5] <= 16)


def test_export_trace_unwritable(tmp_path, tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    _, trace = model.forward(model.make_batch(tiny_splits.train[:1]), training.xavier_init(cfg, 0), cfg)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        evalkit.export_trace(trace, blocker / "sub")


def test_correlation_matrix_properties(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    params = training.xavier_init(cfg, 0, np.float64)
    sample = tiny_splits.train[9]
    n = sample.valid_len
    corr = evalkit.correlation_matrix(sample, params, cfg)
    assert corr.shape == (16, 16)
    np.testing.assert_allclose(corr, corr.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(corr)[:n], 1.0)
    assert np.all(np.abs(corr) <= 1.0) and np.all(corr[n:] == 0) and np.all(corr[:, n:] == 0)


def test_subsequence_membership_nearest_center():
    plan = model.PartitionPlan(T_in=6, init_center=np.zeros((1, 2)), dx=np.zeros((1, 2)), k_pred=np.zeros((1, 2)),
                               left=np.array([[0.0, 2.5]]), right=np.array([[3.0, 3.5]]), coords=np.zeros((1, 2, 1)))
    # position 2 (center 2.5) lies in both windows: centers 1.5 and 3.0 -> second is nearer
    np.testing.assert_array_equal(evalkit.subsequence_membership(plan), [0, 0, 1, 1, 1, 1])
