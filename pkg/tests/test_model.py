import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starhit import model, training
from starhit import numerics as nx
from starhit.numerics import ParamStore, Tensor

from conftest import tiny_config


def _params(cfg, seed=0):
    return training.xavier_init(cfg, seed, np.float64)


def test_config_validation():
    with pytest.raises(ValueError):
        model.ModelConfig(n_pois=5, d=10, h=4)
    with pytest.raises(ValueError):
        model.ModelConfig(n_pois=5, d=64, d_k=64)
    with pytest.raises(ValueError):
        model.ModelConfig(n_pois=5, sampling_mode="cubic")
    assert model.ModelConfig(n_pois=5, k=6).r == 6


@pytest.mark.parametrize("L,k,l,expected", [(128, 8, 2, [128, 16, 2]), (100, 8, 2, [100, 13, 2]), (16, 2, 3, [16, 8, 4, 2])])
def test_encoder_lengths(L, k, l, expected):
    assert model.encoder_lengths(L, k, l) == expected


def test_forward_shapes_and_probabilities(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    batch = model.make_batch(tiny_splits.train[:5])
    scores, trace = model.forward(batch, _params(cfg), cfg)
    assert scores.shape == (5, cfg.n_pois)
    np.testing.assert_allclose(scores.data.sum(axis=1), 1.0, atol=1e-10)
    assert (scores.data > 0).all() and (scores.data < 1).all()
    assert [e.attention.shape[-1] for e in trace.encoders] == [16, 8]
    assert [e.aggregated.shape[1] for e in trace.encoders] == [8, 4]
    assert trace.user_repr.shape == (5, cfg.d)


def test_embedding_padding_rows(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    params = _params(cfg)
    sample = min(tiny_splits.train, key=lambda s: s.valid_len)
    emb = model.embed_sequence(model.make_batch([sample]), params, cfg).data[0]
    assert np.all(emb[sample.valid_len :] == 0)
    assert np.any(emb[: sample.valid_len] != 0)


def test_embedding_with_zero_lambda_uses_temporal_only(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    params = _params(cfg)
    params["lambda_st"].data = np.array(0.0)
    batch = model.make_batch(tiny_splits.train[-1:])
    emb = model.embed_sequence(batch, params, cfg).data[0]
    poi = params["poi_embedding"].data[batch.poi_ids[0]]
    feats = np.concatenate([poi, batch.temporal[0].astype(float)], axis=1)
    keep = batch.mask[0][:, None]
    expected = (feats @ params["W_E"].data + params["positional"].data) * keep
    np.testing.assert_allclose(emb, expected, rtol=1e-12)


def test_embedding_rejects_bad_poi(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    batch = model.make_batch(tiny_splits.train[:1])
    batch.poi_ids[0, 0] = cfg.n_pois + 1
    with pytest.raises(ValueError):
        model.embed_sequence(batch, _params(cfg), cfg)


def _attention_oracle(x, params, prefix, cfg, valid):
    """Loop-by-loop multi-head attention for one sequence, then the two residual blocks."""

    def ln(v, p):
        mu, var = v.mean(), v.var()
        return (v - mu) / math.sqrt(var + 1e-5) * params[f"{p}.gain"].data + params[f"{p}.bias"].data

    T, d = x.shape
    merged = np.zeros((T, d))
    for i in range(cfg.h):
        q = x @ params[f"{prefix}.W_Q.{i}"].data
        k = x @ params[f"{prefix}.W_K.{i}"].data
        v = x @ params[f"{prefix}.W_V.{i}"].data
        for t in range(T):
            logits = [q[t] @ k[j] / math.sqrt(cfg.d_h) if j < valid else -np.inf for j in range(T)]
            w = np.exp(np.array(logits) - max(logits))
            w /= w.sum()
            merged[t, i * cfg.d_h : (i + 1) * cfg.d_h] = w @ v
    out = np.zeros((T, d))
    for t in range(T):
        a = ln(x[t] + merged[t] @ params[f"{prefix}.W_O"].data, f"{prefix}.ln1")
        hidden = np.maximum(a @ params[f"{prefix}.ffn.W_1"].data + params[f"{prefix}.ffn.b_1"].data, 0)
        f = hidden @ params[f"{prefix}.ffn.W_2"].data + params[f"{prefix}.ffn.b_2"].data
        out[t] = ln(a + f, f"{prefix}.ln2") if t < valid else 0.0
    return out


def test_global_attention_matches_loop_oracle(rng):
    cfg = model.ModelConfig(n_pois=3, d=4, d_k=8, h=2, k=2, l=1, L_max=3, dropout=0.0)
    params = _params(cfg, seed=5)
    for n in ("ffn.b_1", "ffn.b_2", "ln1.bias", "ln2.gain"):
        params[f"enc0.global.{n}"].data = rng.normal(size=params[f"enc0.global.{n}"].shape)
    x = rng.normal(size=(1, 3, 4))
    for valid in (3, 2):
        mask = np.arange(3)[None] < valid
        out, w = model.global_attention(Tensor(x), mask, params, "enc0.global", cfg)
        np.testing.assert_allclose(out.data[0], _attention_oracle(x[0], params, "enc0.global", cfg, valid), atol=1e-12)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
        assert w[..., valid:].sum() == 0.0


def test_global_attention_single_position_and_equal_rows():
    cfg = model.ModelConfig(n_pois=3, d=4, d_k=8, h=2, k=2, l=1, L_max=4, dropout=0.0)
    params = _params(cfg)
    _, w = model.global_attention(Tensor(np.ones((1, 1, 4))), np.ones((1, 1), bool), params, "enc0.global", cfg)
    assert w.shape == (1, 2, 1, 1) and np.all(w == 1.0)
    mask = np.array([[True, True, True, False]])
    _, w = model.global_attention(Tensor(np.ones((1, 4, 4))), mask, params, "enc0.global", cfg)
    np.testing.assert_allclose(w[..., :3], 1 / 3, atol=1e-12)


def _zero_heads(params, prefix):
    for n in ("head.W", "head.b"):
        params[f"{prefix}.{n}"].data[...] = 0.0


def test_partition_init_centers_and_zero_heads(rng):
    cfg = model.ModelConfig(n_pois=3, d=4, d_k=8, h=2, k=8, l=1, L_max=16)
    params = _params(cfg)
    _zero_heads(params, "enc0.partition")
    plan, rows = model.partition(Tensor(rng.normal(size=(1, 16, 4))), params, "enc0.partition", cfg)
    np.testing.assert_array_equal(plan.init_center[0], [4, 12])
    np.testing.assert_array_equal(plan.dx, 0.0)
    np.testing.assert_array_equal(plan.k_pred, 0.0)
    np.testing.assert_array_equal(plan.length, 1.0)
    np.testing.assert_array_equal(plan.left[0], [3.5, 11.5])
    assert rows.shape == (1, 2, 8, 4)


def test_partition_last_window_padding(rng):
    cfg = model.ModelConfig(n_pois=3, d=4, d_k=8, h=2, k=8, l=1, L_max=13)
    params = _params(cfg)
    x = rng.normal(size=(1, 13, 4))
    plan, _ = model.partition(Tensor(x), params, "enc0.partition", cfg)
    assert plan.left.shape == (1, 2)
    # second window's features come from rows 8..12 plus three zero rows
    padded = np.concatenate([x[0, 8:], np.zeros((3, 4))])
    feats = np.maximum(nx.conv1d(Tensor(padded[None]), params["enc0.partition.conv.W"], params["enc0.partition.conv.b"]).data, 0)
    head = feats[0].mean(axis=0) @ params["enc0.partition.head.W"].data + params["enc0.partition.head.b"].data
    assert plan.dx[0, 1] == pytest.approx(math.tanh(head[0]), abs=1e-12)
    assert plan.right[0, 1] <= 13


def test_fixed_partition_is_uniform(rng):
    cfg = model.ModelConfig(n_pois=3, d=4, d_k=8, h=2, k=4, l=1, L_max=8, partition_mode="fixed")
    x = rng.normal(size=(1, 8, 4))
    plan, rows = model.partition(Tensor(x), _params(cfg), "enc0.partition", cfg)
    np.testing.assert_array_equal(plan.left[0], [0, 4])
    np.testing.assert_array_equal(plan.right[0], [4, 8])
    np.testing.assert_allclose(rows.data[0].reshape(8, 4), x[0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 20), k=st.integers(1, 6))
def test_partition_windows_valid(seed, T, k):
    r = np.random.default_rng(seed)
    cfg = model.ModelConfig(n_pois=3, d=4, d_k=8, h=2, k=k, l=1, L_max=max(T, 2))
    params = training.xavier_init(cfg, seed, np.float64)
    params["enc0.partition.head.W"].data *= 20  # push heads into saturation
    plan, rows = model.partition(Tensor(r.normal(size=(2, T, 4))), params, "enc0.partition", cfg)
    assert np.all(plan.left >= 0) and np.all(plan.right <= T) and np.all(plan.left < plan.right)
    assert np.all(plan.length <= k + 1e-12)
    assert np.all(plan.length >= min(1.0, T) - 1e-12)
    assert rows.shape == (2, -(-T // k), k, 4)


def test_local_attention_single_row_and_independence(rng):
    cfg = model.ModelConfig(n_pois=3, d=4, d_k=8, h=2, k=1, l=1, L_max=4)
    params = _params(cfg)
    x = rng.normal(size=(1, 3, 1, 4))
    out = model.local_attention(Tensor(x), params, "enc0.local", cfg).data
    cfg2 = dataclasses.replace(cfg, k=2)
    x2 = rng.normal(size=(1, 3, 2, 4))
    a = model.local_attention(Tensor(x2), params, "enc0.local", cfg2).data
    b = model.local_attention(Tensor(x2[:, ::-1]), params, "enc0.local", cfg2).data
    np.testing.assert_allclose(a[:, ::-1], b, atol=1e-12)
    assert out.shape == x.shape


def test_aggregate_mean_of_identical_rows(rng):
    cfg = model.ModelConfig(n_pois=3, d=4, d_k=8, h=2, k=2, l=1, L_max=4)
    params = _params(cfg)
    row = rng.normal(size=4)
    same = model.aggregate(Tensor(np.tile(row, (1, 1, 2, 1))), params, "enc0.aggregate", cfg).data
    single = model.aggregate(Tensor(row.reshape(1, 1, 1, 4)), params, "enc0.aggregate", cfg).data
    np.testing.assert_allclose(same, single, atol=1e-12)
    cancel = model.aggregate(Tensor(np.stack([row, -row])[None, None]), params, "enc0.aggregate", cfg).data
    zero = model.aggregate(Tensor(np.zeros((1, 1, 1, 4))), params, "enc0.aggregate", cfg).data
    np.testing.assert_allclose(cancel, zero, atol=1e-12)


def test_zero_projection_gives_uniform_scores(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    params = _params(cfg)
    params["W_P"].data[...] = 0.0
    scores, _ = model.forward(model.make_batch(tiny_splits.train[:3]), params, cfg)
    np.testing.assert_allclose(scores.data, 1.0 / cfg.n_pois, rtol=1e-12)


def test_nearest_mode_gives_partition_heads_no_gradient(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois, sampling_mode="nearest")
    params = _params(cfg)
    batch = model.make_batch(tiny_splits.train[-4:])
    nx.backward(training.batch_loss(batch, params, cfg), params)
    for name in params.trainable_names():
        if ".partition." in name:
            assert np.all(params.grad(name) == 0.0), name
    assert np.any(params.grad("W_P") != 0)


def test_forward_deterministic_without_dropout(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    params = _params(cfg)
    batch = model.make_batch(tiny_splits.train[:4])
    a, _ = model.forward(batch, params, cfg)
    b, _ = model.forward(batch, params, cfg)
    np.testing.assert_array_equal(a.data, b.data)


def test_batching_matches_single_samples(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    params = _params(cfg)
    samples = tiny_splits.train[:3] + tiny_splits.train[-2:]
    together, _ = model.forward(model.make_batch(samples), params, cfg)
    for i, s in enumerate(samples):
        alone, _ = model.forward(model.make_batch([s]), params, cfg)
        np.testing.assert_allclose(together.data[i], alone.data[0], rtol=1e-10)


def test_full_model_gradient_check(tiny_splits):
    cfg = tiny_config(n_pois=tiny_splits.n_pois)
    params = _params(cfg, seed=2)
    longest = sorted(tiny_splits.train, key=lambda s: -s.valid_len)[:2]
    batch = model.make_batch(longest)
    names = ["W_P", "lambda_st", "enc0.partition.head.b", "enc1.local.W_Q", "enc0.global.W_K.1"]
    report = nx.fd_check(lambda s: training.batch_loss(batch, s, cfg), params, epsilon=1e-6, names=names,
                         oracle_dtype=np.longdouble)
    assert report.passed, report.per_param
