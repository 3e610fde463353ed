"""Hierarchical transformer for next-POI ranking.

All layers work on batches: sequences are (B, T, d) and partitioned
subsequences are (B, S, r, d).  Padded positions are masked as attention keys
and zeroed between layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .geotime import N_TIME_LEVELS, relation_arrays
from .numerics import ParamStore, Tensor

SAMPLING_MODES = ("linear", "nearest")
PARTITION_MODES = ("learnable", "fixed")


@dataclass
class ModelConfig:
    n_pois: int
    d: int = 64
    d_k: int = 128
    h: int = 4
    k: int = 8
    l: int = 2
    L_max: int = 128
    M: int = N_TIME_LEVELS
    dropout: float = 0.2
    w1: float = 1.0
    w2: float = 1.0
    sampling_mode: str = "linear"
    partition_mode: str = "learnable"

    def __post_init__(self):
        if self.n_pois < 1:
            raise ValueError("n_pois must be >= 1")
        if self.d % self.h:
            raise ValueError(f"d={self.d} is not divisible by h={self.h}")
        if self.d_k <= self.d:
            raise ValueError(f"d_k={self.d_k} must exceed d={self.d}")
        if self.k < 1 or self.l < 1:
            raise ValueError("k and l must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if self.partition_mode not in PARTITION_MODES:
            raise ValueError(f"partition_mode must be one of {PARTITION_MODES}")

    @property
    def d_h(self) -> int:
        return self.d // self.h

    @property
    def r(self) -> int:
        return self.k


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def encoder_lengths(L: int, k: int, l: int) -> list[int]:
    """Sequence length entering each encoder, plus the final output length."""
    out = [L]
    for _ in range(l):
        out.append(ceil_div(out[-1], k))
    return out


def sinusoidal_positions(L: int, d: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    rates = np.power(10000.0, -(np.arange(0, d, 2) / d))
    table = np.zeros((L, d))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: d // 2])
    return table


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, kind); kind drives initialization."""
    d, dk = cfg.d, cfg.d_k
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "poi_embedding": ((cfg.n_pois + 1, d), "embedding"),
        "lambda_st": ((), "lambda"),
        "W_E": ((cfg.L_max + d, d), "weight"),
        "positional": ((cfg.L_max, d), "positional"),
    }

    def ffn(prefix):
        shapes[f"{prefix}.ffn.W_1"] = ((d, dk), "weight")
        shapes[f"{prefix}.ffn.b_1"] = ((dk,), "bias")
        shapes[f"{prefix}.ffn.W_2"] = ((dk, d), "weight")
        shapes[f"{prefix}.ffn.b_2"] = ((d,), "bias")

    def norm(prefix):
        shapes[f"{prefix}.gain"] = ((d,), "gain")
        shapes[f"{prefix}.bias"] = ((d,), "bias")

    for e in range(cfg.l):
        g = f"enc{e}.global"
        for name in ("W_Q", "W_K", "W_V"):
            for i in range(cfg.h):
                shapes[f"{g}.{name}.{i}"] = ((d, cfg.d_h), "weight")
        shapes[f"{g}.W_O"] = ((d, d), "weight")
        ffn(g)
        norm(f"{g}.ln1")
        norm(f"{g}.ln2")

        p = f"enc{e}.partition"
        shapes[f"{p}.conv.W"] = ((3, d, d), "weight")
        shapes[f"{p}.conv.b"] = ((d,), "bias")
        shapes[f"{p}.head.W"] = ((d, 2), "weight")
        shapes[f"{p}.head.b"] = ((2,), "partition_bias")

        loc = f"enc{e}.local"
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            shapes[f"{loc}.{name}"] = ((d, d), "weight")
        ffn(loc)
        norm(f"{loc}.ln1")
        norm(f"{loc}.ln2")

        a = f"enc{e}.aggregate"
        ffn(a)
        norm(f"{a}.ln")
    shapes["W_P"] = ((d, cfg.n_pois), "weight")
    return shapes


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    poi_ids: np.ndarray  # (B, L) embedding rows, 0 = padding
    mask: np.ndarray  # (B, L) bool
    spatial: np.ndarray  # (B, L, L) km
    temporal: np.ndarray  # (B, L, L) levels
    labels: np.ndarray  # (B,) dense POI index

    def __len__(self):
        return self.poi_ids.shape[0]

    @property
    def valid_len(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def make_batch(samples: Sequence) -> Batch:
    """Stack windowed samples and compute their relation matrices."""
    ids = np.stack([s.poi_ids for s in samples])
    mask = np.stack([s.mask for s in samples])
    coords = np.stack([s.coords for s in samples])
    stamps = np.stack([s.timestamps for s in samples])
    spatial, temporal = relation_arrays(coords, stamps, mask)
    labels = np.array([s.label_poi for s in samples], dtype=np.int64)
    return Batch(ids, mask, spatial, temporal, labels)


# ---------------------------------------------------------------------------
# traces


@dataclass
class PartitionPlan:
    """Per-subsequence windows of one encoder, all arrays (B, S) except coords (B, S, r)."""

    T_in: int
    init_center: np.ndarray
    dx: np.ndarray
    k_pred: np.ndarray
    left: np.ndarray
    right: np.ndarray
    coords: np.ndarray  # row positions actually sampled

    @property
    def length(self) -> np.ndarray:
        return self.right - self.left


@dataclass
class EncoderTrace:
    attention: np.ndarray  # (B, h, T_in, T_in)
    plan: PartitionPlan
    local: np.ndarray  # (B, S, r, d)
    aggregated: np.ndarray  # (B, S, d)
    mask_in: np.ndarray  # (B, T_in)
    mask_out: np.ndarray  # (B, S)


@dataclass
class ForwardTrace:
    embedding: np.ndarray | None = None  # (B, L, d)
    encoders: list[EncoderTrace] = field(default_factory=list)
    user_repr: np.ndarray | None = None  # (B, d)


# ---------------------------------------------------------------------------
# layers


def _ffn(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    hidden = nx.relu(x @ params[f"{prefix}.ffn.W_1"] + params[f"{prefix}.ffn.b_1"])
    return hidden @ params[f"{prefix}.ffn.W_2"] + params[f"{prefix}.ffn.b_2"]


def _norm(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return nx.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _sublayers(x: Tensor, attended: Tensor, params, prefix, cfg, train, rng) -> Tensor:
    """Residual + dropout + norm around attention, then the same around the FFN."""
    x = _norm(x + nx.dropout(attended, cfg.dropout, rng, train), params, f"{prefix}.ln1")
    return _norm(x + nx.dropout(_ffn(x, params, prefix), cfg.dropout, rng, train), params, f"{prefix}.ln2")


def embed_sequence(batch: Batch, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """POI embeddings fused with the spatio-temporal context, plus positions. (B, L, d)"""
    if batch.poi_ids.max(initial=0) > cfg.n_pois or batch.poi_ids.min(initial=0) < 0:
        raise ValueError(f"POI id outside [0, {cfg.n_pois}]")
    dtype = params.dtype
    poi = nx.take_rows(params["poi_embedding"], batch.poi_ids)
    log_dist = Tensor(np.log(batch.spatial).astype(dtype))
    context = Tensor(batch.temporal.astype(dtype)) + params["lambda_st"] * log_dist
    fused = nx.concat([poi, context], axis=-1) @ params["W_E"]
    keep = Tensor(batch.mask[..., None].astype(dtype))
    return fused * keep + params["positional"] * keep


def global_attention(
    x: Tensor, mask: np.ndarray, params: ParamStore, prefix: str, cfg: ModelConfig, train: bool = False, rng=None
) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention over valid keys, then the FFN block. Returns output and (B, h, T, T) weights."""
    B, T, d = x.shape
    h, dh = cfg.h, cfg.d_h

    def heads(name):
        w = nx.concat([params[f"{prefix}.{name}.{i}"] for i in range(h)], axis=1)
        return nx.transpose(nx.reshape(x @ w, (B, T, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("W_Q"), heads("W_K"), heads("W_V")
    logits = nx.scale(q @ nx.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    weights = nx.softmax(nx.masked_logits(logits, mask[:, None, None, :]))
    merged = nx.reshape(nx.transpose(weights @ v, (0, 2, 1, 3)), (B, T, d))
    out = _sublayers(x, merged @ params[f"{prefix}.W_O"], params, prefix, cfg, train, rng)
    out = out * Tensor(mask[..., None].astype(params.dtype))
    return out, weights.data


def partition(x: Tensor, params: ParamStore, prefix: str, cfg: ModelConfig) -> tuple[PartitionPlan, Tensor]:
    """Locate ceil(T/k) subsequences and resample each to r rows. Returns the plan and (B, S, r, d)."""
    B, T, d = x.shape
    k, r = cfg.k, cfg.r
    S = ceil_div(T, k)
    dtype = params.dtype
    init = (np.arange(S) * k + k / 2).astype(dtype)

    if cfg.partition_mode == "fixed":
        dx = Tensor(np.zeros((B, S), dtype))
        k_pred = Tensor(np.ones((B, S), dtype))
        centers = Tensor(np.broadcast_to(init, (B, S)).copy())
        length = Tensor(np.full((B, S), float(k), dtype))
    else:
        pad = S * k - T
        padded = nx.concat([x, Tensor(np.zeros((B, pad, d), dtype))], axis=1) if pad else x
        windows = nx.reshape(padded, (B, S, k, d))
        feats = nx.relu(nx.conv1d(windows, params[f"{prefix}.conv.W"], params[f"{prefix}.conv.b"]))
        heads = nx.mean(feats, axis=2) @ params[f"{prefix}.head.W"] + params[f"{prefix}.head.b"]
        dx = nx.tanh(nx.scale(heads[..., 0], cfg.w1))
        k_pred = nx.relu(nx.tanh(nx.scale(heads[..., 1], cfg.w2)))
        centers = Tensor(init) + nx.scale(dx, k / 2)
        length = nx.maximum(nx.scale(k_pred, float(k)), 1.0)

    center = nx.clip(centers, 0.5, T - 0.5)
    half = nx.scale(length, 0.5)
    left = nx.maximum(center - half, 0.0)
    right = nx.minimum(center + half, float(T))
    frac = ((np.arange(r) + 0.5) / r).astype(dtype)
    span = nx.reshape(right - left, (B, S, 1))
    coords = nx.reshape(left, (B, S, 1)) + span * Tensor(frac) - 0.5
    coords = nx.clip(coords, 0.0, float(T - 1))
    rows = nx.sample_coords(x, nx.reshape(coords, (B, S * r)), cfg.sampling_mode)
    plan = PartitionPlan(
        T_in=T,
        init_center=np.broadcast_to(init, (B, S)).copy(),
        dx=dx.data,
        k_pred=k_pred.data,
        left=left.data,
        right=right.data,
        coords=coords.data,
    )
    return plan, nx.reshape(rows, (B, S, r, d))


def local_attention(x: Tensor, params: ParamStore, prefix: str, cfg: ModelConfig, train: bool = False, rng=None) -> Tensor:
    """Single-head attention inside each subsequence; projections shared across subsequences."""
    q = x @ params[f"{prefix}.W_Q"]
    k = x @ params[f"{prefix}.W_K"]
    v = x @ params[f"{prefix}.W_V"]
    weights = nx.softmax(nx.scale(q @ nx.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(cfg.d)))
    return _sublayers(x, (weights @ v) @ params[f"{prefix}.W_O"], params, prefix, cfg, train, rng)


def aggregate(x: Tensor, params: ParamStore, prefix: str, cfg: ModelConfig, train: bool = False, rng=None) -> Tensor:
    """Average each subsequence's r rows, then FFN + residual + dropout + norm. (B, S, d)"""
    pooled = nx.mean(x, axis=2)
    return _norm(pooled + nx.dropout(_ffn(pooled, params, prefix), cfg.dropout, rng, train), params, f"{prefix}.ln")


def predict(seq: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
    """Sum the final sequence into a user vector and map it to POI probabilities."""
    user = nx.sum(seq, axis=1)
    return nx.softmax(user @ params["W_P"]), user


def forward(
    batch: Batch, params: ParamStore, cfg: ModelConfig, train: bool = False, rng=None
) -> tuple[Tensor, ForwardTrace]:
    """Full pass; returns (B, n_pois) probabilities and the per-encoder trace."""
    trace = ForwardTrace()
    seq = embed_sequence(batch, params, cfg)
    trace.embedding = seq.data
    mask = batch.mask
    valid = batch.valid_len
    for e in range(cfg.l):
        glob, attn = global_attention(seq, mask, params, f"enc{e}.global", cfg, train, rng)
        plan, parts = partition(glob, params, f"enc{e}.partition", cfg)
        local = local_attention(parts, params, f"enc{e}.local", cfg, train, rng)
        agg = aggregate(local, params, f"enc{e}.aggregate", cfg, train, rng)
        valid = -(-valid // cfg.k)
        mask_out = np.arange(agg.shape[1])[None, :] < valid[:, None]
        seq = agg * Tensor(mask_out[..., None].astype(params.dtype))
        trace.encoders.append(EncoderTrace(attn, plan, local.data, seq.data, mask, mask_out))
        mask = mask_out
    scores, user = predict(seq, params)
    trace.user_repr = user.data
    return scores, trace
