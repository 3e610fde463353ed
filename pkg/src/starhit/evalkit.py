"""Ranking metrics, the most-frequented-location baseline, and trace exports."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ForwardTrace, ModelConfig, forward, make_batch
from .numerics import ParamStore, no_grad

KS = (5, 10)


@dataclass
class MetricReport:
    hr5: float
    hr10: float
    ndcg5: float
    ndcg10: float
    n_samples: int

    def as_dict(self) -> dict[str, float]:
        return {"HR@5": self.hr5, "HR@10": self.hr10, "NDCG@5": self.ndcg5, "NDCG@10": self.ndcg10, "n_samples": self.n_samples}

    def to_text(self, prefix: str = "") -> str:
        """Flat ``key=value`` lines, keys optionally prefixed (``model.HR@5``)."""
        lines = []
        for key, value in self.as_dict().items():
            text = str(value) if key == "n_samples" else repr(float(value))
            lines.append(f"{prefix}{key}={text}")
        return "\n".join(lines) + "\n"


def hr_at_k(ranked_list: Sequence[int], label: int, K: int) -> int:
    return int(label in list(ranked_list[:K]))


def ndcg_at_k(ranked_list: Sequence[int], label: int, K: int) -> float:
    top = list(ranked_list[:K])
    if label not in top:
        return 0.0
    return 1.0 / math.log2(top.index(label) + 2)


def ranking(scores: np.ndarray) -> np.ndarray:
    """POI indices by descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def label_ranks(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """1-based rank of each label under descending score with index tie-break."""
    scores = np.atleast_2d(scores)
    labels = np.asarray(labels)
    own = scores[np.arange(len(labels)), labels][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > own) | ((scores == own) & (idx < labels[:, None]))
    return ahead.sum(axis=1) + 1


def report_from_ranks(ranks: np.ndarray) -> MetricReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no samples to score")
    out = {}
    for K in KS:
        hit = ranks <= K
        out[f"hr{K}"] = float(hit.mean())
        out[f"ndcg{K}"] = float(np.where(hit, 1.0 / np.log2(ranks + 1), 0.0).mean())
    return MetricReport(out["hr5"], out["hr10"], out["ndcg5"], out["ndcg10"], int(ranks.size))


def predict_scores(params: ParamStore, cfg: ModelConfig, samples: Sequence, batch_size: int = 256) -> np.ndarray:
    """(N, n_pois) eval-mode probabilities."""
    out = []
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            scores, _ = forward(make_batch(samples[lo : lo + batch_size]), params, cfg, train=False)
            out.append(scores.data)
    return np.concatenate(out)


def evaluate(params: ParamStore, cfg: ModelConfig, samples: Sequence, batch_size: int = 256) -> MetricReport:
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    labels = np.array([s.label_poi for s in samples])
    return report_from_ranks(label_ranks(predict_scores(params, cfg, samples, batch_size), labels))


def mflm_scores(history: Sequence[int], n: int) -> np.ndarray:
    """Visit frequency of each POI in ``history`` (dense indices)."""
    history = np.asarray(history, dtype=np.int64)
    if history.size == 0:
        raise ValueError("MFLM needs a non-empty history")
    return np.bincount(history, minlength=n)[:n] / history.size


def sample_history(sample) -> np.ndarray:
    """Dense POI indices of the real check-ins in a window."""
    return sample.poi_ids[: sample.valid_len] - 1


def mflm_evaluate(samples: Sequence, n: int) -> MetricReport:
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    scores = np.stack([mflm_scores(sample_history(s), n) for s in samples])
    labels = np.array([s.label_poi for s in samples])
    return report_from_ranks(label_ranks(scores, labels))


# ---------------------------------------------------------------------------
# interpretability exports


def export_trace(trace: ForwardTrace, out_dir, index: int = 0) -> list[Path]:
    """Write per-encoder, per-head attention CSVs and per-encoder partition CSVs.

    Files are ``attn_e{e}_h{h}.csv`` and ``partition_e{e}.csv`` with 1-based
    encoder and head numbers, for batch element ``index``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    written = []
    for e, enc in enumerate(trace.encoders, start=1):
        for h in range(enc.attention.shape[1]):
            path = out / f"attn_e{e}_h{h + 1}.csv"
            np.savetxt(path, enc.attention[index, h], delimiter=",", fmt="%.10g")
            written.append(path)
        plan = enc.plan
        path = out / f"partition_e{e}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("subseq_id,init_center,dx,k_pred,left,right\n")
            for i in range(plan.left.shape[1]):
                row = (plan.init_center[index, i], plan.dx[index, i], plan.k_pred[index, i], plan.left[index, i], plan.right[index, i])
                fh.write(f"{i}," + ",".join(f"{float(v):.10g}" for v in row) + "\n")
        written.append(path)
    return written


def subsequence_membership(plan, index: int = 0) -> np.ndarray:
    """Subsequence owning each input position (cell centers p + 0.5).

    Among windows containing the position the nearest center wins; a position
    covered by no window joins the nearest center overall.
    """
    left, right = plan.left[index], plan.right[index]
    centers = (left + right) / 2
    pos = np.arange(plan.T_in)[:, None] + 0.5
    inside = (pos >= left[None, :]) & (pos < right[None, :])
    dist = np.abs(pos - centers[None, :])
    covered = inside.any(axis=1, keepdims=True)
    return np.where(covered, np.where(inside, dist, np.inf), dist).argmin(axis=1)


def correlation_matrix(sample, params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """Pearson correlation between per-check-in hierarchical representations.

    Each valid position's vector is its embedding concatenated with the
    aggregated representation of the subsequence containing it at every
    encoder level.  Features are z-scored across valid positions first.
    Padded rows and columns, and pairs involving a constant vector, are 0.
    """
    with no_grad():
        _, trace = forward(make_batch([sample]), params, cfg, train=False)
    n = int(sample.valid_len)
    parts = [trace.embedding[0, :n]]
    owner = np.arange(n)
    for enc in trace.encoders:
        owner = subsequence_membership(enc.plan)[owner]
        parts.append(enc.aggregated[0, owner])
    feats = np.concatenate(parts, axis=1).astype(np.float64)

    std = feats.std(axis=0)
    z = np.where(std > 0, (feats - feats.mean(axis=0)) / np.where(std > 0, std, 1.0), 0.0)
    zc = z - z.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(zc, axis=1)
    ok = norms > 1e-12
    unit = np.where(ok[:, None], zc / np.where(ok, norms, 1.0)[:, None], 0.0)
    corr = np.clip(unit @ unit.T, -1.0, 1.0)
    corr[np.arange(n)[ok], np.arange(n)[ok]] = 1.0

    out = np.zeros((cfg.L_max, cfg.L_max))
    out[:n, :n] = corr
    return out
