"""Initialization, loss, learning-rate schedule, Adam, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .model import ModelConfig, Batch, forward, make_batch, param_shapes, sinusoidal_positions
from .numerics import NumericsError, ParamStore, Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
# pre-activation of the length head at init: tanh(2) ~ 0.96, so windows start near the full width k
LENGTH_LOGIT_INIT = 2.0
LOSS_KINDS = ("softmax_bce", "categorical")


class TrainingDiverged(RuntimeError):
    pass


def xavier_bound(shape: tuple[int, ...]) -> float:
    if len(shape) == 3:  # conv kernel (width, d_in, d_out)
        fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
    else:
        fan_in, fan_out = shape[0], shape[1]
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Build the parameter store: Xavier-uniform matrices, zero biases, unit gains.

    The padding embedding row starts (and stays) at zero, the distance
    exponent starts at -0.5, and the positional table is frozen.  The
    partition length head is biased so initial windows span nearly ``k``
    positions rather than collapsing to the unit minimum.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    for name, (shape, kind) in param_shapes(cfg).items():
        if kind in ("weight", "embedding"):
            bound = xavier_bound(shape)
            value = rng.uniform(-bound, bound, size=shape)
            if kind == "embedding":
                value[0] = 0.0
            store.add(name, value)
        elif kind == "bias":
            store.add(name, np.zeros(shape))
        elif kind == "partition_bias":
            # (offset, length): no initial shift, windows of almost the full width
            store.add(name, [0.0, LENGTH_LOGIT_INIT / cfg.w2 if cfg.w2 else 0.0])
        elif kind == "gain":
            store.add(name, np.ones(shape))
        elif kind == "lambda":
            store.add(name, -0.5)
        elif kind == "positional":
            store.add(name, sinusoidal_positions(*shape), trainable=False)
        else:
            raise ValueError(f"unknown parameter kind {kind!r}")
    return store


def loss(scores: Tensor, labels, kind: str = "softmax_bce") -> Tensor:
    """Batch-summed cross-entropy over softmax outputs.

    ``softmax_bce`` adds sum_{j != label} log(1 - p_j) to the usual log p_label term;
    ``categorical`` keeps only the latter.  Probabilities are clamped into
    [1e-7, 1 - 1e-7] first.
    """
    labels = np.atleast_1d(np.asarray(labels))
    n = scores.shape[-1]
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"label outside [0, {n})")
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    p = nx.clip(scores, PROB_CLAMP, 1.0 - PROB_CLAMP)
    onehot = np.zeros(p.shape, dtype=p.dtype)
    onehot.reshape(-1, n)[np.arange(labels.size), labels] = 1.0
    total = nx.sum(nx.log(p) * Tensor(onehot))
    if kind == "softmax_bce":
        total = total + nx.sum(nx.log(1.0 - p) * Tensor(1.0 - onehot))
    return -total


def lr_schedule(step: int, d: int, warmup_step: int = 400, coef: float = 1.0) -> float:
    """Inverse-square-root decay after a linear warmup that peaks at ``warmup_step``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return coef / math.sqrt(d) * min(1.0 / math.sqrt(step), step / (warmup_step * math.sqrt(warmup_step)))


@dataclass
class OptimState:
    d: int
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    coef: float = 1.0
    warmup_step: int = 400

    @classmethod
    def for_store(cls, store: ParamStore, d: int, **kw) -> "OptimState":
        state = cls(d, **kw)
        for name in store.trainable_names():
            state.m[name] = np.zeros_like(store[name].data)
            state.v[name] = np.zeros_like(store[name].data)
        return state

    def lr(self, step: int | None = None) -> float:
        return lr_schedule(self.step if step is None else step, self.d, self.warmup_step, self.coef)


def adam_step(store: ParamStore, state: OptimState, lr: float | None = None) -> float:
    """One bias-corrected Adam update of every trainable parameter; returns the lr used."""
    if not store.grads_ready:
        raise RuntimeError("adam_step called without gradients; run backward first")
    state.step += 1
    t = state.step
    if lr is None:
        lr = state.lr(t)
    b1, b2 = state.beta1, state.beta2
    for name in store.trainable_names():
        g = store.grad(name)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = store[name]
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(store.dtype)
    if "poi_embedding" in store:
        store["poi_embedding"].data[0] = 0.0
    return lr


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    loss: str = "softmax_bce"
    patience: int = 0  # epochs without valid NDCG@10 improvement before stopping; 0 disables
    eval_batch_size: int = 256
    grad_check: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    hr5: float
    hr10: float
    ndcg5: float
    ndcg10: float
    lr: float

    def to_line(self) -> str:
        return ",".join(
            [str(self.epoch)] + [repr(float(x)) for x in (self.train_loss, self.hr5, self.hr10, self.ndcg5, self.ndcg10, self.lr)]
        )


@dataclass
class TrainResult:
    params: ParamStore  # best-on-validation parameters (or last, without a valid split)
    history: list[EpochRecord]
    opt_state: OptimState
    last_params: ParamStore
    best_epoch: int = 0


def write_history(path, history: list[EpochRecord]) -> None:
    """epoch,mean_train_loss,HR@5,HR@10,NDCG@5,NDCG@10,lr -- one line per epoch, no header."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(rec.to_line() + "\n")


def batch_loss(batch: Batch, params: ParamStore, cfg: ModelConfig, kind: str = "softmax_bce", train=False, rng=None) -> Tensor:
    scores, _ = forward(batch, params, cfg, train=train, rng=rng)
    return loss(scores, batch.labels, kind)


def train(
    splits,
    cfg: ModelConfig,
    train_cfg: TrainConfig,
    params: ParamStore | None = None,
    opt_state: OptimState | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[EpochRecord, ParamStore, OptimState], None] | None = None,
) -> TrainResult:
    """Mini-batch training with per-epoch validation and best-model tracking."""
    from .evalkit import evaluate

    samples = splits.train
    if not samples:
        raise ValueError("training split is empty")
    width = samples[0].poi_ids.shape[0]
    if width != cfg.L_max:
        raise ValueError(f"samples are windowed to length {width}, model expects L_max={cfg.L_max}")
    if params is None:
        params = xavier_init(cfg, train_cfg.seed)
    if opt_state is None:
        opt_state = OptimState.for_store(params, cfg.d)
    shuffle_rng = np.random.default_rng([train_cfg.seed, 1, start_epoch])
    drop_rng = np.random.default_rng([train_cfg.seed, 2, start_epoch])

    history: list[EpochRecord] = []
    best = params.copy()
    best_score, best_epoch, stale = -1.0, start_epoch, 0
    bs = train_cfg.batch_size
    for epoch in range(start_epoch + 1, start_epoch + train_cfg.epochs + 1):
        order = shuffle_rng.permutation(len(samples))
        total, lr = 0.0, 0.0
        for lo in range(0, len(order), bs):
            batch = make_batch([samples[i] for i in order[lo : lo + bs]])
            params.zero_grad()
            try:
                value = batch_loss(batch, params, cfg, train_cfg.loss, train=True, rng=drop_rng)
            except NumericsError as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {opt_state.step + 1}: {exc}") from exc
            if not np.isfinite(value.item()):
                raise TrainingDiverged(f"epoch {epoch}, step {opt_state.step + 1}: loss is {value.item()}")
            nx.backward(value, params)
            lr = adam_step(params, opt_state)
            total += value.item()

        if splits.valid:
            rep = evaluate(params, cfg, splits.valid, train_cfg.eval_batch_size)
            metrics = (rep.hr5, rep.hr10, rep.ndcg5, rep.ndcg10)
        else:
            metrics = (float("nan"),) * 4
        rec = EpochRecord(epoch, total / len(samples), *metrics, lr)
        history.append(rec)
        log.info("epoch %d loss %.4f valid NDCG@10 %.4f", epoch, rec.train_loss, rec.ndcg10)

        score = rec.ndcg10 if splits.valid else -float(epoch)
        if not splits.valid or score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best = params.copy()
        else:
            stale += 1
        if on_epoch is not None:
            on_epoch(rec, params, opt_state)
        if train_cfg.patience and stale >= train_cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    if not history:
        best = params.copy()
    return TrainResult(best, history, opt_state, params, best_epoch)
