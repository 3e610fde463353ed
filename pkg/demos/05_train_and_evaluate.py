"""Train a small model on planted data and compare it with the frequency baseline.

The learning rate follows ``coef / sqrt(d) * min(step^-0.5, step * warmup^-1.5)``.
At small ``d`` and small batches ``coef = 1`` peaks high enough to collapse
the model onto the marginal POI distribution, so this run scales it down.
"""

import time

from starhit import dataio, evalkit, model, training

ds = dataio.synth_dataset(dataio.SynthSpec(n_users=20, days=30, seed=5))
splits = dataio.prepare_splits([c for t in ds.trajectories for c in t.checkins], L_max=32, min_count=10)

cfg = model.ModelConfig(n_pois=len(splits.vocab), d=32, d_k=64, h=2, k=4, l=2, L_max=32, dropout=0.1)
params = training.xavier_init(cfg, seed=0)
opt = training.OptimState.for_store(params, cfg.d, coef=0.1, warmup_step=100)

start = time.perf_counter()
result = training.train(splits, cfg, training.TrainConfig(epochs=10, batch_size=32, seed=0), params, opt)
for rec in result.history:
    print(f"epoch {rec.epoch:2d}: loss {rec.train_loss:.3f}  valid HR@5 {rec.hr5:.3f}  NDCG@10 {rec.ndcg10:.3f}  lr {rec.lr:.2e}")
print(f"{time.perf_counter() - start:.0f}s, best epoch {result.best_epoch}")

star = evalkit.evaluate(result.params, cfg, splits.test)
base = evalkit.mflm_evaluate(splits.test, len(splits.vocab))
print(f"test  model HR@5 {star.hr5:.3f} NDCG@10 {star.ndcg10:.3f}")
print(f"test  MFLM  HR@5 {base.hr5:.3f} NDCG@10 {base.ndcg10:.3f}")
