"""One forward pass: global attention, learned partitions and the hierarchy of encoders."""

import numpy as np

from starhit import dataio, model, training
from starhit import numerics as nx

ds = dataio.synth_dataset(dataio.SynthSpec(n_users=6, days=15, seed=2))
splits = dataio.prepare_splits([c for t in ds.trajectories for c in t.checkins], L_max=32, min_count=10)

cfg = model.ModelConfig(n_pois=len(splits.vocab), d=16, d_k=32, h=2, k=4, l=2, L_max=32, dropout=0.0)
params = training.xavier_init(cfg, seed=0)
print(f"{sum(a.size for a in params.arrays().values())} parameters; sequence lengths per encoder: "
      f"{model.encoder_lengths(cfg.L_max, cfg.k, cfg.l)}")

sample = splits.test[0]
with nx.no_grad():
    scores, trace = model.forward(model.make_batch([sample]), params, cfg)

for e, enc in enumerate(trace.encoders, start=1):
    plan = enc.plan
    live = enc.mask_out[0]
    print(f"encoder {e}: {plan.T_in} inputs -> {live.sum()} live subsequences")
    print("  windows [left, right):", [(round(float(a), 2), round(float(b), 2)) for a, b in zip(plan.left[0][live], plan.right[0][live])])

top = np.argsort(-scores.data[0])[:5]
print("top-5 POIs:", top.tolist(), "label:", sample.label_poi)
