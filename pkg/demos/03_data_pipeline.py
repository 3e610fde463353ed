"""Synthetic check-ins with a planted region structure, windowed and split per user."""

import tempfile
from pathlib import Path

from starhit import dataio, formats

ds = dataio.synth_dataset(dataio.SynthSpec(n_users=10, days=20, seed=1))
records = [c for t in ds.trajectories for c in t.checkins]
print(f"{len(records)} check-ins, {len(ds.segments)} planted segments, {len(ds.noise_log)} noise visits")
print("first segment:", ds.segments[0])

splits = dataio.prepare_splits(records, L_max=32, min_count=10)
print(f"{len(splits.vocab)} POIs after filtering")
print(f"samples: train={len(splits.train)} valid={len(splits.valid)} test={len(splits.test)}")

s = splits.test[0]
print(f"test sample of user {s.user_id}: {s.valid_len} visits, label POI {s.label_poi}")
print("stats:", dataio.dataset_stats(dataio.filter_min_support(records, 10)))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "dataset.bin"
    formats.save_dataset(path, splits)
    again = formats.load_dataset(path)
    print(f"dataset container: {path.stat().st_size} bytes, reloaded {len(again.train)} train samples")
