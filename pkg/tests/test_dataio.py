import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starhit import dataio
from starhit.dataio import CheckIn, DataFormatError


def _ci(user, poi, ts, lat=10.0, lon=20.0):
    return CheckIn(user, poi, lat, lon, ts)


def test_load_three_lines_and_header(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("user,poi,lat,lon,time\nu1,p1,1.0,2.0,100\nu1,p2,1.5,2.5,2024-01-01T00:00:00Z\nu2,p1,1.0,2.0,300\n")
    records = dataio.load_checkins(path)
    assert len(records) == 3
    assert records[1].timestamp == 1704067200
    assert records == dataio.load_checkins(path)


def test_load_reports_bad_latitude_line(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("u1,p1,1.0,2.0,100\nu1,p1,95.0,2.0,200\n")
    with pytest.raises(DataFormatError) as err:
        dataio.load_checkins(path)
    assert err.value.line == 2


def test_load_empty_file_errors(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("")
    with pytest.raises(DataFormatError):
        dataio.load_checkins(path)


def test_load_foursquare_layout(tmp_path):
    path = tmp_path / "nyc.tsv"
    path.write_text("470\t49bbd6c0f964a520f4531fe3\t4bf58dd8d48988d127951735\tArts & Crafts Store\t40.719810375488535\t"
                    "-74.00258103213994\t-240\tTue Apr 03 18:00:09 +0000 2012\n")
    (rec,) = dataio.load_checkins(path, "tsv_foursquare")
    assert rec.user_id == "470" and rec.poi_id == "49bbd6c0f964a520f4531fe3"
    assert rec.timestamp == 1333476009


def test_column_override(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("100,1.0,2.0,p9,u3\n")
    (rec,) = dataio.load_checkins(path, columns=[4, 3, 1, 2, 0])
    assert (rec.user_id, rec.poi_id, rec.timestamp) == ("u3", "p9", 100)


def test_write_then_load_round_trips(tmp_path):
    recs = [_ci("a", "x", 5, 1.25, -3.5), _ci("b", "y", 9)]
    dataio.write_checkins(tmp_path / "o.csv", recs)
    assert dataio.load_checkins(tmp_path / "o.csv") == recs


def test_checkin_invariants():
    with pytest.raises(ValueError):
        CheckIn("u", "p", 0.0, -180.0, 0)
    with pytest.raises(ValueError):
        CheckIn("u", "p", 0.0, 0.0, -1)
    with pytest.raises(ValueError):
        dataio.Trajectory("u", [_ci("u", "p", 5), _ci("u", "p", 4)])


def _brute_fixpoint(records, m):
    out = list(records)
    changed = True
    while changed:
        changed = False
        for key in ("user_id", "poi_id"):
            counts = Counter(getattr(r, key) for r in out)
            kept = [r for r in out if counts[getattr(r, key)] >= m]
            changed |= len(kept) != len(out)
            out = kept
    return out


def test_filter_cascade():
    # u5 holds the only extra visits that keep poi "z" at 3; dropping u5 drops z, which then drops u4
    recs = []
    for u in ("u1", "u2", "u3"):
        recs += [_ci(u, "a", t) for t in range(3)]
    recs += [_ci("u4", "a", 0), _ci("u4", "a", 1), _ci("u4", "z", 2)]
    recs += [_ci("u5", "z", 0), _ci("u5", "z", 1)]
    out = dataio.filter_min_support(recs, 3)
    assert out == _brute_fixpoint(recs, 3)
    assert {r.user_id for r in out} == {"u1", "u2", "u3"}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 4))
def test_filter_matches_brute_force(seed, m):
    r = np.random.default_rng(seed)
    recs = [_ci(f"u{r.integers(6)}", f"p{r.integers(6)}", i) for i in range(40)]
    out = dataio.filter_min_support(recs, m)
    assert out == _brute_fixpoint(recs, m)
    for key in ("user_id", "poi_id"):
        assert all(c >= m for c in Counter(getattr(x, key) for x in out).values())


def test_filter_noop_when_all_supported():
    recs = [_ci("u", "p", t) for t in range(10)]
    assert dataio.filter_min_support(recs, 10) == recs


def _traj(T, L=None):
    dense, _ = dataio.densify([_ci("u", f"p{t % 3}", t) for t in range(T)])
    return dataio.build_trajectories(dense)


def test_five_checkins_give_four_samples():
    samples = dataio.build_samples(_traj(5), 100)
    assert [s.valid_len for s in samples] == [1, 2, 3, 4]
    assert [s.label_pos for s in samples] == [1, 2, 3, 4]
    for s in samples:
        assert s.poi_ids[s.valid_len:].sum() == 0 and s.mask.sum() == s.valid_len


def test_single_checkin_gives_nothing():
    assert dataio.build_samples(_traj(1), 8) == []


def test_long_trajectory_slides():
    traj = _traj(130)
    samples = dataio.build_samples(traj, 128)
    last = samples[-1]
    assert last.valid_len == 128 and last.label_pos == 129
    # window = check-ins 2..129 (1-based)
    np.testing.assert_array_equal(last.timestamps, np.arange(1, 129))
    for s in samples:
        assert s.poi_ids[s.valid_len - 1] - 1 == traj[0].checkins[s.label_pos - 1].poi_index


@pytest.mark.parametrize("c,expected", [(10, (8, 1, 1)), (3, (2, 0, 1)), (20, (16, 2, 2)), (4, (3, 0, 1))])
def test_split_counts(c, expected):
    assert dataio.split_counts(c) == expected


def test_chrono_split_ignores_input_order(caplog):
    samples = dataio.build_samples(_traj(11), 4)
    vocab = dataio.densify([_ci("u", f"p{t}", t) for t in range(3)])[1]
    a = dataio.chrono_split(samples, vocab)
    b = dataio.chrono_split(list(reversed(samples)), vocab)
    assert [s.label_pos for s in a.train] == [s.label_pos for s in b.train] == list(range(1, 9))
    assert [s.label_pos for s in a.test] == [10]
    with caplog.at_level(logging.WARNING):
        small = dataio.chrono_split(samples[:2], vocab)
    assert len(small.train) == 2 and "all assigned to train" in caplog.text


def test_split_is_chronological_per_user(tiny_splits):
    for user in {s.user_id for s in tiny_splits.train}:
        tr = [s.label_timestamp for s in tiny_splits.train if s.user_id == user]
        va = [s.label_timestamp for s in tiny_splits.valid if s.user_id == user]
        te = [s.label_timestamp for s in tiny_splits.test if s.user_id == user]
        assert max(tr) <= min(va + te)
        if va and te:
            assert max(va) <= min(te)


def test_prepare_rejects_empty():
    with pytest.raises(ValueError):
        dataio.prepare_splits([_ci("u", "p", 0)], 8, 10)


def test_revisit_ratio_single_poi():
    stats = dataio.dataset_stats([_ci("u", "p", t) for t in range(10)])
    assert stats["revisit_ratio"] == pytest.approx(0.9)
    assert stats["revisit_frequency"] == pytest.approx(10.0)
    assert stats["sparsity"] == 0.0


def test_synth_noiseless_cycle():
    ds = dataio.synth_dataset(dataio.SynthSpec(n_users=1, regions_per_user=2, pois_per_region=3, days=2, noise_rate=0.0))
    pois = [c.poi_id for c in ds.trajectories[0].checkins]
    assert len(pois) == 12 and pois[:6] == pois[6:] and len(set(pois)) == 6
    assert not ds.noise_log


def test_synth_deterministic_and_seeded():
    spec = dataio.SynthSpec(n_users=3, days=4)
    a, b = dataio.synth_dataset(spec), dataio.synth_dataset(spec)
    assert a.trajectories == b.trajectories and a.segments == b.segments
    c = dataio.synth_dataset(dataio.SynthSpec(n_users=3, days=4, seed=8))
    assert c.trajectories != a.trajectories


def test_synth_noise_count():
    # 25 users x 40 visits = 1000; binomial(1000, 0.2) within 3 sigma
    ds = dataio.synth_dataset(dataio.SynthSpec(n_users=25, regions_per_user=2, pois_per_region=4, days=5, noise_rate=0.2))
    assert sum(len(t) for t in ds.trajectories) == 1000
    assert abs(len(ds.noise_log) - 200) <= 30


def test_synth_regions_are_separated():
    ds = dataio.synth_dataset(dataio.SynthSpec(n_users=3, days=1, noise_rate=0.0))
    from starhit.geotime import haversine

    by_region = {}
    for c in ds.trajectories[0].checkins:
        by_region.setdefault(c.poi_id.split("_")[1], []).append((c.lat, c.lon))
    a, b = by_region["0"], by_region["1"]
    assert max(haversine(p, q) for p in a for q in a) <= 2.0
    assert min(haversine(p, q) for p in a for q in b) >= 10.0


def test_segments_tile_noiseless_trajectories(tmp_path):
    ds = dataio.synth_dataset(dataio.SynthSpec(n_users=2, days=3, noise_rate=0.0))
    dataio.write_segments(tmp_path / "s.csv", ds.segments)
    segs = dataio.read_segments(tmp_path / "s.csv")
    assert segs == ds.segments
    for traj in ds.trajectories:
        mine = [s for s in segs if s.user_id == traj.user_id]
        assert mine[0].start == 0 and mine[-1].end == len(traj)
        assert all(a.end == b.start for a, b in zip(mine, mine[1:]))
        for s in mine:
            assert len({c.poi_id.split("_")[1] for c in traj.checkins[s.start : s.end]}) == 1
