"""Check-in loading, filtering, windowing and chronological splitting.

Window arrays use embedding-row ids: a POI with dense index ``i`` is stored
as ``i + 1`` and 0 marks padding.  Labels keep the dense index in ``[0, n)``.
"""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMATS = ("tsv_foursquare", "tsv_gowalla", "generic_csv")

# column positions of (user, poi, lat, lon, time) per known dump layout
_COLUMNS = {
    "tsv_foursquare": (0, 1, 4, 5, 7),
    "tsv_gowalla": (0, 4, 2, 3, 1),
    "generic_csv": (0, 1, 2, 3, 4),
}


class DataFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    poi_id: str
    lat: float
    lon: float
    timestamp: int
    poi_index: int = -1  # dense index, set by densify()

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 < self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside (-180, 180]")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass
class Trajectory:
    user_id: str
    checkins: list[CheckIn]

    def __post_init__(self):
        if not self.checkins:
            raise ValueError(f"trajectory for user {self.user_id!r} is empty")
        ts = [c.timestamp for c in self.checkins]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"trajectory for user {self.user_id!r} is not in chronological order")

    def __len__(self):
        return len(self.checkins)


@dataclass
class PoiVocab:
    """Bidirectional raw POI id <-> dense index map."""

    ids: list[str]
    coords: np.ndarray  # (n, 2) lat/lon of each dense index
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {p: i for i, p in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)


@dataclass
class WindowedSample:
    user_id: str
    poi_ids: np.ndarray  # (L_max,) embedding rows, 0 = padding
    valid_len: int
    coords: np.ndarray  # (L_max, 2)
    timestamps: np.ndarray  # (L_max,)
    label_poi: int
    mask: np.ndarray  # (L_max,) bool
    label_timestamp: int = 0
    label_pos: int = 0  # position of the label inside the source trajectory


@dataclass
class DatasetSplits:
    train: list[WindowedSample]
    valid: list[WindowedSample]
    test: list[WindowedSample]
    vocab: PoiVocab

    @property
    def n_pois(self) -> int:
        return len(self.vocab)


# ---------------------------------------------------------------------------
# loading


def parse_timestamp(text: str) -> int:
    """Integer epoch seconds, ISO-8601, or the Foursquare dump format; UTC."""
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        dt = datetime.strptime(text, "%a %b %d %H:%M:%S %z %Y")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_checkins(path, format: str = "generic_csv", columns: Sequence[int] | None = None) -> list[CheckIn]:
    """Read check-ins in file order.

    ``columns`` overrides the (user, poi, lat, lon, time) column positions for
    ``generic_csv`` variants.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    cols = tuple(columns) if columns is not None else _COLUMNS[format]
    if len(cols) != 5:
        raise ValueError("columns must give 5 positions: user, poi, lat, lon, time")
    records: list[CheckIn] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            delim = "\t" if format != "generic_csv" or "\t" in line else ","
            parts = line.split(delim)
            if len(parts) <= max(cols):
                raise DataFormatError(f"expected at least {max(cols) + 1} fields, got {len(parts)}", lineno)
            user, poi, lat, lon, ts = (parts[c].strip() for c in cols)
            if not records and lineno == 1 and not _is_number(lat):
                continue  # header
            try:
                records.append(CheckIn(user, poi, float(lat), float(lon), parse_timestamp(ts)))
            except ValueError as exc:
                raise DataFormatError(str(exc), lineno) from None
    if not records:
        raise DataFormatError(f"{path}: no check-ins found")
    return records


def write_checkins(path, records: Sequence[CheckIn]) -> None:
    """Write records as comma-separated generic_csv with a header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id,poi_id,lat,lon,timestamp\n")
        for r in records:
            fh.write(f"{r.user_id},{r.poi_id},{r.lat!r},{r.lon!r},{r.timestamp}\n")


# ---------------------------------------------------------------------------
# cleaning


def filter_min_support(records: Sequence[CheckIn], min_count: int = 10) -> list[CheckIn]:
    """Drop users and POIs with fewer than ``min_count`` check-ins, repeated to a fixpoint."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    out = list(records)
    while True:
        users = Counter(r.user_id for r in out)
        pois = Counter(r.poi_id for r in out)
        kept = [r for r in out if users[r.user_id] >= min_count and pois[r.poi_id] >= min_count]
        if len(kept) == len(out):
            return kept
        out = kept


def densify(records: Sequence[CheckIn]) -> tuple[list[CheckIn], PoiVocab]:
    """Assign dense POI indices in sorted raw-id order."""
    ids = sorted({r.poi_id for r in records})
    coords = np.zeros((len(ids), 2))
    index = {p: i for i, p in enumerate(ids)}
    out = []
    for r in records:
        i = index[r.poi_id]
        coords[i] = (r.lat, r.lon)
        out.append(replace(r, poi_index=i))
    return out, PoiVocab(ids, coords)


def build_trajectories(records: Sequence[CheckIn]) -> list[Trajectory]:
    """Group by user (sorted ids) and order each user's check-ins by time (stable)."""
    by_user: dict[str, list[CheckIn]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    return [Trajectory(u, sorted(by_user[u], key=lambda c: c.timestamp)) for u in sorted(by_user)]


# ---------------------------------------------------------------------------
# windowing and splitting


def build_samples(trajectories: Sequence[Trajectory], L_max: int) -> list[WindowedSample]:
    """One sample per label position; the window holds up to L_max preceding check-ins.

    Windows are right-padded with zeros when fewer than L_max check-ins precede
    the label; once the trajectory is long enough the window slides with stride 1.
    """
    if L_max < 2:
        raise ValueError("L_max must be >= 2")
    samples = []
    for traj in trajectories:
        cs = traj.checkins
        if any(c.poi_index < 0 for c in cs):
            raise ValueError(f"user {traj.user_id!r}: check-ins must be densified first")
        for t in range(1, len(cs)):
            window = cs[max(0, t - L_max) : t]
            n = len(window)
            poi_ids = np.zeros(L_max, dtype=np.int64)
            coords = np.zeros((L_max, 2))
            stamps = np.zeros(L_max, dtype=np.int64)
            poi_ids[:n] = [c.poi_index + 1 for c in window]
            coords[:n] = [(c.lat, c.lon) for c in window]
            stamps[:n] = [c.timestamp for c in window]
            mask = np.arange(L_max) < n
            samples.append(
                WindowedSample(traj.user_id, poi_ids, n, coords, stamps, cs[t].poi_index, mask, cs[t].timestamp, t)
            )
    return samples


def split_counts(c: int, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    n_train = math.floor(ratios[0] * c + 1e-9)
    n_valid = math.floor(ratios[1] * c + 1e-9)
    if c >= 3:
        n_train = max(n_train, 1)
    return n_train, n_valid, c - n_train - n_valid


def chrono_split(
    samples: Sequence[WindowedSample],
    vocab: PoiVocab,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> DatasetSplits:
    """Split each user's samples chronologically by label time."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    by_user: dict[str, list[WindowedSample]] = defaultdict(list)
    for s in samples:
        by_user[s.user_id].append(s)
    train, valid, test = [], [], []
    for user in sorted(by_user):
        items = sorted(by_user[user], key=lambda s: (s.label_timestamp, s.label_pos))
        if len(items) < 3:
            log.warning("user %s has %d samples; all assigned to train", user, len(items))
            train.extend(items)
            continue
        n_train, n_valid, _ = split_counts(len(items), ratios)
        train.extend(items[:n_train])
        valid.extend(items[n_train : n_train + n_valid])
        test.extend(items[n_train + n_valid :])
    return DatasetSplits(train, valid, test, vocab)


def prepare_splits(records: Sequence[CheckIn], L_max: int, min_count: int = 10) -> DatasetSplits:
    """filter -> densify -> trajectories -> windows -> split."""
    kept = filter_min_support(records, min_count)
    if not kept:
        raise ValueError(f"no check-ins left after filtering with min_count={min_count}")
    dense, vocab = densify(kept)
    return chrono_split(build_samples(build_trajectories(dense), L_max), vocab)


def dataset_stats(records: Sequence[CheckIn]) -> dict[str, float]:
    """Table-style statistics: counts, sparsity, and per-user revisit measures."""
    users = sorted({r.user_id for r in records})
    pois = {r.poi_id for r in records}
    per_user: dict[str, Counter] = defaultdict(Counter)
    for r in records:
        per_user[r.user_id][r.poi_id] += 1
    pairs = sum(len(c) for c in per_user.values())
    users_per_poi = Counter(p for c in per_user.values() for p in c)
    freq = [sum(c.values()) / len(c) for c in per_user.values()]
    ratio = [(sum(c.values()) - len(c)) / sum(c.values()) for c in per_user.values()]
    return {
        "users": len(users),
        "pois": len(pois),
        "checkins": len(records),
        "avg_pois_per_user": pairs / len(users),
        "avg_users_per_poi": sum(users_per_poi.values()) / len(pois),
        "revisit_frequency": float(np.mean(freq)),
        "revisit_ratio": float(np.mean(ratio)),
        "sparsity": 1.0 - pairs / (len(users) * len(pois)),
    }



# ---------------------------------------------------------------------------
# synthetic planted-hierarchy data


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 50
    regions_per_user: int = 2
    pois_per_region: int = 4
    days: int = 60
    noise_rate: float = 0.1
    seed: int = 7


@dataclass(frozen=True)
class Segment:
    """A planted run of visits inside one region on one day (end exclusive)."""

    user_id: str
    start: int
    end: int
    day: int
    region: int


@dataclass
class SynthDataset:
    trajectories: list[Trajectory]
    segments: list[Segment]
    noise_log: list[tuple[str, int]]  # (user, position) of replaced visits
    vocab: PoiVocab


def _offset(lat: float, lon: float, north_km: float, east_km: float) -> tuple[float, float]:
    dlat = north_km / 111.195
    dlon = east_km / (111.195 * math.cos(math.radians(lat)))
    return lat + dlat, lon + dlon


def synth_dataset(spec: SynthSpec) -> SynthDataset:
    """Users cycling through fixed POI routines in well-separated regions.

    Each day a user visits every region in order and, inside a region, its
    POIs in a fixed order.  Regions are ~1 km discs whose centers lie 15 km
    apart; a ``noise_rate`` fraction of visits is swapped for a uniformly
    drawn POI from the whole catalogue.
    """
    if min(spec.n_users, spec.regions_per_user, spec.pois_per_region, spec.days) < 1:
        raise ValueError("synth spec counts must all be >= 1")
    if not 0 <= spec.noise_rate < 1:
        raise ValueError("noise_rate must lie in [0, 1)")
    rng = np.random.default_rng(spec.seed)
    width = len(str(spec.n_users - 1))
    users = [f"u{i:0{width}d}" for i in range(spec.n_users)]

    # POI catalogue: user -> region -> list of (poi_id, lat, lon)
    catalogue: list[list[list[tuple[str, float, float]]]] = []
    flat: list[tuple[str, float, float]] = []
    for ui in range(spec.n_users):
        base_lat = float(rng.uniform(30.0, 45.0))
        base_lon = float(rng.uniform(-120.0, -75.0))
        heading = float(rng.uniform(0, 2 * math.pi))
        regions = []
        for r in range(spec.regions_per_user):
            c_lat, c_lon = _offset(base_lat, base_lon, 15.0 * r * math.sin(heading), 15.0 * r * math.cos(heading))
            pois = []
            for j in range(spec.pois_per_region):
                radius = 1.0 * math.sqrt(float(rng.random()))
                angle = float(rng.uniform(0, 2 * math.pi))
                lat, lon = _offset(c_lat, c_lon, radius * math.sin(angle), radius * math.cos(angle))
                entry = (f"p{ui}_{r}_{j}", round(lat, 6), round(lon, 6))
                pois.append(entry)
                flat.append(entry)
            regions.append(pois)
        catalogue.append(regions)

    day0 = 1704067200  # 2024-01-01T00:00:00Z
    visits_per_day = spec.regions_per_user * spec.pois_per_region
    step = (14 * 3600) // visits_per_day
    checkins: list[CheckIn] = []
    segments: list[Segment] = []
    noise_log: list[tuple[str, int]] = []
    for ui, user in enumerate(users):
        pos = 0
        for day in range(spec.days):
            for r, pois in enumerate(catalogue[ui]):
                start = pos
                for entry in pois:
                    ts = day0 + day * 86400 + 7 * 3600 + (pos % visits_per_day) * step
                    if rng.random() < spec.noise_rate:
                        entry = flat[int(rng.integers(len(flat)))]
                        noise_log.append((user, pos))
                    checkins.append(CheckIn(user, entry[0], entry[1], entry[2], ts))
                    pos += 1
                segments.append(Segment(user, start, pos, day, r))

    dense, vocab = densify(checkins)
    return SynthDataset(build_trajectories(dense), segments, noise_log, vocab)


def write_segments(path, segments: Sequence[Segment]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id,start,end,day,region\n")
        for s in segments:
            fh.write(f"{s.user_id},{s.start},{s.end},{s.day},{s.region}\n")


def read_segments(path) -> list[Segment]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    out = []
    for line in lines:
        u, a, b, d, r = line.split(",")
        out.append(Segment(u, int(a), int(b), int(d), int(r)))
    return out
