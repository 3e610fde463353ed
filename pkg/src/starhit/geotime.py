"""Pairwise spatial and temporal relations inside a check-in window."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0
DISTANCE_FLOOR_KM = 0.01
N_TIME_LEVELS = 7

HOUR = 3600
DAY = 24 * HOUR
# upper bounds (inclusive) of levels 1..6; anything longer is level 7
TIME_LEVEL_BOUNDS = np.array([HOUR, DAY, 7 * DAY, 30 * DAY, 90 * DAY, 365 * DAY], dtype=np.int64)


@dataclass
class RelationMatrices:
    spatial: np.ndarray  # (L, L) km, floored at DISTANCE_FLOOR_KM
    temporal: np.ndarray  # (L, L) integer levels in [1, 7]


def haversine(g1, g2):
    """Great-circle distance in km between (lat, lon) pairs given in degrees.

    Accepts scalars or broadcastable arrays for each coordinate pair.
    """
    lat1, lon1 = np.radians(g1[0]), np.radians(g1[1])
    lat2, lon2 = np.radians(g2[0]), np.radians(g2[1])
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def time_level(delta_seconds):
    """Map a non-negative interval in seconds to its scale level in [1, 7]."""
    delta = np.asarray(delta_seconds)
    if np.any(delta < 0):
        raise ValueError("time_level: interval must be non-negative")
    level = np.searchsorted(TIME_LEVEL_BOUNDS, delta, side="left") + 1
    return int(level) if level.ndim == 0 else level


def relation_arrays(coords: np.ndarray, timestamps: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched relation matrices.

    Args:
        coords: (..., L, 2) latitude/longitude in degrees.
        timestamps: (..., L) seconds.
        mask: (..., L) True for real check-ins.

    Returns:
        spatial (..., L, L) float64 km and temporal (..., L, L) int64 levels.
        Pairs touching a padded position hold the floor distance and level 1.
    """
    lat = coords[..., 0]
    lon = coords[..., 1]
    spatial = haversine((lat[..., :, None], lon[..., :, None]), (lat[..., None, :], lon[..., None, :]))
    spatial = np.maximum(spatial, DISTANCE_FLOOR_KM)
    ts = np.asarray(timestamps, dtype=np.int64)
    temporal = time_level(np.abs(ts[..., :, None] - ts[..., None, :]))
    pair = mask[..., :, None] & mask[..., None, :]
    spatial = np.where(pair, spatial, DISTANCE_FLOOR_KM)
    temporal = np.where(pair, temporal, 1)
    return spatial, temporal


def relation_matrices(sample) -> RelationMatrices:
    """Relation matrices for one :class:`~starhit.dataio.WindowedSample`."""
    spatial, temporal = relation_arrays(np.asarray(sample.coords), np.asarray(sample.timestamps), np.asarray(sample.mask))
    return RelationMatrices(spatial, temporal)
