"""Geographic helpers: positions, great-circle and projected distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0
KM_PER_DEG_LAT = 110.57
KM_PER_DEG_LON_EQUATOR = 111.32


def wrap_lon(lon):
    """Map longitudes into [-180, 180)."""
    return (np.asarray(lon, dtype=float) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class Position:
    lon: float
    lat: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lon", float(wrap_lon(self.lon)))
        object.__setattr__(self, "lat", float(self.lat))

    def as_array(self) -> np.ndarray:
        return np.array([self.lon, self.lat])


@dataclass(frozen=True)
class Velocity:
    """Drift velocity in degrees per day."""

    v_lon: float
    v_lat: float

    def __post_init__(self):
        if not (np.isfinite(self.v_lon) and np.isfinite(self.v_lat)):
            raise ValueError("velocity components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.v_lon, self.v_lat])


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance in km; broadcasts over array inputs."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(a, dtype=float)) for a in (lon1, lat1, lon2, lat2))
    dlon = lon2 - lon1
    dlat = lat2 - lat1
    a = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def pairwise_haversine_km(a, b):
    """Distance matrix between point sets ``a`` (n, 2) and ``b`` (m, 2) of (lon, lat)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return haversine_km(a[:, None, 0], a[:, None, 1], b[None, :, 0], b[None, :, 1])


def km_per_degree(mean_lat):
    """(km per degree lon, km per degree lat) of the local equirectangular projection."""
    return KM_PER_DEG_LON_EQUATOR * np.cos(np.radians(mean_lat)), KM_PER_DEG_LAT


def projected_error_km(pred, truth, mean_lat=None):
    """Euclidean distance in km after projecting about ``mean_lat``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if mean_lat is None:
        mean_lat = float(np.mean(truth[..., 1]))
    kx, ky = km_per_degree(mean_lat)
    dlon = wrap_lon(pred[..., 0] - truth[..., 0])
    dlat = pred[..., 1] - truth[..., 1]
    return np.hypot(kx * dlon, ky * dlat)
