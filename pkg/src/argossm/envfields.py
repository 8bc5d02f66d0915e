"""Gridded environmental fields: ice concentration and bathymetry-derived PV.

Grids are stored as dense ``(time?, lat, lon)`` arrays with NaN marking fill
cells.  Static grids have no time axis.  Ice snapshots are looked up at the
nearest available day.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, LoadError
from .geo import KM_PER_DEG_LAT, haversine_km
from .ice import detect_prob

OMEGA = 7.292115e-5


@dataclass(frozen=True)
class GridField:
    lon_axis: np.ndarray
    lat_axis: np.ndarray
    values: np.ndarray
    time_axis: np.ndarray | None = None
    fill_value: float = float("nan")

    def __post_init__(self):
        lon = np.asarray(self.lon_axis, dtype=float)
        lat = np.asarray(self.lat_axis, dtype=float)
        vals = np.array(self.values, dtype=float)
        for name, ax in (("lon", lon), ("lat", lat)):
            if ax.ndim != 1 or len(ax) < 2 or np.any(np.diff(ax) <= 0):
                raise ValueError(f"{name} axis must be strictly increasing with >= 2 nodes")
        t = None
        if self.time_axis is not None:
            t = np.asarray(self.time_axis, dtype=float)
            if t.ndim != 1 or len(t) < 1 or np.any(np.diff(t) <= 0):
                raise ValueError("time axis must be strictly increasing")
            expected = (len(t), len(lat), len(lon))
        else:
            expected = (len(lat), len(lon))
        if vals.shape != expected:
            raise ValueError(f"values shape {vals.shape} does not match axes {expected}")
        if not math.isnan(self.fill_value):
            vals[vals == self.fill_value] = np.nan
        object.__setattr__(self, "lon_axis", lon)
        object.__setattr__(self, "lat_axis", lat)
        object.__setattr__(self, "time_axis", t)
        object.__setattr__(self, "values", vals)

    @property
    def is_temporal(self) -> bool:
        return self.time_axis is not None

    def snapshot(self, t=None, clamp=False) -> np.ndarray:
        """2-D slice nearest to day ``t`` (ties resolve to the earlier day)."""
        if self.time_axis is None:
            return self.values
        if t is None:
            raise DomainError("temporal grid queried without a time")
        ta = self.time_axis
        if not clamp and not (ta[0] - 0.5 <= t <= ta[-1] + 0.5):
            raise DomainError(f"time {t} outside grid time axis", coordinate=t)
        k = int(np.clip(np.searchsorted(ta, t), 0, len(ta) - 1))
        if k > 0 and abs(t - ta[k - 1]) <= abs(ta[k] - t):
            k -= 1
        return self.values[k]

    def sample(self, lon, lat, t=None, clamp=True):
        """Vectorised bilinear interpolation.

        With ``clamp`` the query is moved to the nearest point of the grid
        hull; otherwise a query outside raises :class:`DomainError`.  Fill
        corners are dropped and the remaining weights renormalised; a cell
        with only fill corners yields NaN.
        """
        return _bilinear(self.lon_axis, self.lat_axis, self.snapshot(t, clamp), lon, lat, clamp)


def _bilinear(lon_axis, lat_axis, grid, lon, lat, clamp):
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if clamp:
        lon = np.clip(lon, lon_axis[0], lon_axis[-1])
        lat = np.clip(lat, lat_axis[0], lat_axis[-1])
    else:
        bad = (lon < lon_axis[0]) | (lon > lon_axis[-1]) | (lat < lat_axis[0]) | (lat > lat_axis[-1])
        if np.any(bad):
            i = np.flatnonzero(np.atleast_1d(bad))[0]
            coord = (float(np.atleast_1d(lon)[i]), float(np.atleast_1d(lat)[i]))
            raise DomainError(f"position {coord} outside grid hull", coordinate=coord)
    i = np.clip(np.searchsorted(lon_axis, lon, side="right") - 1, 0, len(lon_axis) - 2)
    j = np.clip(np.searchsorted(lat_axis, lat, side="right") - 1, 0, len(lat_axis) - 2)
    fx = (lon - lon_axis[i]) / (lon_axis[i + 1] - lon_axis[i])
    fy = (lat - lat_axis[j]) / (lat_axis[j + 1] - lat_axis[j])
    corners = (
        (grid[j, i], (1 - fx) * (1 - fy)),
        (grid[j, i + 1], fx * (1 - fy)),
        (grid[j + 1, i], (1 - fx) * fy),
        (grid[j + 1, i + 1], fx * fy),
    )
    num = np.zeros(np.broadcast(fx, fy).shape)
    den = np.zeros_like(num)
    for val, w in corners:
        ok = np.isfinite(val)
        num = num + np.where(ok, w * np.where(ok, val, 0.0), 0.0)
        den = den + np.where(ok, w, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return out if out.ndim else float(out)


def bilinear(field: GridField, x, t=None):
    """Interpolate ``field`` at position ``x``; raises outside the grid hull."""
    lon, lat = _lonlat(x)
    return float(field.sample(lon, lat, t, clamp=False))


def _lonlat(x):
    if hasattr(x, "lon"):
        return float(x.lon), float(x.lat)
    lon, lat = x
    return float(lon), float(lat)


def local_quadratic_fit(field: GridField, x, bandwidth_km, t=None, cutoff=3.0):
    """Locally weighted quadratic regression of a static field at ``x``.

    Gaussian kernel weights ``exp(-d^2 / (2 bw^2))`` with ``d`` the
    great-circle distance in km; nodes further than ``cutoff * bw`` are
    ignored.  Returns ``(value, gradient)`` with the gradient in field units
    per degree (d/dlon, d/dlat).
    """
    lon0, lat0 = _lonlat(x)
    grid = field.snapshot(t)
    lon_g, lat_g, vals, w = _neighbourhood(field.lon_axis, field.lat_axis, grid, lon0, lat0, bandwidth_km, cutoff)
    in_bw = w >= math.exp(-0.5)
    if in_bw.sum() < 6:
        raise DomainError(f"fewer than 6 valid nodes within bandwidth of {(lon0, lat0)}", coordinate=(lon0, lat0))
    dx = lon_g - lon0
    dy = lat_g - lat0
    quad = np.column_stack([np.ones_like(dx), dx, dy, dx * dx, dx * dy, dy * dy])
    beta = _wls(quad, vals, w)
    if beta is None:
        beta = _wls(quad[:, :3], vals, w)
    if beta is None:
        raise DomainError(f"rank-deficient local regression at {(lon0, lat0)}", coordinate=(lon0, lat0))
    return float(beta[0]), np.array([beta[1], beta[2]])


def _neighbourhood(lon_axis, lat_axis, grid, lon0, lat0, bw, cutoff):
    reach_lat = cutoff * bw / KM_PER_DEG_LAT
    coslat = max(math.cos(math.radians(min(abs(lat0) + reach_lat, 89.9))), 1e-3)
    reach_lon = reach_lat / coslat
    ii = np.flatnonzero(np.abs(lon_axis - lon0) <= reach_lon)
    jj = np.flatnonzero(np.abs(lat_axis - lat0) <= reach_lat)
    LON, LAT = np.meshgrid(lon_axis[ii], lat_axis[jj])
    vals = grid[np.ix_(jj, ii)]
    ok = np.isfinite(vals)
    LON, LAT, vals = LON[ok], LAT[ok], vals[ok]
    d = haversine_km(lon0, lat0, LON, LAT)
    keep = d <= cutoff * bw
    w = np.exp(-0.5 * (d[keep] / bw) ** 2)
    return LON[keep], LAT[keep], vals[keep], w


def _wls(X, y, w):
    sw = np.sqrt(w)
    A = X * sw[:, None]
    if A.shape[0] < A.shape[1]:
        return None
    # column scaling keeps the rank test meaningful when dx^2 << 1
    scale = np.linalg.norm(A, axis=0)
    if np.any(scale == 0):
        return None
    s = np.linalg.svd(A / scale, compute_uv=False)
    if s[-1] < 1e-10 * s[0]:
        return None
    beta, *_ = np.linalg.lstsq(A / scale, y * sw, rcond=None)
    return beta / scale


def coriolis(lat):
    return 2.0 * OMEGA * np.sin(np.pi * np.asarray(lat, dtype=float) / 180.0)


def pv_from_depth(lat, h, grad_h):
    """PV = f/h and its gradient per degree by the quotient rule."""
    f = coriolis(lat)
    dfdlat = 2.0 * np.pi * OMEGA * np.cos(np.pi * lat / 180.0) / 180.0
    grad = -f / h**2 * np.asarray(grad_h, dtype=float)
    grad = grad + np.array([0.0, dfdlat / h])
    return f / h, grad


def pv_and_gradient(bathymetry: GridField, x, bandwidth_km):
    """Potential vorticity and its gradient at ``x`` from smoothed depth.

    Depth is positive downwards (metres); a smoothed depth <= 0 is land.
    """
    lon, lat = _lonlat(x)
    h, grad_h = local_quadratic_fit(bathymetry, (lon, lat), bandwidth_km)
    if h <= 0:
        raise DomainError(f"smoothed depth {h:.3g} <= 0 at {(lon, lat)} (land)", coordinate=(lon, lat))
    return pv_from_depth(lat, h, grad_h)


@dataclass(frozen=True)
class PvGradientGrid:
    lon_axis: np.ndarray
    lat_axis: np.ndarray
    pv: np.ndarray
    grad: np.ndarray  # (nlat, nlon, 2)

    def gradient(self, lon, lat):
        """Bilinear ∇PV at arbitrary positions, clamped to the grid; fill -> 0."""
        gx = _bilinear(self.lon_axis, self.lat_axis, self.grad[..., 0], lon, lat, True)
        gy = _bilinear(self.lon_axis, self.lat_axis, self.grad[..., 1], lon, lat, True)
        g = np.stack([np.asarray(gx), np.asarray(gy)], axis=-1)
        return np.nan_to_num(g, nan=0.0)

    def value(self, lon, lat):
        return _bilinear(self.lon_axis, self.lat_axis, self.pv, lon, lat, True)

    def scaled(self, factor) -> "PvGradientGrid":
        """Same field in different PV units (``sigmaPV2`` scales with ``factor**2``)."""
        return PvGradientGrid(self.lon_axis, self.lat_axis, self.pv * factor, self.grad * factor)


def precompute_pv_grid(bathymetry: GridField, lon_axis, lat_axis, bandwidth_km) -> PvGradientGrid:
    lon_axis = np.asarray(lon_axis, dtype=float)
    lat_axis = np.asarray(lat_axis, dtype=float)
    pv = np.full((len(lat_axis), len(lon_axis)), np.nan)
    grad = np.full(pv.shape + (2,), np.nan)
    for j, lat in enumerate(lat_axis):
        for i, lon in enumerate(lon_axis):
            try:
                pv[j, i], grad[j, i] = pv_and_gradient(bathymetry, (lon, lat), bandwidth_km)
            except DomainError:
                pass
    return PvGradientGrid(lon_axis, lat_axis, pv, grad)


@dataclass(frozen=True)
class EnvHandles:
    """Environment seen by the nonlinear model: ice concentration and ∇PV."""

    ice: GridField | None = None
    pv: PvGradientGrid | None = None
    detect_formula: str = "paper"
    extra: dict = field(default_factory=dict)

    def ice_concentration(self, lon, lat, t):
        if self.ice is None:
            raise ValueError("no ice field configured")
        E = self.ice.sample(lon, lat, t, clamp=True)
        return np.clip(np.nan_to_num(E, nan=0.0), 0.0, 1.0)

    def detect_prob(self, xy, t, params):
        xy = np.asarray(xy, dtype=float)
        E = self.ice_concentration(xy[..., 0], xy[..., 1], t)
        return detect_prob(E, params.pTPR, params.pTNR, self.detect_formula)

    def pv_gradient(self, xy):
        xy = np.asarray(xy, dtype=float)
        if self.pv is None:
            return np.zeros(xy.shape)
        return self.pv.gradient(xy[..., 0], xy[..., 1])


# --- GRIDFIELD v1 text format -------------------------------------------------

def _fmt(v):
    return "nan" if not np.isfinite(v) else repr(float(v))


def write_grid(path, field_: GridField, fill=-9999.0):
    path = Path(path)
    nt = 0 if field_.time_axis is None else len(field_.time_axis)
    lines = [f"GRIDFIELD v1 {len(field_.lon_axis)} {len(field_.lat_axis)} {nt} {_fmt(fill)}"]
    lines.append(" ".join(_fmt(v) for v in field_.lon_axis))
    lines.append(" ".join(_fmt(v) for v in field_.lat_axis))
    lines.append("" if nt == 0 else " ".join(_fmt(v) for v in field_.time_axis))
    vals = field_.values if nt else field_.values[None]
    for snap in vals:
        for row in snap:
            lines.append(" ".join(_fmt(fill if np.isnan(v) else v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def read_grid(path) -> GridField:
    lines = Path(path).read_text().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    head = lines[0].split() if lines else []
    if len(head) != 6 or head[:2] != ["GRIDFIELD", "v1"]:
        raise LoadError("expected header 'GRIDFIELD v1 <nlon> <nlat> <ntime> <fill>'", line=1)
    try:
        nlon, nlat, nt = int(head[2]), int(head[3]), int(head[4])
        fill = float(head[5])
    except ValueError as exc:
        raise LoadError(f"bad header field: {exc}", line=1) from None
    expected = 4 + max(nt, 1) * nlat
    if len(lines) != expected:
        raise LoadError(f"expected {expected} lines, found {len(lines)}", line=len(lines))

    def floats(k, n):
        try:
            row = [float(v) for v in lines[k].split()]
        except ValueError as exc:
            raise LoadError(str(exc), line=k + 1) from None
        if len(row) != n:
            raise LoadError(f"expected {n} values, found {len(row)}", line=k + 1)
        return row

    lon = floats(1, nlon)
    lat = floats(2, nlat)
    t = floats(3, nt) if nt else None
    data = np.array([floats(k, nlon) for k in range(4, expected)])
    data = data.reshape(nt, nlat, nlon) if nt else data.reshape(nlat, nlon)
    if not math.isnan(fill):
        data[data == fill] = np.nan
    try:
        return GridField(np.array(lon), np.array(lat), data, None if t is None else np.array(t))
    except ValueError as exc:
        raise LoadError(str(exc)) from None
