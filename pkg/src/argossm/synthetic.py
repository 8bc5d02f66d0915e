"""Synthetic Southern-Ocean-like world for tests, benchmarks and demos.

A zonal continental slope (meandering with longitude) gives a strong PV
gradient, and a seasonal ice edge advances north in austral winter.  Floats
released near the edge spend part of each winter under ice.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .envfields import EnvHandles, GridField, PvGradientGrid, precompute_pv_grid
from .model import ModelKind, ModelParams, simulate

YEAR = 365.25
# PV in units of 1e-8 / (m s): keeps gradients O(1) per degree so that
# sigmaPV2 lives on a sensible scale.
DEFAULT_PV_SCALE = 1e8


@dataclass(frozen=True)
class World:
    env: EnvHandles
    bathymetry: GridField
    pv_scale: float

    @property
    def ice(self):
        return self.env.ice

    @property
    def pv(self) -> PvGradientGrid:
        return self.env.pv


def slope_latitude(lon):
    return -62.0 + 1.5 * np.sin(2.0 * np.pi * (np.asarray(lon) + 40.0) / 20.0)


def depth(lon, lat):
    """Metres; shallow shelf to the south, abyssal plain to the north."""
    return 2600.0 + 1800.0 * np.tanh((np.asarray(lat) - slope_latitude(lon)) / 1.2)


def ice_edge(t):
    return -63.5 + 3.0 * np.cos(2.0 * np.pi * (np.asarray(t) - 240.0) / YEAR)


def ice_concentration(lon, lat, t):
    z = (ice_edge(t) - np.asarray(lat)) / 0.6
    return 1.0 / (1.0 + np.exp(-z))


def temperature(x, t):
    x = np.asarray(x, dtype=float)
    return 0.5 + 0.25 * (x[..., 1] + 62.0) + 0.02 * (x[..., 0] + 20.0) + 0.4 * np.cos(2.0 * np.pi * (t - 40.0) / YEAR)


def salinity(x, t):
    x = np.asarray(x, dtype=float)
    return 34.2 + 0.03 * (x[..., 1] + 62.0) - 0.05 * np.sin(2.0 * np.pi * t / YEAR)


def measure(x, t):
    return temperature(x, t), salinity(x, t)


@lru_cache(maxsize=4)
def make_world(pv_scale=DEFAULT_PV_SCALE, bandwidth_km=60.0, days=3 * 365, resolution=0.5) -> World:
    lon = np.arange(-45.0, 15.0 + 1e-9, 0.25)
    lat = np.arange(-74.0, -50.0 + 1e-9, 0.25)
    LON, LAT = np.meshgrid(lon, lat)
    bathy = GridField(lon, lat, depth(LON, LAT))
    glon = np.arange(-45.0, 15.0 + 1e-9, resolution)
    glat = np.arange(-74.0, -50.0 + 1e-9, resolution)
    pv = precompute_pv_grid(bathy, glon, glat, bandwidth_km).scaled(pv_scale)
    t = np.arange(0.0, float(days) + 1.0)
    GLON, GLAT = np.meshgrid(glon, glat)
    ice = GridField(glon, glat, ice_concentration(GLON[None], GLAT[None], t[:, None, None]), time_axis=t)
    return World(EnvHandles(ice=ice, pv=pv), bathy, pv_scale)


def benchmark_params(**changes) -> ModelParams:
    """Momentum-rich parameters for the synthetic benchmark (degrees, days)."""
    base = dict(
        SigmaX=np.eye(2) * 2e-4,
        SigmaV=np.eye(2) * 4e-5,
        SigmaY=np.eye(2) * 1e-6,
        v0=np.array([0.02, 0.0]),
        alpha=0.92,
        sigmaPV2=2e-4,
        pTPR=0.9,
        pTNR=0.95,
        pMAR=0.05,
        mu1=np.array([-20.0, -62.0, 0.02, 0.0]),
        Sigma1=np.diag([1.0, 0.3, 1e-4, 1e-4]),
    )
    base.update(changes)
    return ModelParams(**base)


def simulate_floats(kind, params: ModelParams, n_floats, n_profiles=72, dt=10.0, seed=0, world: World | None = None,
                    t0=0.0, measure_fn=measure):
    """Independent floats from ``kind``; returns ``[(trajectory, series), ...]``."""
    kind = ModelKind.parse(kind)
    env = None
    if kind.has_ice or kind.has_pv:
        env = (world or make_world()).env
    times = t0 + dt * np.arange(n_profiles)
    seqs = np.random.SeedSequence(seed).spawn(n_floats)
    out = []
    for i, ss in enumerate(seqs):
        out.append(simulate(kind, params, times, env=env, seed=np.random.default_rng(ss),
                            float_id=f"F{i:03d}", measure_fn=measure_fn))
    return out
