"""Spatiotemporal field estimation under location uncertainty.

Pipeline per location sample: a kernel-weighted harmonic regression gives the
mean, a Matérn Gaussian process on the residuals gives the conditional field,
and repeating over posterior location draws propagates location uncertainty
through the law of total variance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InferenceError
from .geo import Position, pairwise_haversine_km

log = logging.getLogger(__name__)

YEAR = 365.25
SMOOTHNESS = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class FieldObservation:
    position: Position
    time: float
    value: float
    float_id: str = ""

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("observation value must be finite")


@dataclass(frozen=True)
class MaternParams:
    variance: float
    range_km: float
    smoothness: float = 1.5
    time_range_days: float = math.inf
    nugget: float = 0.0

    def __post_init__(self):
        if not (self.variance > 0 and self.range_km > 0 and self.time_range_days > 0):
            raise ValueError("variance and ranges must be positive")
        if self.nugget < 0:
            raise ValueError("nugget must be nonnegative")
        if self.smoothness not in SMOOTHNESS:
            raise ValueError(f"smoothness must be one of {SMOOTHNESS}")


@dataclass
class ImputationResult:
    mean_of_means: np.ndarray
    mean_conditional_variance: np.ndarray
    between_sample_variance: np.ndarray
    total_variance: np.ndarray
    estimable: np.ndarray


def as_arrays(obs):
    """``(xy (n, 2), t (n,), values (n,))`` from observations or a tuple."""
    if isinstance(obs, tuple):
        xy, t, v = obs
        return np.asarray(xy, dtype=float), np.asarray(t, dtype=float), np.asarray(v, dtype=float)
    xy = np.array([o.position.as_array() for o in obs], dtype=float).reshape(-1, 2)
    t = np.array([o.time for o in obs], dtype=float)
    v = np.array([o.value for o in obs], dtype=float)
    return xy, t, v


# --- mean ----------------------------------------------------------------------------

def harmonic_design(t, harmonics, period=YEAR):
    t = np.asarray(t, dtype=float)
    cols = [np.ones_like(t)]
    for k in range(1, harmonics + 1):
        w = 2.0 * np.pi * k * t / period
        cols += [np.cos(w), np.sin(w)]
    return np.stack(cols, axis=-1)


class MeanFunction:
    """Local harmonic regression: a separate weighted fit at every query point.

    ``coefficients(x)`` returns the fitted basis coefficients, ``__call__``
    evaluates the mean at ``(x, t)``.  Queries with fewer than
    ``2*harmonics + 1`` observations inside one bandwidth are unestimable and
    evaluate to NaN.
    """

    def __init__(self, xy, t, values, bandwidth_km, harmonics=2, period=YEAR):
        self.xy, self.t, self.values = xy, t, values
        self.bandwidth_km = float(bandwidth_km)
        self.harmonics = int(harmonics)
        self.period = period
        self.design = harmonic_design(t, self.harmonics, period)

    def coefficients(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = self.design.shape[1]
        out = np.full((len(x), p), np.nan)
        d = pairwise_haversine_km(x, self.xy)
        for i in range(len(x)):
            if np.count_nonzero(d[i] <= self.bandwidth_km) < p:
                continue
            w = np.exp(-0.5 * (d[i] / self.bandwidth_km) ** 2)
            sw = np.sqrt(w)
            beta, *_ = np.linalg.lstsq(self.design * sw[:, None], self.values * sw, rcond=None)
            out[i] = beta
        return out

    def __call__(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        coef = self.coefficients(x)
        return np.sum(coef * harmonic_design(t, self.harmonics, self.period), axis=1)


def fit_mean(obs, bandwidth_km=250.0, harmonics=2, period=YEAR) -> MeanFunction:
    xy, t, v = as_arrays(obs)
    return MeanFunction(xy, t, v, bandwidth_km, harmonics, period)


# --- covariance --------------------------------------------------------------------

def matern_correlation(rho, smoothness):
    rho = np.asarray(rho, dtype=float)
    if smoothness == 0.5:
        return np.exp(-rho)
    if smoothness == 1.5:
        a = math.sqrt(3.0) * rho
        return (1.0 + a) * np.exp(-a)
    if smoothness == 2.5:
        a = math.sqrt(5.0) * rho
        return (1.0 + a + a * a / 3.0) * np.exp(-a)
    raise ValueError(f"smoothness must be one of {SMOOTHNESS}")


def matern_cov(d_km, dt_days, p: MaternParams):
    """Space-time Matérn covariance; the nugget applies only at zero separation."""
    d = np.asarray(d_km, dtype=float)
    dt = np.abs(np.asarray(dt_days, dtype=float))
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    rho2 = (d / p.range_km) ** 2
    if math.isfinite(p.time_range_days):
        rho2 = rho2 + (dt / p.time_range_days) ** 2
    c = p.variance * matern_correlation(np.sqrt(rho2), p.smoothness)
    if p.nugget > 0:
        c = c + p.nugget * ((d == 0) & (dt == 0))
    return c


def _gram(xy_a, t_a, xy_b, t_b, p):
    d = pairwise_haversine_km(xy_a, xy_b)
    dt = np.abs(t_a[:, None] - t_b[None, :])
    return matern_cov(d, dt, p)


def _loglik_dist(d, dt, r, p: MaternParams):
    try:
        cf = cho_factor(matern_cov(d, dt, p), lower=True)
    except np.linalg.LinAlgError:
        return -np.inf
    alpha = cho_solve(cf, r)
    logdet = 2.0 * np.log(np.diag(cf[0])).sum()
    return float(-0.5 * (r @ alpha) - 0.5 * logdet - 0.5 * len(r) * np.log(2.0 * np.pi))


def gaussian_loglik(xy, t, r, p: MaternParams):
    xy, t = np.asarray(xy, float), np.asarray(t, float)
    return _loglik_dist(pairwise_haversine_km(xy, xy), np.abs(t[:, None] - t[None, :]), np.asarray(r, float), p)


def nearest_neighbour_km(xy):
    """Median distance from each location to its nearest distinct location."""
    d = pairwise_haversine_km(xy, xy)
    d[d == 0] = np.inf
    nn = d.min(axis=1)
    nn = nn[np.isfinite(nn)]
    return float(np.median(nn)) if len(nn) else 0.0


def fit_cov(residuals, init: MaternParams, max_rounds=30, tol=1e-6, fit_time_range=None, min_range_km=None):
    """Maximise the exact Gaussian likelihood by coordinate search in log-parameters.

    ``residuals`` is ``(xy, t, r)``.  Each round tries multiplicative steps
    on every free parameter and keeps improvements; the step shrinks when a
    round makes no progress.  The spatial range is kept above
    ``min_range_km`` (default: median nearest-neighbour spacing), below
    which the Matérn part is white noise on these locations and cannot be
    told apart from the nugget.  Returns ``(params, loglik)``.
    """
    xy, t, r = residuals
    xy, t, r = np.asarray(xy, float), np.asarray(t, float), np.asarray(r, float)
    if len(r) > 3000:
        raise ValueError("exact likelihood limited to 3000 observations")
    d = pairwise_haversine_km(xy, xy)
    dt = np.abs(t[:, None] - t[None, :])
    if min_range_km is None:
        min_range_km = nearest_neighbour_km(xy)
    names = ["variance", "range_km", "nugget"]
    if fit_time_range is None:
        fit_time_range = math.isfinite(init.time_range_days)
    if fit_time_range:
        names.append("time_range_days")
    cur = init if init.nugget > 0 else replace(init, nugget=1e-3 * init.variance)
    best = _loglik_dist(d, dt, r, cur)
    if not np.isfinite(best):
        raise InferenceError("initial covariance parameters give a singular Gram matrix")
    if init.nugget == 0:
        ll0 = _loglik_dist(d, dt, r, init)
        if ll0 >= best:
            cur, best = init, ll0
    step = 1.0
    for _ in range(max_rounds):
        improved = False
        for name in names:
            for sgn in (1.0, -1.0):
                val = getattr(cur, name)
                if val <= 0:
                    val = 1e-6 * cur.variance
                new = val * math.exp(sgn * step)
                if name == "range_km" and new < min_range_km:
                    if val <= min_range_km:
                        continue
                    new = min_range_km
                cand = replace(cur, **{name: new})
                ll = _loglik_dist(d, dt, r, cand)
                if ll > best + tol:
                    cur, best, improved = cand, ll, True
                    break
        if not improved:
            step *= 0.5
            if step < 1e-3:
                break
    return cur, best


# --- prediction --------------------------------------------------------------------

def predict(obs, mean_fn, cov: MaternParams, query_xy, query_t, jitter=(0.0, 1e-8, 1e-6, 1e-4)):
    """Kriging on mean-removed observations.

    Returns ``(mean, variance)`` at the query nodes; variance includes the
    nugget (prediction of a new noisy observation at a node distinct from
    the data).
    """
    xy, t, v = as_arrays(obs)
    qxy = np.atleast_2d(np.asarray(query_xy, dtype=float))
    qt = np.broadcast_to(np.asarray(query_t, dtype=float), (len(qxy),))
    mu_obs = mean_fn(xy, t) if mean_fn is not None else np.zeros(len(v))
    mu_q = mean_fn(qxy, qt) if mean_fn is not None else np.zeros(len(qxy))
    ok = np.isfinite(mu_obs)
    xy, t, r = xy[ok], t[ok], (v - mu_obs)[ok]
    C = _gram(xy, t, xy, t, cov)
    Cq = _gram(qxy, qt, xy, t, cov)
    scale = cov.variance + cov.nugget
    for j in jitter:
        try:
            cf = cho_factor(C + j * scale * np.eye(len(C)), lower=True)
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise InferenceError("Gram matrix not positive definite even with jitter")
    mean = mu_q + Cq @ cho_solve(cf, r)
    W = cho_solve(cf, Cq.T)
    var = matern_cov(np.zeros(len(qxy)), np.zeros(len(qxy)), cov) - np.sum(Cq * W.T, axis=1)
    # a query coinciding with a datum also picks up its nugget in Cq; keep var >= 0
    return mean, np.maximum(var, 0.0)


# --- multiple imputation --------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    bandwidth_km: float = 250.0
    harmonics: int = 2
    cov: MaternParams = MaternParams(1.0, 200.0, 1.5, 60.0, 0.01)
    fit_covariance: bool = True


def impute_aggregate(location_samples, obs_values, obs_times, query_xy, query_t, cfg: PipelineConfig | None = None):
    """Run the field pipeline once per location sample and pool the results.

    ``location_samples`` is a sequence of (n, 2) arrays giving one draw of
    every observation's position; ``obs_values``/``obs_times`` are shared.
    Between-sample variance is the population variance of the per-sample
    conditional means.
    """
    cfg = cfg or PipelineConfig()
    samples = [np.asarray(s, dtype=float) for s in location_samples]
    if len(samples) < 2:
        raise ValueError("need at least two location samples")
    qxy = np.atleast_2d(np.asarray(query_xy, dtype=float))
    means, variances = [], []
    for xy in samples:
        obs = (xy, np.asarray(obs_times, float), np.asarray(obs_values, float))
        mean_fn = fit_mean(obs, cfg.bandwidth_km, cfg.harmonics)
        cov = cfg.cov
        if cfg.fit_covariance:
            r = obs[2] - mean_fn(xy, obs[1])
            ok = np.isfinite(r)
            cov, _ = fit_cov((xy[ok], obs[1][ok], r[ok]), cov)
        m, v = predict(obs, mean_fn, cov, qxy, query_t)
        means.append(m)
        variances.append(v)
    return aggregate(np.array(means), np.array(variances))


def aggregate(means, variances) -> ImputationResult:
    """Law of total variance across imputations (rows = samples)."""
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    estimable = np.all(np.isfinite(means) & np.isfinite(variances), axis=0)
    mm = means.mean(axis=0)
    within = variances.mean(axis=0)
    between = means.var(axis=0)
    total = within + between
    nan = np.where(estimable, 1.0, np.nan)
    return ImputationResult(mm * nan, within * nan, between * nan, total * nan, estimable)


def draws_to_location_samples(draws, index_map, n_samples=None, seed=None):
    """Pick location samples for field observations from trajectory draws.

    ``draws`` maps float_id to PosteriorDraws; ``index_map`` is a sequence of
    ``(float_id, profile index)`` for every observation.  Returns a list of
    (n_obs, 2) arrays, one per selected draw.
    """
    rng = np.random.default_rng(seed)
    n_avail = min(d.n_draws for d in draws.values())
    n_samples = n_avail if n_samples is None else min(n_samples, n_avail)
    picks = {fid: rng.choice(d.n_draws, n_samples, replace=False) for fid, d in draws.items()}
    out = []
    for k in range(n_samples):
        out.append(np.array([draws[fid].X[picks[fid][k], i] for fid, i in index_map]))
    return out


def haversine_to_nearest(xy, ref_xy):
    return pairwise_haversine_km(np.atleast_2d(xy), np.atleast_2d(ref_xy)).min(axis=1)

