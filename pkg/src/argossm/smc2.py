"""Likelihood-tempered SMC² over the static parameters.

A cloud of parameter vectors moves from the prior (``xi = 0``) to the
posterior (``xi = 1``).  Each temperature step is chosen adaptively so that
the incremental weights keep a target ESS, then the cloud is resampled and
rejuvenated by particle-marginal Metropolis-Hastings moves whose likelihood
comes from a fresh particle filter run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.special import expit, logit, logsumexp

from .errors import ConfigurationError, InferenceError
from .lingauss import kalman_filter
from .model import ModelKind, ModelParams, ProfileSeries
from .smc import PosteriorDraws, SmcConfig, ffbs, run_filter, systematic_resample

log = logging.getLogger(__name__)

BASE_NAMES = {
    ModelKind.RW: ("sx2", "sy2"),
    ModelKind.AR: ("alpha", "v0_lon", "v0_lat", "sx2", "sv2", "sy2"),
}
ICE_NAMES = ("pTPR", "pTNR", "pMAR")
PROBABILITIES = {"alpha", "pTPR", "pTNR", "pMAR"}
VARIANCES = {"sx2", "sv2", "sy2", "sigmaPV2"}


def parameter_names(kind) -> tuple:
    kind = ModelKind.parse(kind)
    names = BASE_NAMES[kind.skeleton]
    if kind.has_ice:
        names = names + ICE_NAMES
    if kind.has_pv:
        names = names + ("sigmaPV2",)
    return names


def _gamma(mean, shape=2.0):
    return ("gamma", (shape, shape / mean))


@dataclass(frozen=True)
class PriorSpec:
    """Independent priors, one ``(tag, hyperparameters)`` pair per parameter.

    Tags: ``beta (a, b)``, ``lognormal (mu, sigma)``, ``normal (mean, var)``,
    ``gamma (shape, rate)``.
    """

    dists: dict = field(default_factory=lambda: {
        "alpha": ("beta", (8.9, 0.99)),
        "sigmaPV2": ("lognormal", (0.0, 3.0)),
        "v0_lon": ("normal", (0.0, 0.01)),
        "v0_lat": ("normal", (0.0, 0.01)),
        "pMAR": ("beta", (1.0, 9.0)),
        "pTPR": ("beta", (9.0, 1.0)),
        "pTNR": ("beta", (9.0, 1.0)),
        "sx2": _gamma(0.02**2),
        "sy2": _gamma(1e-6),
        "sv2": _gamma(0.01**2),
    })

    def __post_init__(self):
        for name, (tag, hyper) in self.dists.items():
            if tag not in ("beta", "lognormal", "normal", "gamma"):
                raise ConfigurationError(f"unknown prior family {tag!r} for {name}")
            positive = hyper[1:] if tag in ("normal", "lognormal") else hyper
            if any(not h > 0 for h in positive):
                raise ConfigurationError(f"prior hyperparameters for {name} must be positive")

    def with_gamma_means(self, sx2=None, sy2=None, sv2=None, shape=2.0) -> "PriorSpec":
        d = dict(self.dists)
        for k, v in (("sx2", sx2), ("sy2", sy2), ("sv2", sv2)):
            if v is not None:
                d[k] = _gamma(v, shape)
        return PriorSpec(d)

    def frozen(self, name):
        tag, h = self.dists[name]
        if tag == "beta":
            return stats.beta(h[0], h[1])
        if tag == "lognormal":
            return stats.lognorm(s=h[1], scale=np.exp(h[0]))
        if tag == "normal":
            return stats.norm(h[0], np.sqrt(h[1]))
        return stats.gamma(h[0], scale=1.0 / h[1])


# --- transforms ------------------------------------------------------------------

def to_unconstrained(name, x):
    x = np.asarray(x, dtype=float)
    if name in PROBABILITIES:
        return logit(x)
    if name in VARIANCES:
        return np.log(x)
    return x


def to_constrained(name, u):
    u = np.asarray(u, dtype=float)
    if name in PROBABILITIES:
        return expit(u)
    if name in VARIANCES:
        return np.exp(u)
    return u


def log_jacobian(name, u):
    """``log |dx/du|``."""
    u = np.asarray(u, dtype=float)
    if name in PROBABILITIES:
        return -np.logaddexp(0.0, u) - np.logaddexp(0.0, -u)
    if name in VARIANCES:
        return u
    return np.zeros_like(u)


# --- cloud -------------------------------------------------------------------------

@dataclass
class ThetaCloud:
    names: tuple
    u: np.ndarray  # (M, d) unconstrained
    log_weights: np.ndarray
    loglik: np.ndarray
    xi: float = 0.0

    def __post_init__(self):
        if self.u.shape[0] < 8:
            raise ConfigurationError("need at least 8 parameter particles")

    def __len__(self):
        return self.u.shape[0]

    @property
    def values(self):
        """Constrained parameter values, shape (M, d)."""
        return np.column_stack([to_constrained(n, self.u[:, j]) for j, n in enumerate(self.names)])

    @property
    def weights(self):
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def column(self, name):
        return self.values[:, self.names.index(name)]


def log_prior(spec: PriorSpec, names, u):
    """Prior log-density of unconstrained vectors (Jacobian included)."""
    u = np.atleast_2d(u)
    out = np.zeros(u.shape[0])
    for j, n in enumerate(names):
        x = to_constrained(n, u[:, j])
        out += spec.frozen(n).logpdf(x) + log_jacobian(n, u[:, j])
    return out


def sample_prior(spec: PriorSpec, names, M, seed=None) -> ThetaCloud:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cols = []
    for n in names:
        x = spec.frozen(n).rvs(size=M, random_state=rng)
        if n in PROBABILITIES:
            x = np.clip(x, 1e-12, 1 - 1e-12)
        elif n in VARIANCES:
            x = np.maximum(x, 1e-300)
        cols.append(to_unconstrained(n, x))
    u = np.column_stack(cols)
    return ThetaCloud(tuple(names), u, np.full(M, -np.log(M)), np.zeros(M), 0.0)


def params_from_theta(names, values, series: ProfileSeries, fixed=None, velocity_var=0.01) -> ModelParams:
    """Build model parameters from a named vector (plus fixed entries)."""
    th = dict(zip(names, np.asarray(values, dtype=float)))
    if fixed:
        th.update(fixed)
    kw = {}
    for k in ("alpha", "sigmaPV2", *ICE_NAMES):
        if k in th:
            kw[k] = float(th[k])
    kw["v0"] = np.array([th.get("v0_lon", 0.0), th.get("v0_lat", 0.0)])
    p = ModelParams.isotropic(th["sx2"], th.get("sv2", 1e-4), th["sy2"], **kw)
    return p.anchored(series, velocity_var)


# --- tempering ---------------------------------------------------------------------

def _ess_frac(log_w):
    lw = log_w - logsumexp(log_w)
    return float(np.exp(-logsumexp(2.0 * lw))) / len(log_w)


def next_temperature(cloud: ThetaCloud, target_ess_frac=0.5, iterations=30, min_step=1e-8):
    """Largest next temperature keeping the ESS of the reweighted cloud at the target.

    The ESS is that of ``W * exp(delta * loglik)`` (current weights times
    incremental weights), found by bisection on ``delta``.
    """
    xi = cloud.xi
    if xi >= 1.0:
        return 1.0
    ll = np.where(np.isfinite(cloud.loglik), cloud.loglik, -np.inf)
    base = cloud.log_weights

    def frac(delta):
        lw = base + delta * ll
        if not np.any(np.isfinite(lw)):
            return 0.0
        return _ess_frac(np.where(np.isnan(lw), -np.inf, lw))

    if frac(1.0 - xi) >= target_ess_frac:
        return 1.0
    lo, hi = 0.0, 1.0 - xi
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if frac(mid) >= target_ess_frac:
            lo = mid
        else:
            hi = mid
    return min(1.0, xi + max(lo, min_step))


# --- likelihood --------------------------------------------------------------------

@dataclass(frozen=True)
class Smc2Config:
    n_theta: int = 200
    smc: SmcConfig = field(default_factory=lambda: SmcConfig(n_particles=2500))
    target_ess: float = 0.5
    n_moves: int = 3
    max_moves: int = 20
    move_tol: float = 0.1
    max_steps: int = 500
    fixed: dict | None = None
    linear_fast_path: bool = True
    draws_per_theta: int = 1
    seed: int | None = 0

    def __post_init__(self):
        if self.n_theta < 8:
            raise ConfigurationError("n_theta must be >= 8")
        if not 0.0 < self.target_ess < 1.0:
            raise ConfigurationError("target_ess must lie in (0, 1)")


class LoglikEstimator:
    """Particle-filter likelihood estimates for parameter vectors.

    For the linear kinds with the twisted look-ahead filter the estimate is
    deterministic and equal to the Kalman likelihood, so with
    ``linear_fast_path`` that value is computed directly.
    """

    def __init__(self, series, kind, env, cfg: Smc2Config, names):
        self.series = series
        self.kind = ModelKind.parse(kind)
        self.env = env
        self.cfg = cfg
        self.names = names
        smc_cfg = cfg.smc
        self.exact = (cfg.linear_fast_path and self.kind.is_linear and smc_cfg.proposal == "lookahead"
                      and smc_cfg.twist)
        self.n_calls = 0
        self.n_failures = 0

    def params(self, values):
        return params_from_theta(self.names, values, self.series, self.cfg.fixed)

    def __call__(self, values, rng):
        self.n_calls += 1
        try:
            p = self.params(values)
            if self.exact:
                return kalman_filter(self.series, p, self.kind)[1]
            return run_filter(self.series, p, self.kind, self.env, self.cfg.smc, rng=rng).loglik
        except (InferenceError, ValueError, np.linalg.LinAlgError) as exc:
            self.n_failures += 1
            log.debug("likelihood evaluation failed: %s", exc)
            return -np.inf


def rejuvenate(cloud: ThetaCloud, spec: PriorSpec, estimator, n_moves, rng, scale=None, max_moves=None, tol=0.1):
    """PMMH moves targeting ``prior * likelihood**xi`` on an equally weighted cloud.

    Runs at least ``n_moves`` sweeps.  With ``max_moves`` larger than that,
    sweeps continue until the mean squared (Mahalanobis) distance of the
    particles from their starting points grows by less than ``tol`` in
    relative terms, or ``max_moves`` is reached.
    Returns ``(new cloud, acceptance rate)``.
    """
    M, d = cloud.u.shape
    u = cloud.u.copy()
    ll = cloud.loglik.copy()
    lp = log_prior(spec, cloud.names, u)
    C = np.atleast_2d(np.cov(u, rowvar=False)) if M > 1 else np.eye(d)
    C = 0.5 * (C + C.T) + 1e-10 * np.eye(d)
    s2 = (2.38**2 / d) if scale is None else scale**2
    L = np.linalg.cholesky(s2 * C)
    Cinv = np.linalg.inv(C)
    u0 = u.copy()
    max_moves = max(n_moves, max_moves or n_moves)
    accepted = 0
    jump = 0.0
    sweeps = 0
    while sweeps < max_moves:
        sweeps += 1
        prop = u + rng.standard_normal((M, d)) @ L.T
        lp_new = log_prior(spec, cloud.names, prop)
        for i in range(M):
            if not np.isfinite(lp_new[i]):
                continue
            ll_new = estimator(to_values(cloud.names, prop[i]), rng) if estimator is not None else 0.0
            log_ratio = lp_new[i] - lp[i]
            if cloud.xi > 0:
                log_ratio += cloud.xi * (ll_new - ll[i]) if np.isfinite(ll[i]) else np.inf
            if np.log(rng.random()) < log_ratio:
                u[i], lp[i], ll[i] = prop[i], lp_new[i], ll_new
                accepted += 1
        diff = u - u0
        new_jump = float(np.mean(np.einsum("ij,jk,ik->i", diff, Cinv, diff)))
        if sweeps >= n_moves and new_jump - jump < tol * new_jump:
            break
        jump = new_jump
    new = replace(cloud, u=u, loglik=ll)
    return new, accepted / (M * max(sweeps, 1))


def to_values(names, u_row):
    return np.array([to_constrained(n, u_row[j]) for j, n in enumerate(names)], dtype=float)


# --- driver ------------------------------------------------------------------------

@dataclass
class Smc2Result:
    cloud: ThetaCloud
    log_evidence: float
    ladder: np.ndarray
    acceptance: np.ndarray
    draws: PosteriorDraws | None
    n_likelihood_calls: int
    n_failures: int

    def summary(self, level=0.9):
        """Posterior mean and equal-tailed interval per parameter."""
        w = self.cloud.weights
        vals = self.cloud.values
        out = {}
        q = [(1 - level) / 2, (1 + level) / 2]
        for j, n in enumerate(self.cloud.names):
            lo, hi = weighted_quantile(vals[:, j], w, q)
            out[n] = {"mean": float(w @ vals[:, j]), "lo": lo, "hi": hi}
        return out


def weighted_quantile(x, w, q):
    order = np.argsort(x)
    x, w = np.asarray(x)[order], np.asarray(w)[order]
    cdf = np.cumsum(w) - 0.5 * w
    cdf /= w.sum()
    return [float(v) for v in np.interp(q, cdf, x)]


def run_smc2(series: ProfileSeries, kind, spec: PriorSpec | None = None, env=None, cfg: Smc2Config | None = None,
             trajectories=True) -> Smc2Result:
    kind = ModelKind.parse(kind)
    spec = spec or PriorSpec()
    cfg = cfg or Smc2Config()
    rng = np.random.default_rng(cfg.seed)
    names = tuple(n for n in parameter_names(kind) if not (cfg.fixed and n in cfg.fixed))
    if not names:
        raise ConfigurationError("every parameter is fixed")
    est = LoglikEstimator(series, kind, env, cfg, names)
    cloud = sample_prior(spec, names, cfg.n_theta, rng)
    cloud.loglik = np.array([est(to_values(names, row), rng) for row in cloud.u])
    ladder = [0.0]
    acc = []
    log_z = 0.0
    while cloud.xi < 1.0:
        if len(ladder) > cfg.max_steps:
            raise InferenceError(f"temperature ladder did not reach 1 within {cfg.max_steps} steps: {ladder[-5:]}")
        xi_new = next_temperature(cloud, cfg.target_ess)
        delta = xi_new - cloud.xi
        inc = delta * np.where(np.isfinite(cloud.loglik), cloud.loglik, -np.inf)
        lw = cloud.log_weights - logsumexp(cloud.log_weights)
        step = logsumexp(lw + inc)
        if not np.isfinite(step):
            raise InferenceError(f"non-finite evidence increment; ladder so far {ladder}")
        log_z += step
        cloud = replace(cloud, log_weights=lw + inc - step, xi=xi_new)
        ladder.append(xi_new)
        idx = systematic_resample(cloud.weights, rng)
        M = len(cloud)
        cloud = replace(cloud, u=cloud.u[idx], loglik=cloud.loglik[idx], log_weights=np.full(M, -np.log(M)))
        cloud, rate = rejuvenate(cloud, spec, est, cfg.n_moves, rng, max_moves=cfg.max_moves, tol=cfg.move_tol)
        acc.append(rate)
        log.info("xi=%.6f acceptance=%.2f", xi_new, rate)
    if not np.isfinite(log_z):
        raise InferenceError(f"non-finite evidence; ladder {ladder}")
    draws = sample_trajectories(cloud, series, kind, env, cfg, est, rng) if trajectories else None
    return Smc2Result(cloud, float(log_z), np.array(ladder), np.array(acc), draws, est.n_calls, est.n_failures)


def sample_trajectories(cloud: ThetaCloud, series, kind, env, cfg: Smc2Config, est: LoglikEstimator, rng):
    """FFBS draws for every retained parameter vector (``draws_per_theta`` each)."""
    X, V, S, thetas = [], [], [], []
    vals = cloud.values
    for i in range(len(cloud)):
        p = est.params(vals[i])
        out = run_filter(series, p, kind, env, cfg.smc, rng=rng)
        d = ffbs(out, cfg.draws_per_theta, seed=rng)
        X.append(d.X)
        if d.V is not None:
            V.append(d.V)
        if d.S is not None:
            S.append(d.S)
        thetas.extend([dict(zip(cloud.names, vals[i].tolist()))] * cfg.draws_per_theta)
    return PosteriorDraws(series.float_id, series.times.copy(), np.concatenate(X),
                          np.concatenate(V) if V else None, np.concatenate(S) if S else None, thetas)
