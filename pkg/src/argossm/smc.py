"""Adapted auxiliary particle filter and FFBS smoothing.

The filter targets the (optionally twisted) filtering distributions of any
model kind.  Two proposals are available:

``bootstrap``
    particles move through the model transition; weights are the
    observation and availability likelihoods.
``lookahead``
    particles are drawn from the linear skeleton's conditional
    ``P_AR(Z_n | Z_{n-1}, all Y)``, optionally tilted by the PV constraint at
    the parent position.

With ``twist`` the intermediate targets are multiplied by the skeleton's
predictive likelihood of the remaining fixes, so each incremental weight
carries ``psi_n(Z_n) / psi_{n-1}(Z_{n-1})``.  On a pure AR model the
look-ahead proposal together with twisting makes every weight equal and the
likelihood estimate exact.

The ice state is never sampled during filtering: every particle carries its
belief over ``S`` and is weighted by the marginal availability likelihood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import ice
from .errors import ConfigurationError, InferenceError
from .lingauss import LOG_2PI, build_cache
from .model import ModelKind, ModelParams, ProfileSeries, initial_moments, linear_system, psd_factor, pv_posterior, velocity_mean

log = logging.getLogger(__name__)

PROPOSALS = ("bootstrap", "lookahead")


@dataclass(frozen=True)
class SmcConfig:
    n_particles: int = 1000
    resample_threshold: float = 0.5
    proposal: str = "lookahead"
    twist: bool = True
    pv_in_proposal: bool = True
    seed: int | None = 0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ConfigurationError("n_particles must be >= 2")
        if not 0.0 < self.resample_threshold <= 1.0:
            raise ConfigurationError("resample_threshold must lie in (0, 1]")
        if self.proposal not in PROPOSALS:
            raise ConfigurationError(f"proposal must be one of {PROPOSALS}")


@dataclass
class ParticleCloud:
    """Weighted particles at one index.

    ``log_weights`` are normalised.  ``log_twist`` holds the twisting
    function evaluated at each particle (zeros when twisting is off) so that
    the untwisted filtering weights are ``log_weights - log_twist``.
    """

    Z: np.ndarray
    log_weights: np.ndarray
    ancestors: np.ndarray
    beliefs: np.ndarray | None
    log_twist: np.ndarray
    loglik: float

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def positions(self):
        return self.Z[:, :2]

    @property
    def velocities(self):
        return self.Z[:, 2:] if self.Z.shape[1] == 4 else None


@dataclass
class FilterOutput:
    clouds: list
    loglik: float
    ess: np.ndarray
    resampled: np.ndarray
    context: "FilterContext" = field(repr=False)


@dataclass
class PosteriorDraws:
    """Joint posterior draws of trajectories (and optionally parameters)."""

    float_id: str
    times: np.ndarray
    X: np.ndarray
    V: np.ndarray | None = None
    S: np.ndarray | None = None
    theta: list | None = None

    @property
    def n_draws(self):
        return self.X.shape[0]


# --- weight utilities -------------------------------------------------------------

def normalize_log_weights(log_w):
    """Return ``(normalised log-weights, log of the weight sum)``."""
    log_w = np.asarray(log_w, dtype=float)
    total = logsumexp(log_w)
    if not np.isfinite(total):
        raise InferenceError("all particle weights are zero")
    return log_w - total, float(total)


def ess(log_weights):
    """Effective sample size ``1 / sum(w^2)`` of (unnormalised) log-weights."""
    lw, _ = normalize_log_weights(log_weights)
    return float(np.exp(-logsumexp(2.0 * lw)))


def systematic_resample(weights, rng, n=None):
    """Systematic resampling: one uniform offset drives all ``n`` strata."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    w = np.asarray(weights, dtype=float)
    n = len(w) if n is None else n
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(w) - 1)


def mvn_logpdf(x, mean, chol):
    """Gaussian log-density with a shared Cholesky factor; broadcasts rows."""
    r = np.asarray(x) - np.asarray(mean)
    w = np.linalg.solve(chol, r.T).T if r.ndim > 1 else np.linalg.solve(chol, r)
    d = chol.shape[-1]
    return -0.5 * np.sum(w * w, axis=-1) - np.log(np.diag(chol)).sum() - 0.5 * d * LOG_2PI


def batch_mvn_logpdf(x, mean, chol):
    """Gaussian log-density with per-row Cholesky factors (K, d, d)."""
    r = np.asarray(x) - np.asarray(mean)
    w = np.linalg.solve(chol, r[..., None])[..., 0]
    d = chol.shape[-1]
    logdet = np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    return -0.5 * np.sum(w * w, axis=-1) - logdet - 0.5 * d * LOG_2PI


def _batch_chol(C):
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(C)
        w = np.clip(w, 1e-300, None)
        # QR of the symmetric square root gives a triangular factor
        S = U * np.sqrt(w)[..., None, :]
        R = np.linalg.qr(np.swapaxes(S, -1, -2), mode="r")
        L = np.swapaxes(R, -1, -2)
        sign = np.sign(np.diagonal(L, axis1=-2, axis2=-1))
        return L * np.where(sign == 0, 1.0, sign)[..., None, :]


# --- filter context ---------------------------------------------------------------

class FilterContext:
    """Precomputed per-run quantities shared by proposal, weighting and FFBS."""

    def __init__(self, series: ProfileSeries, params: ModelParams, kind, env=None, cfg: SmcConfig | None = None):
        self.series = series
        self.params = params
        self.kind = ModelKind.parse(kind)
        self.env = env
        self.cfg = cfg or SmcConfig()
        if self.kind.has_ice and (env is None or env.ice is None):
            raise ConfigurationError(f"{self.kind.value} needs an ice field")
        if self.kind.has_pv and (env is None or env.pv is None):
            raise ConfigurationError(f"{self.kind.value} needs a PV gradient grid")
        self.d = self.kind.state_dim
        self.uses_cache = self.cfg.proposal == "lookahead" or self.cfg.twist
        self.cache = build_cache(series, params, self.kind) if self.uses_cache else None
        self.LY = psd_factor(params.SigmaY, "SigmaY")
        self.LX = psd_factor(params.SigmaX, "SigmaX")
        self.LV = psd_factor(params.SigmaV, "SigmaV")
        self.trans = [None] + [linear_system(self.kind, params, series.times[n] - series.times[n - 1])
                               for n in range(1, len(series))]
        self._trans_chol = {}

    def dt(self, n):
        return self.series.times[n] - self.series.times[n - 1]

    def trans_chol(self, n):
        if n not in self._trans_chol:
            self._trans_chol[n] = _chol_or_fail(self.trans[n][2], n)
        return self._trans_chol[n]

    def log_twist(self, n, Z):
        """``log psi_n(Z) = log P_skel(Y_{n+1:N} | Z_n)``."""
        if not self.cfg.twist:
            return np.zeros(len(Z))
        return self.cache.prd[n](Z)

    def obs_loglik(self, n, Z):
        if not self.series.available[n]:
            return np.zeros(len(Z))
        return mvn_logpdf(Z[:, :2], self.series.gps[n], self.LY)

    def detect(self, n, X):
        return self.env.detect_prob(X, self.series.times[n], self.params)

    def velocity_law(self, n, Xp_v, X_new):
        """Mean and covariance (batched) of ``V_n`` given parent velocity and new position."""
        dt = self.dt(n)
        m = velocity_mean(Xp_v, dt, self.params)
        if self.kind.has_pv:
            return pv_posterior(m, dt, self.params, self.env.pv_gradient(X_new))
        cov = np.broadcast_to(dt * self.params.SigmaV, m.shape[:-1] + (2, 2))
        return m, cov

    def transition_logpdf(self, n, Zp, Z):
        """Log transition density of the full model, row-wise."""
        F, b, Q = self.trans[n]
        if not self.kind.has_pv:
            return mvn_logpdf(Z, Zp @ F.T + b, self.trans_chol(n))
        dt = self.dt(n)
        lx = mvn_logpdf(Z[:, :2], Zp[:, :2] + dt * Zp[:, 2:], _chol_or_fail(dt * self.params.SigmaX, n))
        mean, cov = self.velocity_law(n, Zp[:, 2:], Z[:, :2])
        return lx + batch_mvn_logpdf(Z[:, 2:], mean, _batch_chol(cov))


def _chol_or_fail(M, n):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise InferenceError(f"transition covariance at index {n} is not positive definite", index=n) from None


# --- proposal ----------------------------------------------------------------------

def propose_initial(ctx: FilterContext, rng):
    K, d = ctx.cfg.n_particles, ctx.d
    eps = rng.standard_normal((K, d))
    m1, P1 = initial_moments(ctx.kind, ctx.params)
    if ctx.cfg.proposal == "bootstrap":
        Z = m1 + eps @ psd_factor(P1, "Sigma1").T
        logw = ctx.obs_loglik(0, Z)
    else:
        q = ctx.cache.initial
        Lq = _chol_or_fail(q.cov, 0)
        Z = q.mean + eps @ Lq.T
        logw = mvn_logpdf(Z, m1, _chol_or_fail(P1, 0)) + ctx.obs_loglik(0, Z) - mvn_logpdf(Z, q.mean, Lq)
    log_twist = ctx.log_twist(0, Z)
    logw = logw + log_twist
    beliefs = None
    if ctx.kind.has_ice:
        beliefs = np.tile(ice.initial_belief(ctx.series.available[0]), (K, 1))
    return Z, beliefs, logw, log_twist


def propose(ctx: FilterContext, parents: ParticleCloud, n, rng):
    """Move resampled parents to index ``n`` and weight them.

    ``parents`` holds the resampled particles at ``n - 1`` (their
    ``log_twist`` entries must be aligned).  Returns
    ``(Z, beliefs, incremental log-weights, log_twist)``.
    """
    Zp = parents.Z
    K, d = Zp.shape
    eps = rng.standard_normal((K, d))
    if ctx.cfg.proposal == "bootstrap":
        Z = _sample_transition(ctx, n, Zp, eps)
        logw = np.zeros(K)
    else:
        A, a, cov, L = ctx.cache.lookahead[n]
        mean = Zp @ A.T + a
        if ctx.kind.has_pv and ctx.cfg.pv_in_proposal:
            mean, covs = _pv_tilt(mean, cov, ctx.env.pv_gradient(Zp[:, :2]), ctx.params.sigmaPV2)
            Ls = _batch_chol(covs)
            Z = mean + np.einsum("kij,kj->ki", Ls, eps)
            logq = batch_mvn_logpdf(Z, mean, Ls)
        else:
            Z = mean + eps @ L.T
            logq = mvn_logpdf(Z, mean, L)
        logw = ctx.transition_logpdf(n, Zp, Z) - logq
    logw = logw + ctx.obs_loglik(n, Z)
    beliefs = None
    if ctx.kind.has_ice:
        pred = ice.step_belief(parents.beliefs, ctx.detect(n, Z[:, :2]))
        ll_a, beliefs = ice.availability_loglik(pred, ctx.series.available[n], ctx.params.pMAR)
        logw = logw + ll_a
    log_twist = ctx.log_twist(n, Z)
    if ctx.cfg.twist:
        logw = logw + log_twist - parents.log_twist
    return Z, beliefs, logw, log_twist


def _sample_transition(ctx, n, Zp, eps):
    if not ctx.kind.has_velocity:
        return Zp + np.sqrt(ctx.dt(n)) * eps @ ctx.LX.T
    dt = ctx.dt(n)
    X = Zp[:, :2] + dt * Zp[:, 2:] + np.sqrt(dt) * eps[:, :2] @ ctx.LX.T
    mean, cov = ctx.velocity_law(n, Zp[:, 2:], X)
    if ctx.kind.has_pv:
        V = mean + np.einsum("kij,kj->ki", _batch_chol(cov), eps[:, 2:])
    else:
        V = mean + np.sqrt(dt) * eps[:, 2:] @ ctx.LV.T
    return np.hstack([X, V])


def _pv_tilt(mean, cov, grad, sigma2):
    """Condition ``N(mean, cov)`` on ``g'V = 0`` with noise ``sigma2`` per particle."""
    Ch = grad @ cov[2:, :]  # (K, 4): cov @ h with h = (0, 0, g)
    s = np.sum(grad * Ch[:, 2:], axis=1) + sigma2
    hm = np.sum(grad * mean[:, 2:], axis=1)
    new_mean = mean - Ch * (hm / s)[:, None]
    new_cov = cov[None] - Ch[:, :, None] * Ch[:, None, :] / s[:, None, None]
    return new_mean, new_cov


# --- filter ------------------------------------------------------------------------

def run_filter(series: ProfileSeries, params: ModelParams, kind, env=None, cfg: SmcConfig | None = None,
               rng=None) -> FilterOutput:
    """Run the particle filter over the whole record.

    Returns the weighted cloud at every index, the log-likelihood estimate,
    the ESS of the weights at every index (the quantity compared against
    the resampling threshold) and the resampling flags.
    """
    ctx = FilterContext(series, params, kind, env, cfg)
    cfg = ctx.cfg
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    K = cfg.n_particles
    n_rec = len(series)
    Z, beliefs, logw, log_twist = propose_initial(ctx, rng)
    logW, total = _checked_normalize(logw, 0)
    loglik = total - np.log(K)
    clouds = [ParticleCloud(Z, logW, np.arange(K), beliefs, log_twist, loglik)]
    ess_trace = np.empty(n_rec)
    ess_trace[0] = _ess_normalized(logW)
    resampled = np.zeros(n_rec, dtype=bool)
    for n in range(1, n_rec):
        prev = clouds[-1]
        if ess_trace[n - 1] < cfg.resample_threshold * K:
            idx = systematic_resample(np.exp(prev.log_weights), rng)
            base = np.full(K, -np.log(K))
            resampled[n] = True
        else:
            idx = np.arange(K)
            base = prev.log_weights
        parents = ParticleCloud(prev.Z[idx], base, idx, None if prev.beliefs is None else prev.beliefs[idx],
                                prev.log_twist[idx], prev.loglik)
        Z, beliefs, logw, log_twist = propose(ctx, parents, n, rng)
        logW, total = _checked_normalize(base + logw, n)
        loglik += total
        clouds.append(ParticleCloud(Z, logW, idx, beliefs, log_twist, loglik))
        ess_trace[n] = _ess_normalized(logW)
    return FilterOutput(clouds, float(loglik), ess_trace, resampled, ctx)


def _checked_normalize(logw, n):
    logw = np.where(np.isnan(logw), -np.inf, logw)
    total = logsumexp(logw)
    if not np.isfinite(total):
        raise InferenceError(f"all particle weights vanished at index {n}", index=n)
    return logw - total, float(total)


def _ess_normalized(logW):
    return float(np.exp(-logsumexp(2.0 * logW)))


# --- FFBS ---------------------------------------------------------------------------

def ffbs(out: FilterOutput, n_draws, seed=None, chunk=512) -> PosteriorDraws:
    """Backward simulation of whole trajectories from the filter output.

    Backward weights combine the untwisted filtering weight of each particle
    with the transition density to the already chosen successor and, for
    the ice kinds, the probability of the future availabilities given the
    particle's ice belief and the chosen future positions.  Ice-state paths
    are drawn afterwards along each assembled position path.
    """
    ctx = out.context
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    clouds = out.clouds
    n_rec = len(clouds)
    d = ctx.d
    paths = np.empty((n_draws, n_rec, d))
    last = clouds[-1]
    j = rng.choice(len(last.Z), size=n_draws, p=np.exp(last.log_weights - logsumexp(last.log_weights)))
    paths[:, -1] = last.Z[j]
    beta = np.ones((n_draws, ice.N_STATES)) if ctx.kind.has_ice else None
    p_mar = ctx.params.pMAR
    for n in range(n_rec - 2, -1, -1):
        cl = clouds[n]
        base = cl.log_weights - cl.log_twist
        succ = paths[:, n + 1]
        if beta is not None:
            e = ctx.detect(n + 1, succ[:, :2])
            T = ice.transition_matrix(e)
            nxt = ice.availability_probs(ctx.series.available[n + 1], p_mar) * beta
            beta = np.einsum("dij,dj->di", T, nxt)
        for lo in range(0, n_draws, chunk):
            hi = min(lo + chunk, n_draws)
            lw = base[None, :] + _pairwise_transition(ctx, n + 1, cl.Z, succ[lo:hi])
            if beta is not None:
                with np.errstate(divide="ignore"):
                    lw = lw + np.log(beta[lo:hi] @ cl.beliefs.T)
            paths[lo:hi, n] = cl.Z[_sample_rows(rng, lw)]
    X = paths[:, :, :2]
    V = paths[:, :, 2:] if d == 4 else None
    S = None
    if ctx.kind.has_ice:
        e = np.stack([ctx.detect(n, X[:, n]) for n in range(n_rec)], axis=1)
        S = ice.sample_s_path(e, ctx.series.available, p_mar, rng)
    return PosteriorDraws(ctx.series.float_id, ctx.series.times.copy(), X.copy(),
                          None if V is None else V.copy(), S)


def _sample_rows(rng, logw):
    m = logw.max(axis=1, keepdims=True)
    if np.any(~np.isfinite(m)):
        raise InferenceError("backward weights vanished for a trajectory draw")
    w = np.exp(logw - m)
    cdf = np.cumsum(w, axis=1)
    u = rng.random(len(w)) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), w.shape[1] - 1)


def _pairwise_transition(ctx: FilterContext, n, Zp, succ):
    """``log f(succ[d] | Zp[i])`` as a (draws, particles) matrix."""
    F, b, Q = ctx.trans[n]
    if not ctx.kind.has_pv:
        L = ctx.trans_chol(n)
        return _pairwise_gauss(succ - b, Zp @ F.T, L)
    dt = ctx.dt(n)
    Lx = _chol_or_fail(dt * ctx.params.SigmaX, n)
    lx = _pairwise_gauss(succ[:, :2], Zp[:, :2] + dt * Zp[:, 2:], Lx)
    m = velocity_mean(Zp[:, 2:], dt, ctx.params)  # (K, 2)
    g = ctx.env.pv_gradient(succ[:, :2])  # (D, 2)
    P = dt * ctx.params.SigmaV
    Pg = g @ P
    s = np.sum(g * Pg, axis=1) + ctx.params.sigmaPV2
    B = np.eye(2)[None] - Pg[:, :, None] * g[:, None, :] / s[:, None, None]  # B_d = I - P g g'/s
    C = P[None] - Pg[:, :, None] * Pg[:, None, :] / s[:, None, None]
    Lc = _batch_chol(C)
    W = np.linalg.inv(Lc)  # (D, 2, 2)
    u = np.einsum("dij,dj->di", W, succ[:, 2:])
    WB = np.einsum("dij,djk->dik", W, B)
    r = u[:, None, :] - np.einsum("dij,kj->dki", WB, m)
    logdet = np.log(np.diagonal(Lc, axis1=1, axis2=2)).sum(axis=1)
    lv = -0.5 * np.sum(r * r, axis=2) - logdet[:, None] - LOG_2PI
    return lx + lv


def _pairwise_gauss(targets, means, L):
    Linv = np.linalg.inv(L)
    u = targets @ Linv.T
    w = means @ Linv.T
    q = np.sum(u * u, axis=1)[:, None] + np.sum(w * w, axis=1)[None, :] - 2.0 * u @ w.T
    q = np.maximum(q, 0.0)
    k = L.shape[0]
    return -0.5 * q - np.log(np.diag(L)).sum() - 0.5 * k * LOG_2PI


# --- studies ------------------------------------------------------------------------

def loglik_variance_study(series, params, kind, env=None, cfg: SmcConfig | None = None, n_replicates=50):
    """Spread of the likelihood estimate over independent seeds.

    Returns a dict with ``mean``, ``sd``, ``logliks`` and ``final_ess``.
    """
    if n_replicates < 2:
        raise ValueError("need at least two replicates")
    cfg = cfg or SmcConfig()
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_replicates)
    lls = np.empty(n_replicates)
    final = np.empty(n_replicates)
    for r, ss in enumerate(seeds):
        res = run_filter(series, params, kind, env, cfg, rng=np.random.default_rng(ss))
        lls[r] = res.loglik
        final[r] = res.ess[-1]
    return {"mean": float(lls.mean()), "sd": float(lls.std(ddof=1)), "logliks": lls, "final_ess": final}
