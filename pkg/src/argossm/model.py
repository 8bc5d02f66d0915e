"""Generative model of drifting-float trajectories.

Latent dynamics run directly in (lon, lat) degrees with time in days.  Four
model variants share one parameter set:

* ``RW``       position random walk
* ``AR``       position driven by a mean-reverting (AR) velocity
* ``AR_ICE``   AR plus the ice-avoidance chain governing GPS availability
* ``ARGOSSM``  AR_ICE plus the potential-vorticity velocity constraint

Transitions take explicit standard-normal noise so that they are pure
functions; :func:`simulate` draws that noise from a seeded generator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ParameterError
from .geo import Position, Velocity
from .ice import SURFACE


class ModelKind(enum.Enum):
    RW = "RW"
    AR = "AR"
    AR_ICE = "AR_ICE"
    ARGOSSM = "ARGOSSM"

    @classmethod
    def parse(cls, text) -> "ModelKind":
        if isinstance(text, cls):
            return text
        key = str(text).strip().upper().replace("+", "_").replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ConfigurationError(f"unknown model kind {text!r}") from None

    @property
    def has_velocity(self) -> bool:
        return self is not ModelKind.RW

    @property
    def has_ice(self) -> bool:
        return self in (ModelKind.AR_ICE, ModelKind.ARGOSSM)

    @property
    def has_pv(self) -> bool:
        return self is ModelKind.ARGOSSM

    @property
    def is_linear(self) -> bool:
        return self in (ModelKind.RW, ModelKind.AR)

    @property
    def skeleton(self) -> "ModelKind":
        """The linear-Gaussian submodel used for look-ahead and twisting."""
        return ModelKind.RW if self is ModelKind.RW else ModelKind.AR

    @property
    def state_dim(self) -> int:
        return 4 if self.has_velocity else 2


def psd_factor(M, name="matrix"):
    """Lower-triangular ``L`` with ``L @ L.T == M`` for symmetric PSD ``M``.

    Falls back to a symmetric square root when ``M`` is singular.
    """
    M = np.asarray(M, dtype=float)
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-300):
        raise ParameterError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    w, U = np.linalg.eigh(M)
    if w.min() < -1e-12 * max(1.0, abs(w).max()):
        raise ParameterError(f"{name} is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return U * np.sqrt(np.clip(w, 0.0, None))


def _check_cov(M, shape, name):
    M = np.array(M, dtype=float)
    if M.shape != shape:
        raise ParameterError(f"{name} must have shape {shape}, got {M.shape}")
    psd_factor(M, name)
    return M


@dataclass(frozen=True)
class ModelParams:
    """All model parameters.

    Covariances are in degrees^2 (per day for the transition noises, which
    scale linearly with the elapsed time).  ``mu1``/``Sigma1`` describe the
    initial (lon, lat, v_lon, v_lat) state.
    """

    SigmaX: np.ndarray
    SigmaV: np.ndarray
    SigmaY: np.ndarray
    v0: np.ndarray = field(default_factory=lambda: np.zeros(2))
    alpha: float = 0.9
    sigmaPV2: float = 1.0
    pTPR: float = 0.9
    pTNR: float = 0.9
    pMAR: float = 0.1
    mu1: np.ndarray = field(default_factory=lambda: np.zeros(4))
    Sigma1: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 0.01, 0.01]))

    def __post_init__(self):
        for name in ("SigmaX", "SigmaV", "SigmaY"):
            object.__setattr__(self, name, _check_cov(getattr(self, name), (2, 2), name))
        object.__setattr__(self, "Sigma1", _check_cov(self.Sigma1, (4, 4), "Sigma1"))
        mu1 = np.array(self.mu1, dtype=float)
        v0 = np.array(self.v0, dtype=float)
        if mu1.shape != (4,) or v0.shape != (2,):
            raise ParameterError("mu1 must have 4 entries and v0 must have 2")
        if not (np.all(np.isfinite(mu1)) and np.all(np.isfinite(v0))):
            raise ParameterError("mu1 and v0 must be finite")
        object.__setattr__(self, "mu1", mu1)
        object.__setattr__(self, "v0", v0)
        for name in ("alpha", "pTPR", "pTNR", "pMAR"):
            val = float(getattr(self, name))
            if not 0.0 <= val <= 1.0:
                raise ParameterError(f"{name}={val} outside [0, 1]")
            object.__setattr__(self, name, val)
        if not float(self.sigmaPV2) > 0:
            raise ParameterError(f"sigmaPV2 must be positive, got {self.sigmaPV2}")
        object.__setattr__(self, "sigmaPV2", float(self.sigmaPV2))

    @classmethod
    def isotropic(cls, sigma_x2, sigma_v2, sigma_y2, **kw) -> "ModelParams":
        eye = np.eye(2)
        return cls(SigmaX=sigma_x2 * eye, SigmaV=sigma_v2 * eye, SigmaY=sigma_y2 * eye, **kw)

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def anchored(self, series: "ProfileSeries", velocity_var=0.01) -> "ModelParams":
        """Initial state centred on the first available fix.

        ``Sigma1 = blockdiag(SigmaY, velocity_var * I)`` with zero mean velocity.
        """
        first = series.first_fix()
        mu1 = np.array([first[0], first[1], 0.0, 0.0])
        S1 = np.zeros((4, 4))
        S1[:2, :2] = self.SigmaY
        S1[2:, 2:] = velocity_var * np.eye(2)
        return replace(self, mu1=mu1, Sigma1=S1)


@dataclass(frozen=True)
class ProfileSeries:
    """One float's profile record.

    ``gps`` is an (N, 2) array of (lon, lat) fixes holding NaN where no fix
    was received; ``available[n]`` is the indicator A_n.
    """

    float_id: str
    times: np.ndarray
    gps: np.ndarray
    available: np.ndarray
    temp: np.ndarray | None = None
    psal: np.ndarray | None = None
    depth_label: str = ""

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        gps = np.array(self.gps, dtype=float).reshape(-1, 2)
        avail = np.array(self.available, dtype=bool)
        n = len(t)
        if n < 1:
            raise ValueError("a profile series needs at least one record")
        if gps.shape != (n, 2) or avail.shape != (n,):
            raise ValueError("times, gps and available must have matching lengths")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        has_fix = np.all(np.isfinite(gps), axis=1)
        if np.any(has_fix != avail):
            bad = int(np.flatnonzero(has_fix != avail)[0])
            raise ValueError(f"index {bad}: gps must be present exactly when available")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "gps", gps)
        object.__setattr__(self, "available", avail)
        for name in ("temp", "psal"):
            v = getattr(self, name)
            v = np.full(n, np.nan) if v is None else np.array(v, dtype=float)
            if v.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            object.__setattr__(self, name, v)

    def __len__(self):
        return len(self.times)

    def first_fix(self) -> np.ndarray:
        idx = np.flatnonzero(self.available)
        if len(idx) == 0:
            raise ValueError(f"float {self.float_id} has no GPS fix")
        return self.gps[idx[0]]

    def position(self, n) -> Position | None:
        return Position(*self.gps[n]) if self.available[n] else None

    def masked(self, index) -> "ProfileSeries":
        """Copy with the fix at ``index`` removed (availability set to 0)."""
        gps = self.gps.copy()
        avail = self.available.copy()
        gps[index] = np.nan
        avail[index] = False
        return replace(self, gps=gps, available=avail)

    def truncated(self, stop) -> "ProfileSeries":
        return replace(self, times=self.times[:stop], gps=self.gps[:stop], available=self.available[:stop],
                       temp=self.temp[:stop], psal=self.psal[:stop])


@dataclass(frozen=True)
class LatentState:
    x: Position
    v: Velocity
    s: int = SURFACE

    def __post_init__(self):
        if self.s not in (0, 1, 2, 3):
            raise ValueError(f"ice state {self.s} not in {{0,1,2,3}}")


@dataclass(frozen=True)
class LatentTrajectory:
    times: np.ndarray
    X: np.ndarray
    V: np.ndarray | None = None
    S: np.ndarray | None = None


def alpha_pow(alpha, dt):
    """``alpha ** dt`` with alpha = 0 treated as the limit 0 for dt > 0."""
    if alpha <= 0.0:
        return 0.0
    return float(np.exp(dt * np.log(alpha)))


def _check_dt(dt):
    if not dt > 0:
        raise ParameterError(f"time step must be positive, got {dt}")


def transition_rw(x_prev, dt, params: ModelParams, noise) -> Position:
    _check_dt(dt)
    L = psd_factor(dt * params.SigmaX, "SigmaX")
    x = _xy(x_prev) + L @ np.asarray(noise, dtype=float)
    return Position(*x)


def velocity_mean(v_prev, dt, params: ModelParams):
    a = alpha_pow(params.alpha, dt)
    return (1.0 - a) * params.v0 + a * np.asarray(v_prev, dtype=float)


def transition_ar(state_prev, dt, params: ModelParams, noise):
    """One AR step; ``noise`` is 4 standard normals (2 position, 2 velocity)."""
    _check_dt(dt)
    if not 0.0 <= params.alpha <= 1.0:
        raise ParameterError(f"alpha={params.alpha} outside [0, 1]")
    x_prev, v_prev = state_prev
    x_prev, v_prev = _xy(x_prev), _xy(v_prev)
    noise = np.asarray(noise, dtype=float)
    x = x_prev + dt * v_prev + psd_factor(dt * params.SigmaX, "SigmaX") @ noise[:2]
    v = velocity_mean(v_prev, dt, params) + psd_factor(dt * params.SigmaV, "SigmaV") @ noise[2:]
    return Position(*x), Velocity(*v)


def pv_posterior(mean, dt, params: ModelParams, grad_pv):
    """Conjugate update of the velocity prior ``N(mean, dt*SigmaV)``.

    The PV pseudo-observation is ``0 = g'V + e`` with ``e ~ N(0, sigmaPV2)``.
    Broadcasts over leading axes of ``mean`` and ``grad_pv``.  Returns
    ``(post_mean, post_cov)``; the mean equals ``B @ mean`` with
    ``B = (I + dt*SigmaV g g' / sigmaPV2)^{-1}``.
    """
    P = dt * params.SigmaV
    m = np.asarray(mean, dtype=float)
    g = np.asarray(grad_pv, dtype=float)
    Pg = g @ P
    s = np.sum(g * Pg, axis=-1) + params.sigmaPV2
    gm = np.sum(g * m, axis=-1)
    post_mean = m - Pg * (gm / s)[..., None]
    post_cov = P - Pg[..., :, None] * Pg[..., None, :] / s[..., None, None]
    return post_mean, post_cov


def pv_gain(dt, params: ModelParams, grad_pv):
    """The shrinkage matrix ``B`` applied to the velocity mean."""
    g = np.asarray(grad_pv, dtype=float)
    return np.linalg.inv(np.eye(2) + (dt * params.SigmaV) @ np.outer(g, g) / params.sigmaPV2)


def pv_constrained_velocity_update(state, dt, params: ModelParams, grad_pv, noise) -> Velocity:
    _check_dt(dt)
    _, v_prev = state
    mean, cov = pv_posterior(velocity_mean(_xy(v_prev), dt, params), dt, params, grad_pv)
    v = mean + psd_factor(0.5 * (cov + cov.T), "PV posterior covariance") @ np.asarray(noise, dtype=float)
    return Velocity(*v)


def measure_gps(x, params: ModelParams, noise) -> Position:
    y = _xy(x) + psd_factor(params.SigmaY, "SigmaY") @ np.asarray(noise, dtype=float)
    return Position(*y)


def _xy(p):
    if isinstance(p, Position):
        return p.as_array()
    if isinstance(p, Velocity):
        return p.as_array()
    return np.asarray(p, dtype=float)


# --- linear-Gaussian skeleton ---------------------------------------------------

def linear_system(kind: ModelKind, params: ModelParams, dt):
    """``(F, b, Q)`` with ``Z_n = F Z_{n-1} + b + N(0, Q)`` for the linear skeleton."""
    if kind.skeleton is ModelKind.RW:
        return np.eye(2), np.zeros(2), dt * params.SigmaX
    a = alpha_pow(params.alpha, dt)
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    F[2, 2] = F[3, 3] = a
    b = np.zeros(4)
    b[2:] = (1.0 - a) * params.v0
    Q = np.zeros((4, 4))
    Q[:2, :2] = dt * params.SigmaX
    Q[2:, 2:] = dt * params.SigmaV
    return F, b, Q


def observation_matrix(kind: ModelKind):
    return np.eye(kind.state_dim)[:2]


def initial_moments(kind: ModelKind, params: ModelParams):
    d = kind.state_dim
    return params.mu1[:d].copy(), params.Sigma1[:d, :d].copy()


# --- forward simulation -----------------------------------------------------------

def simulate(kind, params: ModelParams, times, env=None, seed=None, float_id="sim", measure_fn=None):
    """Draw a latent trajectory and its observation record.

    For the ice kinds the first record is a deployment fix (``S_1 = 3``,
    ``A_1 = 1``); later availabilities follow the ice chain.  RW/AR kinds are
    always observed.  ``measure_fn(xy, t)`` may supply (temp, psal).
    """
    kind = ModelKind.parse(kind)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if kind.has_ice and (env is None or env.ice is None):
        raise ConfigurationError(f"{kind.value} simulation needs an ice field")
    if kind.has_pv and (env is None or env.pv is None):
        raise ConfigurationError(f"{kind.value} simulation needs a PV gradient grid")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(times)
    d = kind.state_dim
    Z = np.empty((n, d))
    m1, P1 = initial_moments(kind, params)
    Z[0] = m1 + psd_factor(P1, "Sigma1") @ rng.standard_normal(d)
    S = np.full(n, SURFACE, dtype=int)
    A = np.ones(n, dtype=bool)
    LX = psd_factor(params.SigmaX, "SigmaX")
    LV = psd_factor(params.SigmaV, "SigmaV")
    for i in range(1, n):
        dt = times[i] - times[i - 1]
        eps = rng.standard_normal(d)
        x_prev = Z[i - 1, :2]
        if not kind.has_velocity:
            Z[i] = x_prev + np.sqrt(dt) * LX @ eps
            continue
        v_prev = Z[i - 1, 2:]
        x = x_prev + dt * v_prev + np.sqrt(dt) * LX @ eps[:2]
        m = velocity_mean(v_prev, dt, params)
        if kind.has_pv:
            mean, cov = pv_posterior(m, dt, params, env.pv_gradient(x))
            v = mean + psd_factor(0.5 * (cov + cov.T)) @ eps[2:]
        else:
            v = m + np.sqrt(dt) * LV @ eps[2:]
        Z[i, :2], Z[i, 2:] = x, v
        if kind.has_ice:
            e = float(env.detect_prob(x, times[i], params))
            S[i] = 0 if rng.random() < e else min(S[i - 1] + 1, SURFACE)
            A[i] = S[i] == SURFACE and rng.random() >= params.pMAR
    LY = psd_factor(params.SigmaY, "SigmaY")
    gps = np.full((n, 2), np.nan)
    for i in np.flatnonzero(A):
        gps[i] = Z[i, :2] + LY @ rng.standard_normal(2)
    temp = psal = None
    if measure_fn is not None:
        tp = np.array([measure_fn(Z[i, :2], times[i]) for i in range(n)], dtype=float)
        temp, psal = tp[:, 0], tp[:, 1]
    traj = LatentTrajectory(times, Z[:, :2].copy(), Z[:, 2:].copy() if kind.has_velocity else None,
                            S if kind.has_ice else None)
    series = ProfileSeries(float_id, times, gps, A, temp, psal)
    return traj, series
