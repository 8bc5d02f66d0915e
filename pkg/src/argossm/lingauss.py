"""Exact inference for the linear-Gaussian RW and AR submodels.

Indices are 0-based: the record has entries ``0 .. N-1``.  The backward pass
is an information filter: ``P(Y_{n:N} | Z_n = z)`` is kept as
``exp(logc + info @ z - z @ prec @ z / 2)``, which stays well defined when
``prec`` is rank deficient (future data only constrain position).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InferenceError
from .model import ModelKind, ModelParams, ProfileSeries, initial_moments, linear_system, observation_matrix

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class InfoState:
    """Unnormalised Gaussian likelihood of the state in information form."""

    prec: np.ndarray
    info: np.ndarray
    logc: float

    @classmethod
    def empty(cls, d):
        return cls(np.zeros((d, d)), np.zeros(d), 0.0)

    def __call__(self, z):
        """Log-likelihood at ``z``; broadcasts over leading axes of ``z``."""
        z = np.asarray(z, dtype=float)
        return self.logc + z @ self.info - 0.5 * np.einsum("...i,ij,...j->...", z, self.prec, z)


@dataclass(frozen=True)
class FilterResult:
    predicted: list
    filtered: list
    loglik: float
    increments: np.ndarray


def _sym(M):
    return 0.5 * (M + M.T)


def _dt(series, n):
    return series.times[n] - series.times[n - 1]


def kalman_filter_full(series: ProfileSeries, params: ModelParams, kind) -> FilterResult:
    kind = ModelKind.parse(kind)
    if not kind.is_linear:
        raise ValueError(f"{kind.value} is not linear-Gaussian")
    H = observation_matrix(kind)
    R = params.SigmaY
    d = kind.state_dim
    m, P = initial_moments(kind, params)
    predicted, filtered = [], []
    inc = np.zeros(len(series))
    eye = np.eye(d)
    for n in range(len(series)):
        if n > 0:
            F, b, Q = linear_system(kind, params, _dt(series, n))
            m = F @ m + b
            P = _sym(F @ P @ F.T + Q)
        predicted.append(GaussianState(m, P))
        if series.available[n]:
            S = _sym(H @ P @ H.T + R)
            try:
                cS = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise InferenceError(f"singular innovation covariance at index {n}", index=n) from None
            r = series.gps[n] - H @ m
            w = np.linalg.solve(cS, r)
            inc[n] = -0.5 * (w @ w) - np.log(np.diag(cS)).sum() - 0.5 * len(r) * LOG_2PI
            K = np.linalg.solve(S, H @ P).T
            m = m + K @ r
            IKH = eye - K @ H
            P = _sym(IKH @ P @ IKH.T + K @ R @ K.T)
        filtered.append(GaussianState(m, P))
    return FilterResult(predicted, filtered, float(inc.sum()), inc)


def kalman_filter(series: ProfileSeries, params: ModelParams, kind):
    """Filtered marginals and the exact log-likelihood of the observed fixes."""
    res = kalman_filter_full(series, params, kind)
    return res.filtered, res.loglik


def kalman_smoother(series: ProfileSeries, params: ModelParams, kind):
    """Rauch-Tung-Striebel smoothed marginals."""
    kind = ModelKind.parse(kind)
    res = kalman_filter_full(series, params, kind)
    out = [res.filtered[-1]]
    for n in range(len(series) - 2, -1, -1):
        F, _, _ = linear_system(kind, params, _dt(series, n + 1))
        f, p = res.filtered[n], res.predicted[n + 1]
        G = np.linalg.solve(p.cov, F @ f.cov).T
        nxt = out[0]
        mean = f.mean + G @ (nxt.mean - p.mean)
        cov = _sym(f.cov + G @ (nxt.cov - p.cov) @ G.T)
        out.insert(0, GaussianState(mean, cov))
    return out


def absorb_measurement(state: InfoState, H, R, y) -> InfoState:
    Ri = np.linalg.inv(R)
    _, logdet = np.linalg.slogdet(2.0 * np.pi * R)
    HtRi = H.T @ Ri
    return InfoState(
        state.prec + HtRi @ H,
        state.info + HtRi @ y,
        state.logc - 0.5 * y @ Ri @ y - 0.5 * logdet,
    )


def marginalise(state: InfoState, mean, cov):
    """Integrate the likelihood against ``N(mean, cov)``.

    Returns ``(logZ, posterior)`` where ``logZ = log E[L(Z)]`` and
    ``posterior`` is the Gaussian proportional to ``N(mean, cov) * L``.
    """
    Lam, eta = state.prec, state.info
    d = len(mean)
    M = np.eye(d) + cov @ Lam
    K = np.linalg.inv(M)
    _, logdet = np.linalg.slogdet(M)
    Lt = _sym(Lam @ K)
    et = K.T @ eta
    logZ = state.logc + 0.5 * eta @ K @ cov @ eta - 0.5 * logdet + et @ mean - 0.5 * mean @ Lt @ mean
    post = GaussianState(K @ (mean + cov @ eta), _sym(K @ cov))
    return float(logZ), post


def push_back(state: InfoState, F, b, Q) -> InfoState:
    """``z -> log ∫ N(z'; F z + b, Q) L(z') dz'`` in information form."""
    Lam, eta = state.prec, state.info
    d = len(eta)
    M = np.eye(d) + Q @ Lam
    K = np.linalg.inv(M)
    _, logdet = np.linalg.slogdet(M)
    Lt = _sym(Lam @ K)
    et = K.T @ eta
    ct = state.logc + 0.5 * eta @ K @ Q @ eta - 0.5 * logdet
    return InfoState(
        _sym(F.T @ Lt @ F),
        F.T @ (et - Lt @ b),
        float(ct + et @ b - 0.5 * b @ Lt @ b),
    )


def _backward(series, params, kind):
    H = observation_matrix(kind)
    d = kind.state_dim
    n_rec = len(series)
    upd = [None] * n_rec
    prd = [None] * n_rec
    nxt = InfoState.empty(d)
    for n in range(n_rec - 1, -1, -1):
        prd[n] = nxt
        cur = nxt
        if series.available[n]:
            cur = absorb_measurement(cur, H, params.SigmaY, series.gps[n])
        upd[n] = cur
        if n > 0:
            F, b, Q = linear_system(kind, params, _dt(series, n))
            nxt = push_back(cur, F, b, Q)
    return upd, prd


def backward_information(series: ProfileSeries, params: ModelParams, kind):
    """Per-index ``P(Y_{n:N} | Z_n)`` in information form."""
    kind = ModelKind.parse(kind)
    return _backward(series, params, kind)[0]


@dataclass(frozen=True)
class SmootherCache:
    """Everything the particle filter needs from the linear skeleton.

    ``upd[n]`` is ``P(Y_{n:N} | Z_n)`` and ``prd[n]`` is
    ``P(Y_{n+1:N} | Z_n)``.  ``lookahead[n] = (A, a, cov, chol)`` gives the
    conditional ``Z_n | Z_{n-1} = z, Y`` as ``N(A z + a, cov)``.
    """

    kind: ModelKind
    params: ModelParams
    series: ProfileSeries
    filter: FilterResult
    upd: list
    prd: list
    transitions: list
    lookahead: list
    initial: GaussianState
    initial_logz: float

    def __len__(self):
        return len(self.series)


def build_cache(series: ProfileSeries, params: ModelParams, kind) -> SmootherCache:
    kind = ModelKind.parse(kind).skeleton
    filt = kalman_filter_full(series, params, kind)
    upd, prd = _backward(series, params, kind)
    d = kind.state_dim
    transitions = [None]
    lookahead = [None]
    for n in range(1, len(series)):
        F, b, Q = linear_system(kind, params, _dt(series, n))
        transitions.append((F, b, Q))
        K = np.linalg.inv(np.eye(d) + Q @ upd[n].prec)
        cov = _sym(K @ Q)
        lookahead.append((K @ F, K @ (b + Q @ upd[n].info), cov, _chol(cov)))
    m1, P1 = initial_moments(kind, params)
    logz, init = marginalise(upd[0], m1, P1)
    return SmootherCache(kind, params, series, filt, upd, prd, transitions, lookahead, init, logz)


def _chol(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(cov)
        return U * np.sqrt(np.clip(w, 0.0, None))


def _state_vector(z, d):
    if hasattr(z, "x"):
        parts = [z.x.as_array()]
        if d == 4:
            parts.append(z.v.as_array())
        return np.concatenate(parts)
    return np.asarray(z, dtype=float)[..., :d]


def _check_index(cache, n):
    if not 1 <= n < len(cache):
        raise IndexError(f"index {n} outside 1..{len(cache) - 1}")


def conditional_lookahead(cache: SmootherCache, n, z_prev) -> GaussianState:
    """``P(Z_n | Z_{n-1} = z_prev, all Y)`` for the linear skeleton."""
    _check_index(cache, n)
    A, a, cov, _ = cache.lookahead[n]
    z = _state_vector(z_prev, cache.kind.state_dim)
    return GaussianState(A @ z + a, cov)


def predictive_loglik(cache: SmootherCache, n, z_prev=None) -> float:
    """``log P(Y_{n:N} | Z_{n-1} = z_prev)``; ``n = 0`` gives the evidence."""
    if n == 0:
        return cache.initial_logz
    _check_index(cache, n)
    return float(cache.prd[n - 1](_state_vector(z_prev, cache.kind.state_dim)))
