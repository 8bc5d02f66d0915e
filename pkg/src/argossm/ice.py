"""Ice-avoidance Markov chain.

The onboard algorithm keeps a counter of consecutive ice-free detections,
``S`` in {0, 1, 2, 3}.  A detection resets it to 0, otherwise it climbs and
saturates at 3; only at 3 may the float surface.  Beliefs over ``S`` are
4-vectors and every function here broadcasts over leading axes so that a
whole particle cloud can be updated at once.
"""

from __future__ import annotations

import numpy as np

N_STATES = 4
SURFACE = 3

DETECT_FORMULAS = ("paper", "complement")


def detect_prob(E, p_tpr, p_tnr, formula="paper"):
    """Probability that the float detects ice given concentration ``E``.

    ``formula="paper"`` evaluates ``p_tpr*E + (1 - p_tnr)*E``;
    ``"complement"`` evaluates ``p_tpr*E + (1 - p_tnr)*(1 - E)``.
    The result is clamped to [0, 1].
    """
    E = np.asarray(E, dtype=float)
    if formula == "paper":
        p = p_tpr * E + (1.0 - p_tnr) * E
    elif formula == "complement":
        p = p_tpr * E + (1.0 - p_tnr) * (1.0 - E)
    else:
        raise ValueError(f"unknown detect formula {formula!r}")
    return np.clip(p, 0.0, 1.0)


def transition_matrix(e_tilde):
    """Row-stochastic matrix ``T[i, j] = P(S_n = j | S_{n-1} = i)``.

    Broadcasts: ``e_tilde`` of shape (...) gives (..., 4, 4).
    """
    e = np.asarray(e_tilde, dtype=float)
    T = np.zeros(e.shape + (N_STATES, N_STATES))
    T[..., :, 0] = e[..., None]
    T[..., 0, 1] = 1.0 - e
    T[..., 1, 2] = 1.0 - e
    T[..., 2, 3] = 1.0 - e
    T[..., 3, 3] = 1.0 - e
    return T


def step_belief(belief, e_tilde):
    """Propagate a belief over ``S`` through one detection step."""
    b = np.asarray(belief, dtype=float)
    e = np.asarray(e_tilde, dtype=float)
    out = np.empty(np.broadcast_shapes(b.shape, e.shape + (N_STATES,)))
    keep = 1.0 - e
    out[..., 0] = e * b.sum(axis=-1)
    out[..., 1] = keep * b[..., 0]
    out[..., 2] = keep * b[..., 1]
    out[..., 3] = keep * (b[..., 2] + b[..., 3])
    return out


def availability_probs(a, p_mar):
    """``P(A = a | S = k)`` for k = 0..3."""
    surf = 1.0 - p_mar
    if a:
        return np.array([0.0, 0.0, 0.0, surf])
    return np.array([1.0, 1.0, 1.0, 1.0 - surf])


def availability_loglik(belief, a, p_mar):
    """Condition a belief on the availability indicator.

    Returns ``(loglik, posterior)``.  Where the observation is impossible under
    the belief the loglik is ``-inf`` and the posterior is left as the prior
    belief so that downstream arithmetic stays finite; callers give such
    particles zero weight.
    """
    b = np.asarray(belief, dtype=float)
    joint = b * availability_probs(bool(a), p_mar)
    total = joint.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        loglik = np.log(total)
        post = joint / total[..., None]
    dead = ~(total > 0)
    if np.any(dead):
        post = np.where(dead[..., None], b, post)
    return loglik, post


def initial_belief(first_available):
    """Belief over ``S_1``: certain surfacing when the first record has a fix."""
    if first_available:
        return np.array([0.0, 0.0, 0.0, 1.0])
    return np.full(N_STATES, 1.0 / N_STATES)


def forward_beliefs(e_tilde, available, p_mar, init=None):
    """Filter beliefs along fixed position paths.

    ``e_tilde[..., n]`` is the detection probability at index ``n`` (entry 0
    is unused); leading axes index independent paths.  Returns
    ``(beliefs, loglik)`` with ``beliefs[..., n, :]`` the posterior over
    ``S_n`` given ``A_{1:n}``.  The availability of index 0 is not scored, it
    only selects the initial belief.
    """
    e_tilde = np.asarray(e_tilde, dtype=float)
    available = np.asarray(available, dtype=bool)
    n = available.shape[-1]
    lead = e_tilde.shape[:-1]
    beliefs = np.empty(lead + (n, N_STATES))
    beliefs[..., 0, :] = initial_belief(available[0]) if init is None else np.asarray(init, dtype=float)
    total = np.zeros(lead)
    for i in range(1, n):
        pred = step_belief(beliefs[..., i - 1, :], e_tilde[..., i])
        ll, beliefs[..., i, :] = availability_loglik(pred, available[i], p_mar)
        total = total + ll
    return beliefs, (float(total) if total.ndim == 0 else total)


def sample_s_path(e_tilde, available, p_mar, rng, n_draws=1, init=None):
    """Draw ``S_{1:N}`` from its posterior given positions and availability.

    Forward-filter, backward-sample.  With a 1-D ``e_tilde`` returns
    ``n_draws`` paths for that position path; with a 2-D ``e_tilde`` (one
    row per position path) returns one path per row.  Output is an int array
    of shape (paths, N).
    """
    e_tilde = np.asarray(e_tilde, dtype=float)
    if e_tilde.ndim == 1:
        e_tilde = np.broadcast_to(e_tilde, (n_draws, len(e_tilde)))
    beliefs, loglik = forward_beliefs(e_tilde, available, p_mar, init)
    if not np.all(np.isfinite(loglik)):
        raise ValueError("availability sequence has zero probability along this path")
    n_paths, n = e_tilde.shape
    rows = np.arange(n_paths)
    paths = np.empty((n_paths, n), dtype=int)
    paths[:, -1] = _categorical(rng, beliefs[:, -1])
    for i in range(n - 2, -1, -1):
        T = transition_matrix(e_tilde[:, i + 1])  # (paths, 4, 4)
        w = beliefs[:, i] * T[rows, :, paths[:, i + 1]]
        paths[:, i] = _categorical(rng, w)
    return paths


def backward_messages(e_tilde, available, p_mar):
    """``beta[..., n, s] = P(A_{n+1:N} | S_n = s, positions)`` along fixed paths."""
    e_tilde = np.asarray(e_tilde, dtype=float)
    available = np.asarray(available, dtype=bool)
    n = available.shape[-1]
    beta = np.ones(e_tilde.shape[:-1] + (n, N_STATES))
    for i in range(n - 2, -1, -1):
        T = transition_matrix(e_tilde[..., i + 1])
        nxt = availability_probs(available[i + 1], p_mar) * beta[..., i + 1, :]
        beta[..., i, :] = np.einsum("...ij,...j->...i", T, nxt)
    return beta


def _categorical(rng, weights):
    w = np.asarray(weights, dtype=float)
    cdf = np.cumsum(w, axis=-1)
    cdf /= cdf[..., -1:]
    u = rng.random(w.shape[:-1])
    idx = (u[..., None] > cdf).sum(axis=-1)
    return np.minimum(idx, w.shape[-1] - 1)
