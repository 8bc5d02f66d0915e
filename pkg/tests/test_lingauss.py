import numpy as np
import pytest
from dense_oracle import dense_conditional, dense_filtered, dense_loglik, dense_predictive, dense_smoothed

from argossm import lingauss as lg
from argossm.errors import InferenceError
from argossm.model import ModelKind, ModelParams, ProfileSeries, simulate

REL = 1e-8


def rel_close(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b)) <= REL * max(np.max(np.abs(b)), 1e-300)


def make_case(kind, pattern, seed=0):
    rng = np.random.default_rng(seed)
    p = ModelParams.isotropic(0.02, 0.003, 0.01, alpha=0.7, v0=[0.05, -0.02], mu1=[1, 2, 0.1, 0],
                              Sigma1=np.diag([0.01, 0.01, 0.01, 0.01]))
    times = np.cumsum(rng.uniform(1, 10, len(pattern)))
    _, s = simulate(kind, p, times, seed=seed)
    for i, a in enumerate(pattern):
        if not a:
            s = s.masked(i)
    return s, p


PATTERNS = [
    (1, 1, 1, 1, 1, 1),
    (1, 0, 0, 1, 0, 1),
    (0, 1, 1, 0, 0, 0),
    (1, 0, 0, 0, 0, 0),
    (1, 1, 0),
]
KINDS = [ModelKind.RW, ModelKind.AR]


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("pattern", PATTERNS)
def test_filter_and_loglik_match_dense(kind, pattern):
    s, p = make_case(kind, pattern)
    filt, ll = lg.kalman_filter(s, p, kind)
    assert rel_close(ll, dense_loglik(s, p, kind))
    for st, (m, C) in zip(filt, dense_filtered(s, p, kind)):
        assert rel_close(st.mean, m) and rel_close(st.cov, C)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("pattern", PATTERNS)
def test_smoother_matches_dense(kind, pattern):
    s, p = make_case(kind, pattern, seed=1)
    sm = lg.kalman_smoother(s, p, kind)
    mz, C = dense_smoothed(s, p, kind)
    d = kind.state_dim
    for i, st in enumerate(sm):
        sl = slice(i * d, (i + 1) * d)
        assert rel_close(st.mean, mz[sl])
        assert rel_close(st.cov, C[sl, sl])


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("pattern", PATTERNS)
def test_lookahead_and_predictive_match_dense(kind, pattern):
    s, p = make_case(kind, pattern, seed=2)
    cache = lg.build_cache(s, p, kind)
    z = np.array([1.1, 2.0, 0.05, 0.01])[: kind.state_dim]
    for n in range(1, len(s)):
        g = lg.conditional_lookahead(cache, n, z)
        m, C = dense_conditional(s, p, kind, n, z)
        assert rel_close(g.mean, m) and rel_close(g.cov, C)
        assert rel_close(lg.predictive_loglik(cache, n, z), dense_predictive(s, p, kind, n, z))
    assert rel_close(lg.predictive_loglik(cache, 0), dense_loglik(s, p, kind))


def test_lookahead_index_bounds():
    s, p = make_case(ModelKind.AR, PATTERNS[0])
    cache = lg.build_cache(s, p, ModelKind.AR)
    with pytest.raises(IndexError):
        lg.conditional_lookahead(cache, 0, np.zeros(4))
    with pytest.raises(IndexError):
        lg.conditional_lookahead(cache, len(s), np.zeros(4))


def test_nonlinear_kind_rejected():
    s, p = make_case(ModelKind.AR, PATTERNS[0])
    with pytest.raises(ValueError):
        lg.kalman_filter(s, p, ModelKind.ARGOSSM)


def test_cache_uses_skeleton_for_full_model():
    s, p = make_case(ModelKind.AR, PATTERNS[1])
    a = lg.build_cache(s, p, ModelKind.ARGOSSM)
    b = lg.build_cache(s, p, ModelKind.AR)
    assert a.kind is ModelKind.AR
    assert a.initial_logz == b.initial_logz


def test_no_observations_gives_zero_loglik():
    p = ModelParams.isotropic(0.01, 0.001, 0.01)
    s = ProfileSeries("x", [0.0, 1.0, 2.0], np.full((3, 2), np.nan), [False] * 3)
    assert lg.kalman_filter(s, p, "AR")[1] == 0.0


def test_singular_innovation_raises():
    p = ModelParams(SigmaX=np.zeros((2, 2)), SigmaV=np.zeros((2, 2)), SigmaY=np.zeros((2, 2)),
                    Sigma1=np.zeros((4, 4)))
    s = ProfileSeries("x", [0.0, 1.0], [[0.0, 0.0], [1.0, 1.0]], [True, True])
    with pytest.raises(InferenceError) as exc:
        lg.kalman_filter(s, p, "RW")
    assert exc.value.index == 0


def test_rw_smoother_interpolates_linearly():
    # tiny measurement noise: RW smoothed mean at a gap is the time-weighted chord
    p = ModelParams.isotropic(0.01, 0.001, 1e-10)
    gps = np.array([[0.0, 0.0], [np.nan, np.nan], [np.nan, np.nan], [3.0, -1.5]])
    s = ProfileSeries("x", [0.0, 10.0, 15.0, 30.0], gps, [True, False, False, True])
    sm = lg.kalman_smoother(s, p.anchored(s), "RW")
    assert np.allclose(sm[1].mean, [1.0, -0.5], atol=1e-6)
    assert np.allclose(sm[2].mean, [1.5, -0.75], atol=1e-6)
