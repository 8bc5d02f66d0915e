import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argossm import fields as fd
from argossm.errors import InferenceError

R_EARTH = 6371.0
P = 365.25


def chord_km(a, b):
    """Great-circle distance via the 3-D chord; independent of the package's haversine."""
    def unit(x):
        lon, lat = np.radians(x[..., 0]), np.radians(x[..., 1])
        return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)
    c = np.linalg.norm(unit(np.atleast_2d(a))[:, None] - unit(np.atleast_2d(b))[None], axis=-1)
    return 2 * R_EARTH * np.arcsin(np.clip(c / 2, 0, 1))


def matern15(d, var, rng_km):
    a = math.sqrt(3) * np.asarray(d) / rng_km
    return var * (1 + a) * np.exp(-a)


def cloud(n, seed, lon=(-30.0, -20.0), lat=(-65.0, -60.0)):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(*lon, n), rng.uniform(*lat, n)])


def test_observation_requires_finite_value():
    from argossm.geo import Position
    with pytest.raises(ValueError):
        fd.FieldObservation(Position(0, -60), 0.0, float("nan"))
    with pytest.raises(ValueError):
        fd.MaternParams(1.0, 100.0, smoothness=1.0)
    with pytest.raises(ValueError):
        fd.MaternParams(0.0, 100.0)


def test_constant_observations_give_constant_mean():
    xy = cloud(40, 0)
    t = np.random.default_rng(1).uniform(0, 700, 40)
    mf = fd.fit_mean((xy, t, np.full(40, 2.5)), bandwidth_km=300, harmonics=2)
    q = cloud(5, 2)
    assert np.allclose(mf(q, 123.0), 2.5)
    coef = mf.coefficients(q)
    assert np.allclose(coef[:, 0], 2.5) and np.allclose(coef[:, 1:], 0, atol=1e-10)


def test_seasonal_signal_recovered():
    xy = cloud(200, 3)
    t = np.linspace(0, 3 * P, 200)
    mf = fd.fit_mean((xy, t, 1.7 * np.cos(2 * np.pi * t / P)), bandwidth_km=300, harmonics=2)
    coef = mf.coefficients([[-25.0, -62.5]])[0]
    assert coef[1] == pytest.approx(1.7, abs=1e-6)
    assert np.allclose(np.delete(coef, 1), 0, atol=1e-6)


def test_mean_matches_weighted_normal_equations():
    rng = np.random.default_rng(4)
    xy = cloud(60, 4)
    t = rng.uniform(0, 2 * P, 60)
    v = rng.normal(size=60)
    h = 250.0
    mf = fd.fit_mean((xy, t, v), bandwidth_km=h, harmonics=2)
    for q in cloud(4, 5):
        d = chord_km(q, xy)[0]
        w = np.exp(-0.5 * (d / h) ** 2)
        w2 = 2 * np.pi * t / P
        X = np.column_stack([np.ones(60), np.cos(w2), np.sin(w2), np.cos(2 * w2), np.sin(2 * w2)])
        beta = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * v))
        assert np.allclose(mf.coefficients(q)[0], beta, rtol=1e-8, atol=1e-10)


def test_too_few_neighbours_unestimable():
    xy = cloud(3, 6)
    mf = fd.fit_mean((xy, np.zeros(3), np.ones(3)), bandwidth_km=100, harmonics=2)
    assert np.isnan(mf([[-25.0, -62.0]], 0.0)[0])
    assert np.isnan(mf([[100.0, 10.0]], 0.0)[0])


def test_matern_examples():
    p = fd.MaternParams(2.0, 100.0, 0.5, nugget=0.3)
    assert fd.matern_cov(0.0, 0.0, p) == pytest.approx(2.3)
    q = fd.MaternParams(2.0, 100.0, 0.5)
    assert fd.matern_cov(100.0, 0.0, q) == pytest.approx(2 * math.exp(-1))
    r = fd.MaternParams(1.3, 80.0, 1.5)
    d = np.array([0.0, 10.0, 55.5, 80.0, 400.0])
    assert np.allclose(fd.matern_cov(d, 0.0, r), matern15(d, 1.3, 80.0), rtol=1e-12)
    # smoothness 2.5 closed form
    u = np.sqrt(5) * d / 80.0
    assert np.allclose(fd.matern_cov(d, 0.0, fd.MaternParams(1.3, 80.0, 2.5)), 1.3 * (1 + u + u * u / 3) * np.exp(-u))
    with pytest.raises(ValueError):
        fd.matern_cov(-1.0, 0.0, r)


def test_space_time_distance():
    p = fd.MaternParams(1.0, 100.0, 0.5, time_range_days=10.0)
    assert fd.matern_cov(60.0, 8.0, p) == pytest.approx(math.exp(-1.0))


@pytest.mark.parametrize("nu", fd.SMOOTHNESS)
def test_gram_matrices_positive_semidefinite(nu):
    for seed in range(5):
        xy = cloud(50, seed)
        t = np.random.default_rng(seed).uniform(0, 100, 50)
        p = fd.MaternParams(1.0, 150.0, nu, time_range_days=30.0)
        C = fd._gram(xy, t, xy, t, p)
        assert np.linalg.eigvalsh(C).min() > -1e-8


def test_interpolation_property():
    xy = cloud(10, 7)
    t = np.zeros(10)
    v = np.random.default_rng(7).normal(size=10)
    p = fd.MaternParams(1.0, 200.0, 2.5)
    m, var = fd.predict((xy, t, v), None, p, xy[3], 0.0)
    assert m[0] == pytest.approx(v[3], abs=1e-8)
    assert var[0] == pytest.approx(0.0, abs=1e-8)


def test_prior_reversion_far_away():
    xy = cloud(10, 8)
    t = np.zeros(10)
    v = np.random.default_rng(8).normal(size=10)
    mf = fd.fit_mean((xy, t, v), bandwidth_km=1e5, harmonics=0)
    p = fd.MaternParams(0.7, 50.0, 1.5, nugget=0.1)
    q = [[120.0, 30.0]]
    m, var = fd.predict((xy, t, v), mf, p, q, 0.0)
    assert m[0] == pytest.approx(mf(q, 0.0)[0], abs=1e-12)
    assert var[0] == pytest.approx(0.8, abs=1e-12)


def test_five_point_kriging_oracle():
    xy = np.array([[-25.0, -62.0], [-24.0, -62.5], [-25.5, -61.2], [-23.2, -61.8], [-26.1, -62.9]])
    v = np.array([1.0, -0.3, 0.4, 2.2, 0.0])
    q = np.array([[-24.6, -62.1], [-25.0, -61.5]])
    p = fd.MaternParams(1.5, 90.0, 1.5, nugget=0.05)
    m, var = fd.predict((xy, np.zeros(5), v), None, p, q, 0.0)
    K = matern15(chord_km(xy, xy), 1.5, 90.0) + 0.05 * np.eye(5)
    k = matern15(chord_km(q, xy), 1.5, 90.0)
    assert np.allclose(m, k @ np.linalg.solve(K, v), rtol=1e-9)
    assert np.allclose(var, 1.55 - np.einsum("ij,ji->i", k, np.linalg.solve(K, k.T)), rtol=1e-9)


def test_variance_nonincreasing_with_more_data():
    p = fd.MaternParams(1.0, 120.0, 1.5, time_range_days=40.0, nugget=0.02)
    for case in range(10):
        rng = np.random.default_rng(100 + case)
        xy = cloud(30, 100 + case)
        t = rng.uniform(0, 60, 30)
        v = rng.normal(size=30)
        q = cloud(6, 200 + case)
        prev = np.inf
        for n in (5, 10, 20, 30):
            _, var = fd.predict((xy[:n], t[:n], v[:n]), None, p, q, 30.0)
            assert np.all(var <= prev + 1e-10)
            prev = var


def test_singular_gram_uses_jitter_or_fails():
    xy = np.array([[-25.0, -62.0], [-25.0, -62.0]])
    p = fd.MaternParams(1.0, 100.0, 1.5)
    m, var = fd.predict((xy, np.zeros(2), np.array([1.0, 1.0])), None, p, [[-25.0, -62.1]], 0.0)
    assert np.isfinite(m[0]) and var[0] >= 0
    with pytest.raises(InferenceError):
        fd.predict((xy, np.zeros(2), np.array([1.0, 1.0])), None, p, [[-25.0, -62.1]], 0.0, jitter=(0.0,))


def test_fit_cov_improves_on_init():
    xy = cloud(80, 9)
    r = np.random.default_rng(9).normal(size=80)
    init = fd.MaternParams(1.0, 100.0, 1.5, nugget=0.1)
    p, ll = fd.fit_cov((xy, np.zeros(80), r), init)
    assert ll >= fd.gaussian_loglik(xy, np.zeros(80), r, init)
    assert ll == pytest.approx(fd.gaussian_loglik(xy, np.zeros(80), r, p))


def simulate_field(xy, p, seed):
    C = fd._gram(xy, np.zeros(len(xy)), xy, np.zeros(len(xy)), p)
    return np.linalg.cholesky(C + 1e-10 * np.eye(len(xy))) @ np.random.default_rng(seed).normal(size=len(xy))


def test_fit_cov_recovers_range():
    truth = fd.MaternParams(1.0, 150.0, 1.5, nugget=0.05)
    hits = 0
    for rep in range(20):
        xy = cloud(500, 300 + rep)
        r = simulate_field(xy, truth, rep)
        p, _ = fd.fit_cov((xy, np.zeros(500), r), fd.MaternParams(0.5, 60.0, 1.5, nugget=0.2))
        hits += 0.5 * truth.range_km <= p.range_km <= 2 * truth.range_km
    assert hits >= 16


def test_fit_cov_nugget_absorbs_white_noise():
    hits = 0
    for rep in range(20):
        xy = cloud(500, 400 + rep)
        r = np.random.default_rng(rep).normal(size=500)
        p, _ = fd.fit_cov((xy, np.zeros(500), r), fd.MaternParams(1.0, 100.0, 1.5, nugget=0.1))
        hits += p.nugget >= 0.9 * (p.nugget + p.variance)
    assert hits >= 16


def test_fit_cov_size_limit():
    with pytest.raises(ValueError):
        fd.fit_cov((np.zeros((3001, 2)), np.zeros(3001), np.zeros(3001)), fd.MaternParams(1.0, 1.0))


def test_velocity_variant_is_spatial_kriging():
    rng = np.random.default_rng(11)
    xy = cloud(25, 11)
    t = rng.uniform(0, 500, 25)
    v = rng.normal(0.01, 0.02, 25)
    h = 400.0
    mf = fd.fit_mean((xy, t, v), bandwidth_km=h, harmonics=0)
    p = fd.MaternParams(4e-4, 150.0, 1.5, nugget=1e-5)
    q = cloud(7, 12)
    m, var = fd.predict((xy, t, v), mf, p, q, 250.0)

    def local_mean(x):
        w = np.exp(-0.5 * (chord_km(x, xy) / h) ** 2)
        return (w @ v) / w.sum(axis=1)

    K = matern15(chord_km(xy, xy), 4e-4, 150.0) + 1e-5 * np.eye(25)
    k = matern15(chord_km(q, xy), 4e-4, 150.0)
    ref = local_mean(q) + k @ np.linalg.solve(K, v - local_mean(xy))
    ref_var = 4e-4 + 1e-5 - np.einsum("ij,ji->i", k, np.linalg.solve(K, k.T))
    assert np.allclose(m, ref, rtol=1e-8, atol=1e-12)
    assert np.allclose(var, ref_var, rtol=1e-8, atol=1e-14)


def test_aggregate_two_samples():
    m = np.array([[1.0, 2.0], [3.0, 2.0]])
    v = np.array([[0.5, 0.1], [0.7, 0.3]])
    res = fd.aggregate(m, v)
    assert np.allclose(res.between_sample_variance, [1.0, 0.0])
    assert np.allclose(res.mean_conditional_variance, [0.6, 0.2])
    assert np.allclose(res.total_variance, [1.6, 0.2])
    assert np.allclose(res.mean_of_means, [2.0, 2.0])


def test_aggregate_marks_unestimable():
    res = fd.aggregate([[1.0, np.nan], [2.0, 1.0]], [[0.1, 0.1], [0.1, 0.1]])
    assert list(res.estimable) == [True, False]
    assert np.isnan(res.total_variance[1])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 10**6))
def test_decomposition_identity(n_samples, n_nodes, seed):
    rng = np.random.default_rng(seed)
    res = fd.aggregate(rng.normal(size=(n_samples, n_nodes)), rng.gamma(2.0, size=(n_samples, n_nodes)))
    assert np.allclose(res.total_variance, res.mean_conditional_variance + res.between_sample_variance,
                       rtol=0, atol=1e-10)
    assert np.all(res.between_sample_variance >= 0)


def test_identical_samples_have_no_between_variance():
    xy = cloud(30, 13)
    t = np.random.default_rng(13).uniform(0, 400, 30)
    v = np.sin(xy[:, 0]) + 0.01 * t
    cfg = fd.PipelineConfig(bandwidth_km=500, harmonics=0, cov=fd.MaternParams(1.0, 100.0, 1.5, nugget=0.05),
                            fit_covariance=False)
    res = fd.impute_aggregate([xy, xy.copy()], v, t, cloud(4, 14), 200.0, cfg)
    assert np.all(res.between_sample_variance == 0)
    with pytest.raises(ValueError):
        fd.impute_aggregate([xy], v, t, cloud(4, 14), 200.0, cfg)


def test_haversine_to_nearest():
    d = fd.haversine_to_nearest([[0.0, 0.0]], [[0.0, 1.0], [5.0, 5.0]])
    assert d[0] == pytest.approx(chord_km(np.array([0.0, 0.0]), np.array([0.0, 1.0]))[0, 0])
