import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid
from scipy.special import expit, logsumexp

from argossm import smc2
from argossm.errors import ConfigurationError
from argossm.lingauss import kalman_filter
from argossm.model import ModelParams, ProfileSeries, simulate
from argossm.smc import SmcConfig

TRUTH = {"alpha": 0.9, "v0_lon": 0.02, "v0_lat": -0.01, "sx2": 4e-4, "sv2": 1e-4, "sy2": 1e-6}


def ar_series(n=60, seed=0):
    p = ModelParams.isotropic(TRUTH["sx2"], TRUTH["sv2"], TRUTH["sy2"], alpha=TRUTH["alpha"],
                              v0=[TRUTH["v0_lon"], TRUTH["v0_lat"]], mu1=[-20, -62, 0.02, -0.01],
                              Sigma1=np.diag([1e-6, 1e-6, 0.01, 0.01]))
    _, s = simulate("AR", p, np.arange(n) * 10.0, seed=seed)
    return s


def slice_quadrature(series, spec, fixed):
    """Evidence and posterior moments of alpha by trapezoid rule in logit space."""
    u = np.linspace(-8.0, 14.0, 3001)
    names = ("alpha",)
    lp = smc2.log_prior(spec, names, u[:, None])
    ll = np.array([kalman_filter(series, smc2.params_from_theta(names, [expit(v)], series, fixed), "AR")[1]
                   for v in u])
    lj = lp + ll
    m = lj.max()
    f = np.exp(lj - m)
    z = trapezoid(f, u)
    a = expit(u)
    mean = trapezoid(f * a, u) / z
    var = trapezoid(f * a * a, u) / z - mean**2
    return m + np.log(z), mean, np.sqrt(var), a[np.argmax(lj)]


def test_parameter_names():
    assert smc2.parameter_names("RW") == ("sx2", "sy2")
    assert smc2.parameter_names("AR_ICE")[-3:] == ("pTPR", "pTNR", "pMAR")
    assert smc2.parameter_names("ARGOSSM")[-1] == "sigmaPV2"


def test_prior_spec_validation():
    with pytest.raises(ConfigurationError):
        smc2.PriorSpec({"alpha": ("beta", (0.0, 1.0))})
    with pytest.raises(ConfigurationError):
        smc2.PriorSpec({"alpha": ("cauchy", (0.0, 1.0))})


def test_transforms_round_trip_and_jacobian():
    for name, x in (("alpha", 0.37), ("sx2", 3e-4), ("v0_lon", -0.2)):
        u = smc2.to_unconstrained(name, x)
        assert smc2.to_constrained(name, u) == pytest.approx(x)
        h = 1e-6
        num = (smc2.to_constrained(name, u + h) - smc2.to_constrained(name, u - h)) / (2 * h)
        assert smc2.log_jacobian(name, u) == pytest.approx(np.log(num), abs=1e-6)


def test_prior_draws():
    spec = smc2.PriorSpec()
    names = smc2.parameter_names("ARGOSSM")
    cloud = smc2.sample_prior(spec, names, 10000, seed=1)
    tpr = cloud.column("pTPR")
    assert abs(tpr.mean() - 0.9) < 3 * tpr.std() / 100
    v0 = cloud.column("v0_lon")
    # variance convention: Normal(0, 0.01) has variance 0.01
    se_var = 0.01 * np.sqrt(2 / 9999)
    assert abs(v0.var(ddof=1) - 0.01) < 3 * se_var
    a = cloud.column("alpha")
    assert np.all((a > 0) & (a < 1))
    for n in ("sx2", "sv2", "sy2", "sigmaPV2"):
        assert np.all(cloud.column(n) > 0)
    assert np.allclose(cloud.weights, 1e-4)


def test_next_temperature_equal_logliks():
    c = smc2.ThetaCloud(("a",), np.zeros((10, 1)), np.zeros(10), np.full(10, -3.0), 0.2)
    assert smc2.next_temperature(c, 0.5) == 1.0


def test_next_temperature_extreme_gap():
    ll = np.zeros(10)
    ll[0] = 1e6
    c = smc2.ThetaCloud(("a",), np.zeros((10, 1)), np.zeros(10), ll, 0.0)
    xi = smc2.next_temperature(c, 0.5)
    assert 0 < xi < 1e-5


def test_next_temperature_hits_target():
    rng = np.random.default_rng(2)
    for _ in range(5):
        ll = rng.normal(0, 30, 50)
        c = smc2.ThetaCloud(("a",), np.zeros((50, 1)), np.zeros(50), ll, 0.1)
        xi = smc2.next_temperature(c, 0.5)
        lw = (xi - 0.1) * ll
        lw -= logsumexp(lw)
        ess = np.exp(-logsumexp(2 * lw))
        assert ess == pytest.approx(25, abs=0.01)


def test_rejuvenation_at_zero_temperature_keeps_prior():
    spec = smc2.PriorSpec()
    names = ("alpha", "sx2", "v0_lon")
    rng = np.random.default_rng(5)
    c = smc2.sample_prior(spec, names, 200, rng)
    c, rate = smc2.rejuvenate(c, spec, None, 50, rng)
    assert rate > 0.05
    vals = c.values
    for j, n in enumerate(names):
        assert stats.kstest(vals[:, j], spec.frozen(n).cdf).pvalue > 0.01


def test_adaptive_moves_stop_between_bounds_and_keep_prior():
    spec = smc2.PriorSpec()
    names = ("alpha", "sx2", "v0_lon")
    rng = np.random.default_rng(6)
    calls = []

    def flat(values, rng):
        calls.append(1)
        return 0.0

    c = smc2.sample_prior(spec, names, 200, rng)
    c.xi = 0.5
    c, _ = smc2.rejuvenate(c, spec, flat, 2, rng, max_moves=40, tol=0.1)
    sweeps = len(calls) // 200
    assert 2 <= sweeps < 40
    vals = c.values
    for j, n in enumerate(names):
        assert stats.kstest(vals[:, j], spec.frozen(n).cdf).pvalue > 0.01


def test_tiny_proposal_scale_accepts_everything():
    s = ar_series(20)
    spec = smc2.PriorSpec()
    fixed = {k: v for k, v in TRUTH.items() if k != "alpha"}
    cfg = smc2.Smc2Config(n_theta=16, smc=SmcConfig(n_particles=16), fixed=fixed)
    est = smc2.LoglikEstimator(s, "AR", None, cfg, ("alpha",))
    rng = np.random.default_rng(0)
    c = smc2.sample_prior(spec, ("alpha",), 16, rng)
    c.loglik = np.array([est(smc2.to_values(("alpha",), r), rng) for r in c.u])
    c.xi = 0.5
    _, rate = smc2.rejuvenate(c, spec, est, 3, rng, scale=1e-9)
    assert rate > 0.95


def test_linear_fast_path_equals_particle_filter():
    s = ar_series(30)
    names = smc2.parameter_names("AR")
    vals = np.array([TRUTH[n] for n in names])
    fast = smc2.LoglikEstimator(s, "AR", None, smc2.Smc2Config(n_theta=8, smc=SmcConfig(n_particles=64)), names)
    slow = smc2.LoglikEstimator(s, "AR", None, smc2.Smc2Config(n_theta=8, smc=SmcConfig(n_particles=64),
                                                               linear_fast_path=False), names)
    assert fast.exact and not slow.exact
    rng = np.random.default_rng(0)
    assert fast(vals, rng) == pytest.approx(slow(vals, rng), abs=1e-6)


def test_failed_likelihood_is_counted():
    s = ar_series(10)
    est = smc2.LoglikEstimator(s, "AR", None, smc2.Smc2Config(n_theta=8), smc2.parameter_names("AR"))
    bad = np.array([1.5, 0, 0, 1e-4, 1e-4, 1e-6])  # alpha outside [0, 1]
    assert est(bad, np.random.default_rng(0)) == -np.inf
    assert est.n_failures == 1


def test_constant_likelihood_returns_prior():
    s = ProfileSeries("one", [0.0], [[-20.0, -62.0]], [True])
    spec = smc2.PriorSpec()
    cfg = smc2.Smc2Config(n_theta=2000, smc=SmcConfig(n_particles=8), fixed={"sy2": 1e-4}, n_moves=1, seed=3)
    res = smc2.run_smc2(s, "RW", spec, cfg=cfg, trajectories=False)
    assert np.array_equal(res.ladder, [0.0, 1.0])
    x = res.cloud.column("sx2")
    prior = spec.frozen("sx2")
    assert abs(x.mean() - prior.mean()) < 3 * prior.std() / np.sqrt(2000) * 1.5


def test_slice_posterior_and_evidence_match_quadrature():
    s = ar_series(60, seed=4)
    spec = smc2.PriorSpec()
    fixed = {k: v for k, v in TRUTH.items() if k != "alpha"}
    log_z, mean, sd, mode = slice_quadrature(s, spec, fixed)
    reps = []
    for r in range(6):
        cfg = smc2.Smc2Config(n_theta=128, smc=SmcConfig(n_particles=64), fixed=fixed, seed=100 + r)
        res = smc2.run_smc2(s, "AR", spec, cfg=cfg, trajectories=False)
        assert res.ladder[-1] == 1.0 and np.all(np.diff(res.ladder) > 0)
        w = res.cloud.weights
        a = res.cloud.column("alpha")
        post_mean = w @ a
        # posterior mean within 2 posterior sd of the tempered-posterior mode
        assert abs(post_mean - mode) < 2 * sd
        reps.append(res.log_evidence)
    ratio = np.exp(np.array(reps) - log_z)
    assert abs(ratio.mean() - 1) < 3 * ratio.std(ddof=1) / np.sqrt(len(ratio)) + 1e-3


def test_run_produces_trajectories_and_summary():
    s = ar_series(15)
    cfg = smc2.Smc2Config(n_theta=8, smc=SmcConfig(n_particles=32), n_moves=1, seed=0)
    res = smc2.run_smc2(s, "AR", cfg=cfg)
    assert res.draws.X.shape == (8, 15, 2)
    assert len(res.draws.theta) == 8
    summ = res.summary()
    for n in smc2.parameter_names("AR"):
        assert summ[n]["lo"] <= summ[n]["mean"] <= summ[n]["hi"]


def test_weighted_quantile():
    x = np.arange(5.0)
    lo, mid, hi = smc2.weighted_quantile(x, np.ones(5), [0.1, 0.5, 0.9])
    assert mid == pytest.approx(2.0)
    assert lo < mid < hi
