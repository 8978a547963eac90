import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grainlrd.errors import ConfigurationError, DegenerateSampleError
from grainlrd.experiments import (
    ExperimentConfig, expected_prefactor, hill_estimator, integrate_functional, plan_functional, read_samples_csv,
    regime_report, run_replications, slope_fit, subordinated_mean, variance_slope, window_for,
)
from grainlrd.model import GrainSpec, c_lambda, covariance_closed_form, mean_mu
from grainlrd.sampler import FieldSample, Grains, Window
from grainlrd.testfunctions import BoxIndicator, LinearCombination

SPEC = GrainSpec()
UNIT = BoxIndicator((0.0,), (1.0,))


def _config(**kw):
    base = dict(spec=SPEC, phi=UNIT, gamma=1.0, lambdas=(32.0,), replications=200, master_seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_constant_field_riemann_sum():
    lam, h = 40.0, 0.25
    w = Window.with_spacing((0.0,), (lam,), h)
    counts = np.full(w.n_grid, 7, dtype=np.int64)
    f = FieldSample(SPEC, w, Grains.empty(SPEC), counts, 1.0, 0)
    v = integrate_functional(f, UNIT, lam)
    assert v.value == pytest.approx(7 * lam, rel=h / lam + 1e-12)


def test_centering_and_threads_and_cache(tmp_path):
    cfg = _config(replications=300)
    a = run_replications(cfg, threads=1)
    b = run_replications(cfg, threads=2, chunk=37)
    c = run_replications(cfg, threads=1, cache_dir=tmp_path)
    d = run_replications(cfg, threads=1, cache_dir=tmp_path)
    assert [r.statistic for r in a.rows] == [r.statistic for r in b.rows]
    assert [r.statistic for r in a.rows] == [r.statistic for r in c.rows] == [r.statistic for r in d.rows]
    x = a.at(32.0)
    assert abs(x.mean()) < 4 * x.std(ddof=1) / math.sqrt(x.size)
    # variance of the linear statistic is the finite-λ constant exactly: M c_λ λ^{-2H}
    target = 32.0 * c_lambda(SPEC, UNIT, 32.0) * 32.0 ** -2.5
    assert abs(x.var(ddof=1) / target - 1) < 4 * math.sqrt(2 / x.size)


def test_csv_roundtrip(tmp_path):
    s = run_replications(_config(replications=20))
    s.write_csv(tmp_path / "s.csv")
    assert read_samples_csv(tmp_path / "s.csv") == s.rows


def test_linearity_in_phi():
    a = run_replications(_config(replications=30))
    b = run_replications(_config(replications=30, phi=LinearCombination([(2.0, UNIT)])))
    assert np.allclose(2 * a.at(32.0), b.at(32.0), rtol=1e-12, atol=1e-12)


def test_gaussian_regime_variance_slope():
    s = run_replications(_config(lambdas=(16.0, 32.0, 64.0, 128.0), replications=300))
    # Var of the raw sum grows like λ^{2H} = λ^{2.5}
    assert variance_slope(s).slope == pytest.approx(2.5, abs=0.1)


@pytest.mark.parametrize("alpha", [1.3, 1.7])
def test_boolean_variance_matches_exact_grid_covariance(alpha):
    spec = GrainSpec(alpha=alpha)
    lam = 64.0
    cfg = _config(spec=spec, gamma=0.0, subordinator={"kind": "min1"}, lambdas=(lam,), replications=600)
    x = run_replications(cfg).at(lam, "raw")
    plan = plan_functional(window_for(UNIT, lam, cfg.h), UNIT, lam)
    nodes = plan.window.nodes().ravel()
    w = plan.weights.ravel() * plan.window.cell_volume
    mu = mean_mu(spec)
    # Cov(1{X(s)>0}, 1{X(t)>0}) = e^{-2μ}(e^{r(s-t)} - 1)
    cov = np.exp(-2 * mu) * np.expm1(covariance_closed_form(spec, nodes[:, None] - nodes[None, :]))
    exact = w @ cov @ w
    assert abs(x.var(ddof=1) / exact - 1) < 4 * math.sqrt(2 / (x.size - 1))


def test_regime_report_identity_gaussian_deterministic():
    cfg = _config(lambdas=(64.0,), replications=300)
    s = run_replications(cfg)
    r1, r2 = regime_report(cfg, s), regime_report(cfg, s)
    assert r1 == r2
    assert r1["regime"] == "Gaussian" and {c["name"] for c in r1["checks"]} == {"centering", "ks_normal", "variance"}


def test_subordinated_statistics_track_identity():
    cfg = _config(lambdas=(64.0,), replications=300, subordinator={"kind": "exp", "a": 0.5})
    s = run_replications(cfg)
    assert np.corrcoef(s.at(64.0), s.at(64.0, "identity_statistic"))[0, 1] > 0.9


def test_expected_prefactors():
    mu = mean_mu(SPEC)
    assert expected_prefactor(_config()) == 1.0
    assert expected_prefactor(_config(gamma=0.0, subordinator={"kind": "min1"})) == pytest.approx(math.exp(-mu))
    kappa = 2.0
    e = math.expm1(1 / kappa)
    cfg = _config(gamma=0.0, subordinator={"kind": "exp", "a": 1 / kappa})
    assert expected_prefactor(cfg) == pytest.approx(e * math.exp(e * mu), rel=1e-9)
    assert expected_prefactor(_config(subordinator={"kind": "exp", "a": 0.5})) == pytest.approx(
        0.5 * math.exp(0.125 * mu), rel=1e-8)


def test_subordinated_mean_exact():
    mu, M = 3.0, 100.0
    from grainlrd.charlier import exponential, exponential_mean

    assert subordinated_mean(exponential(0.5), mu, M) == pytest.approx(exponential_mean(0.5, mu, M), rel=1e-12)


def test_hill_pareto_gaussian_and_scale():
    rng = np.random.default_rng(0)
    x = rng.pareto(1.5, 10_000) + 1.0
    h = hill_estimator(x, 0.05)
    assert h.alpha == pytest.approx(1.5, abs=0.1)
    assert hill_estimator(rng.normal(size=10_000), 0.05).alpha > 2.5
    assert hill_estimator(7.3 * x, 0.05).alpha == pytest.approx(h.alpha, rel=1e-12)


def test_hill_guards():
    with pytest.raises(ConfigurationError):
        hill_estimator(np.ones(10))
    with pytest.raises(DegenerateSampleError):
        hill_estimator(np.r_[np.ones(600), np.arange(10.0)])


@given(st.floats(-3, 3), st.floats(0.01, 100))
@settings(max_examples=30)
def test_slope_fit_exact_power(p, c):
    x = np.geomspace(1, 1000, 6)
    f = slope_fit(x, c * x**p)
    assert f.slope == pytest.approx(p, abs=1e-12)


def test_slope_fit_needs_points():
    with pytest.raises(ConfigurationError):
        slope_fit([1, 2, 3], [1, 2, 3])


def test_config_roundtrip_and_validation():
    cfg = _config(lambdas=(16.0, 32.0), subordinator={"kind": "exp", "a": 0.5})
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict() and again.digest() == cfg.digest()
    with pytest.raises(ConfigurationError):
        _config(lambdas=(16.0, 20.0))
    with pytest.raises(ConfigurationError):
        _config(subordinator={"kind": "sqrt"})
    with pytest.raises(ConfigurationError):
        _config(gamma=-1.0)
    assert _config(gamma=0.0).apply_to == "counts" and _config().apply_to == "xi"
