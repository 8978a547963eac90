import math

import numpy as np
import pytest
from scipy import integrate

from grainlrd.burgers import (
    BurgersConfig, VelocityPlan, expected_slope, gamma0_prefactor, heat_kernel, heat_kernel_grad,
    hopf_cole_velocity, run_burgers,
)
from grainlrd.errors import ConfigurationError, DegenerateDenominatorError
from grainlrd.sampler import Window

T, X, KAPPA = 0.5, 0.25, 1.0


def _plan(lam=10.0, h=0.01, t=T, x=X, kappa=KAPPA, pad=0.0):
    reach = 8.0 * math.sqrt(kappa * t)
    w = Window.with_spacing((lam * (x - reach - pad),), (lam * (x + reach + pad),), h)
    return VelocityPlan.build(w, lam, t, (x,), kappa)


def test_kernel_normalized_and_gradient_integrates_to_zero():
    s = math.sqrt(KAPPA * T)
    mass, _ = integrate.quad(lambda y: heat_kernel(T, [X], [y], KAPPA), X - 12 * s, X + 12 * s, epsabs=1e-14)
    grad, _ = integrate.quad(lambda y: heat_kernel_grad(T, [X], [y], KAPPA)[0], X - 12 * s, X + 12 * s,
                             epsabs=1e-14)
    assert mass == pytest.approx(1.0, abs=1e-10)
    assert abs(grad) < 1e-8


def test_kernel_symmetry():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
    assert np.allclose(heat_kernel(0.7, x, y, 2.0), heat_kernel(0.7, y, x, 2.0), rtol=1e-15)
    assert np.allclose(heat_kernel_grad(0.7, x, y, 2.0), -heat_kernel_grad(0.7, y, x, 2.0), rtol=1e-15)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    eps = 1e-5
    for _ in range(100):
        t, kappa = rng.uniform(0.2, 2.0), rng.uniform(0.5, 2.0)
        x, y = rng.normal(size=2), rng.normal(size=2)
        g = heat_kernel_grad(t, x, y, kappa)
        for i in range(2):
            e = np.zeros(2)
            e[i] = eps
            fd = (heat_kernel(t, x + e, y, kappa) - heat_kernel(t, x - e, y, kappa)) / (2 * eps)
            assert abs(fd - g[i]) < 1e-6 * max(1.0, abs(g[i]))


def test_zero_potential_zero_velocity():
    plan = _plan()
    vel = hopf_cole_velocity(np.ones(plan.window.n_grid), plan, 1.0)
    assert vel.v[0] == 0.0


def test_smooth_potential_matches_quadrature():
    lam = 10.0
    plan = _plan(lam=lam, h=0.01)

    def G(u):
        return np.exp(0.3 * np.sin(5 * u) / KAPPA)

    EG = 1.1
    values = G(plan.window.nodes()[..., 0] / lam)
    vel = hopf_cole_velocity(values, plan, EG)
    reach = 8 * math.sqrt(KAPPA * T)
    lo, hi = X - reach, X + reach
    num, _ = integrate.quad(lambda u: -KAPPA * lam * heat_kernel_grad(T, [X], [u], KAPPA)[0] * (G(u) - EG),
                            lo, hi, epsabs=1e-13, epsrel=1e-11, limit=200)
    den, _ = integrate.quad(lambda u: lam * lam * heat_kernel(T, [X], [u], KAPPA) * G(u), lo, hi,
                            epsabs=1e-13, epsrel=1e-11, limit=200)
    assert vel.v[0] == pytest.approx(num / den, rel=1e-6)


def test_constant_shift_galilean_null():
    plan = _plan()
    for c in (0.5, 3.0):
        vel = hopf_cole_velocity(np.full(plan.window.n_grid, c), plan, 1.0)
        assert abs(vel.v[0]) < 1e-10 * abs(c - 1.0)


def test_locality_outside_truncation():
    plan = _plan(pad=1.0)
    y = plan.window.nodes()[..., 0] / plan.lam
    values = 1.0 + 0.1 * np.cos(y)
    far = np.abs(y - X) > 8 * math.sqrt(KAPPA * T)
    assert far.any()
    a = hopf_cole_velocity(values, plan, 1.0)
    b = hopf_cole_velocity(np.where(far, 1e6, values), plan, 1.0)
    assert a.v[0] == b.v[0]


def test_degenerate_denominator_raises():
    plan = _plan()
    with pytest.raises(DegenerateDenominatorError):
        hopf_cole_velocity(np.zeros(plan.window.n_grid), plan, 1.0)


def test_plan_requires_window_cover():
    w = Window.with_spacing((0.0,), (1.0,), 0.1)
    with pytest.raises(ConfigurationError):
        VelocityPlan.build(w, 10.0, T, (X,), KAPPA)


def test_denominator_mean_matches_expectation():
    cfg = BurgersConfig(lambdas=(16.0,), replications=200, points=((0.5, (0.0,)),), master_seed=3)
    s = run_burgers(cfg)
    den = np.array([r[7] for r in s.rows])
    # E den = λ^{1+d} E G · ∫ g  (the kernel mass inside the truncation is 1 to 1e-15)
    from grainlrd.burgers import hopf_cole_subordinator
    from grainlrd.experiments import subordinated_mean
    from grainlrd.model import mean_mu

    EG = subordinated_mean(hopf_cole_subordinator(1.0), mean_mu(cfg.spec), 16.0, "xi")
    target = 16.0**2 * EG
    assert abs(den.mean() - target) < 4 * den.std(ddof=1) / math.sqrt(den.size) + 1e-3 * target


def test_threads_invariance():
    cfg = BurgersConfig(lambdas=(8.0,), replications=40, master_seed=9)
    a, b = run_burgers(cfg), run_burgers(cfg, threads=2, chunk=7)
    assert [r[5] for r in a.rows] == [r[5] for r in b.rows]


def test_gamma0_prefactor_trend():
    ks = np.geomspace(0.5, 1e4, 12)
    vals = np.array([gamma0_prefactor(k) for k in ks])
    assert np.all(np.diff(vals) < 0) and vals[-1] == pytest.approx(1.0, abs=1e-4)


def test_config_roundtrip_and_validation():
    cfg = BurgersConfig(gamma=0.0, lambdas=(256.0, 512.0))
    assert BurgersConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.apply_to == "counts" and BurgersConfig().apply_to == "xi"
    assert expected_slope(BurgersConfig()) == pytest.approx(-1.25)
    assert expected_slope(cfg) == pytest.approx(-(2 - 1 / 1.5))
    for bad in (dict(kappa=0.0), dict(trunc=4.0), dict(points=((0.0, (0.0,)),)), dict(lambdas=(16.0, 20.0)),
                dict(points=((1.0, (0.0, 0.0)),))):
        with pytest.raises(ConfigurationError):
            BurgersConfig(**bad)
