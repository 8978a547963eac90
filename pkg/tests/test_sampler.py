import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from grainlrd.errors import ConfigurationError
from grainlrd.model import GrainSpec, covariance_closed_form, mean_mu
from grainlrd.sampler import (
    Grains, Window, center_normalize, derive_seed, dump_field, evaluate_field, field_from_bytes, field_to_bytes,
    load_field, relevant_mass, sample_grains, simulate_field,
)

SPEC = GrainSpec()


def _brute_counts(grains: Grains, window: Window) -> np.ndarray:
    pts = window.nodes().reshape(-1, window.d)
    out = np.zeros(len(pts), dtype=np.int64)
    for g in grains:
        rel = (pts - g.center) / g.scale
        if grains.spec.shape == "cube":
            inside = np.all((rel > 0) & (rel <= 1), axis=-1)
        else:
            inside = np.sum(rel**2, axis=-1) < 1
        out += inside
    return out.reshape(window.n_grid)


def test_relevant_mass_interval_closed_form():
    w = Window((0.0,), (10.0,), (40,))
    assert relevant_mass(SPEC, w, 1.0) == pytest.approx(10.0 + 3.0, rel=1e-14)
    assert relevant_mass(SPEC, w, 2.0) == pytest.approx(2 * 13.0, rel=1e-14)


def test_relevant_mass_ball_2d_monte_carlo():
    spec = GrainSpec(d=2, shape="ball")
    L = 3.0
    w = Window((0.0, 0.0), (L, L), (4, 4))
    rng = np.random.default_rng(5)
    n = 100_000
    r = spec.r0 * (1 - rng.random(n)) ** (-1 / spec.alpha)
    rho = np.sqrt(r)
    # hit rate of uniform germs on an enlarged box; grains with ρ > R are missed,
    # which happens with probability R^{-2α} ≈ 1.6e-5
    R = 40.0
    u = rng.uniform(-R, L + R, size=(n, 2))
    gap = np.maximum(np.maximum(-u, u - L), 0.0)
    hit = np.sqrt(np.sum(gap**2, axis=1)) < rho
    area = (L + 2 * R) ** 2
    est = area * np.mean(hit)
    se = area * math.sqrt(np.mean(hit) / n)
    assert abs(est - relevant_mass(spec, w, 1.0)) < 4 * se


def test_grain_count_is_poisson():
    w = Window((0.0,), (20.0,), (80,))
    lam = relevant_mass(SPEC, w, 1.0)
    n = np.array([len(sample_grains(SPEC, w, 1.0, derive_seed(1, i))) for i in range(3000)])
    se = math.sqrt(lam / n.size)
    assert abs(n.mean() - lam) < 4 * se
    assert abs(n.var(ddof=1) / lam - 1) < 0.1


def test_marginal_count_poisson_gof():
    w = Window((0.0,), (1.0,), (2,))
    x = np.array([simulate_field(SPEC, w, 1.0, derive_seed(2, i)).counts[0] for i in range(10_000)])
    mu = mean_mu(SPEC)
    k = np.arange(0, 12)
    obs = np.array([np.sum(x == v) for v in k[:-1]] + [np.sum(x >= k[-1])])
    p = stats.poisson.pmf(k[:-1], mu).tolist() + [stats.poisson.sf(k[-1] - 1, mu)]
    assert stats.chisquare(obs, np.array(p) * x.size).pvalue > 0.01
    se = math.sqrt(mu / x.size)
    assert abs(x.mean() - mu) < 3.5 * se


def test_empirical_covariance_matches_model():
    w = Window((0.0,), (20.0,), (20,))  # h = 1, nodes at 0.5, 1.5, ...
    X = np.array([simulate_field(SPEC, w, 1.0, derive_seed(3, i)).counts for i in range(6000)], dtype=float)
    for lag in (1, 2, 4, 8, 16):
        a, b = X[:, 0], X[:, lag]
        prod = (a - a.mean()) * (b - b.mean())
        se = prod.std(ddof=1) / math.sqrt(len(prod))
        assert abs(prod.mean() - float(covariance_closed_form(SPEC, lag))) < 3.5 * se


def test_no_grains_zero_counts():
    w = Window((0.0,), (5.0,), (20,))
    assert np.all(evaluate_field(Grains.empty(SPEC), w) == 0)


def test_single_grain_covers_its_interval():
    w = Window((-1.0,), (3.0,), (16,))
    g = Grains(np.array([[0.0]]), np.array([1.0]), SPEC)
    counts = evaluate_field(g, w)
    nodes = w.axis_nodes(0)
    assert np.array_equal(counts, ((nodes > 0) & (nodes <= 1)).astype(counts.dtype))


@pytest.mark.parametrize("spec,window", [
    (GrainSpec(), Window((0.0,), (30.0,), (120,))),
    (GrainSpec(shape="ball"), Window((0.0,), (30.0,), (97,))),
    (GrainSpec(d=2, shape="cube"), Window((0.0, 0.0), (6.0, 5.0), (24, 17))),
    (GrainSpec(d=2, shape="ball"), Window((0.0, 0.0), (6.0, 6.0), (20, 20))),
])
def test_counts_match_brute_force(spec, window):
    for seed in range(3):
        f = simulate_field(spec, window, 1.0, seed)
        assert np.array_equal(f.counts, _brute_counts(f.grains, window))


def test_determinism_and_seed_sensitivity():
    w = Window((0.0,), (50.0,), (200,))
    a, b = simulate_field(SPEC, w, 2.0, 99), simulate_field(SPEC, w, 2.0, 99)
    assert field_to_bytes(a) == field_to_bytes(b)
    assert field_to_bytes(a) != field_to_bytes(simulate_field(SPEC, w, 2.0, 100))


def test_dump_roundtrip():
    f = simulate_field(GrainSpec(d=2), Window((0.0, 0.0), (4.0, 4.0), (8, 8)), 1.5, 7)
    buf = io.BytesIO()
    dump_field(f, buf)
    buf.seek(0)
    g = load_field(buf)
    assert np.array_equal(g.counts, f.counts) and g.seed == f.seed and g.M == f.M
    assert field_to_bytes(field_from_bytes(field_to_bytes(f))) == field_to_bytes(f)


def test_restriction_law():
    big = Window((0.0,), (40.0,), (160,))
    sub = Window((10.0,), (20.0,), (40,))
    n_big, n_sub, r_big, r_sub = [], [], [], []
    for i in range(1000):
        g = sample_grains(SPEC, big, 1.0, derive_seed(11, i))
        hit = (g.centers[:, 0] < sub.hi[0]) & (g.centers[:, 0] + g.scales > sub.lo[0])
        n_big.append(hit.sum())
        r_big.extend(g.marks[hit])
        d = sample_grains(SPEC, sub, 1.0, derive_seed(12, i))
        n_sub.append(len(d))
        r_sub.extend(d.marks)
    lam = relevant_mass(SPEC, sub, 1.0)
    assert abs(np.mean(n_big) - lam) < 4 * math.sqrt(lam / 1000)
    assert abs(np.mean(n_sub) - lam) < 4 * math.sqrt(lam / 1000)
    assert stats.ks_2samp(r_big, r_sub).pvalue > 0.001


def test_stationarity_across_nodes():
    w = Window((0.0,), (40.0,), (40,))
    X = np.array([simulate_field(SPEC, w, 1.0, derive_seed(13, i)).counts for i in range(2000)], dtype=float)
    means = X.mean(axis=0)
    se = math.sqrt(mean_mu(SPEC) / X.shape[0])
    assert np.max(np.abs(means - mean_mu(SPEC))) < 4.5 * se


def test_center_normalize():
    w = Window((0.0,), (1.0,), (2,))
    f = simulate_field(SPEC, w, 1.0, 4)
    assert np.array_equal(center_normalize(f), f.counts - 3.0)
    xs = np.array([center_normalize(simulate_field(SPEC, w, 16.0, derive_seed(14, i)))[0] for i in range(4000)])
    assert abs(xs.mean()) < 3.5 * math.sqrt(3.0 / xs.size)
    assert abs(xs.var(ddof=1) / 3.0 - 1) < 0.1


@given(st.integers(0, 2**63 - 1), st.integers(0, 2**40))
@settings(max_examples=50)
def test_derive_seed_deterministic(master, idx):
    assert derive_seed(master, idx) == derive_seed(master, idx)
    assert derive_seed(master, idx) != derive_seed(master, idx + 1)


def test_window_validation():
    with pytest.raises(ConfigurationError):
        Window((0.0,), (0.0,), (4,))
    with pytest.raises(ConfigurationError):
        sample_grains(SPEC, Window((0.0,), (1.0,), (4,)), 0.0, 1)
