import math

import numpy as np
import pytest

from grainlrd.boolean import (
    boolean_config, boolean_limit_experiment, boolean_volume, coverage_gof, coverage_probability, dense_scale_ratio,
    grid_volume, uncovered_volume,
)
from grainlrd.errors import ConfigurationError
from grainlrd.experiments import integrate_functional, run_replications, window_for
from grainlrd.model import GrainSpec, mean_mu
from grainlrd.sampler import FieldSample, Grains, Window, derive_seed, evaluate_field, simulate_field
from grainlrd.testfunctions import BoxIndicator, GaussianBump

SPEC = GrainSpec()
UNIT = BoxIndicator((0.0,), (1.0,))


def _field(grains: Grains, window: Window) -> FieldSample:
    return FieldSample(grains.spec, window, grains, evaluate_field(grains, window), 1.0, 0)


def test_no_grains_zero_volume():
    w = Window.with_spacing((0.0,), (10.0,), 0.25)
    f = _field(Grains.empty(SPEC), w)
    assert boolean_volume(f, UNIT, 10.0) == 0.0
    assert uncovered_volume(f, UNIT, 10.0) == grid_volume(f, UNIT, 10.0) == pytest.approx(10.0)


def test_volume_monotone_in_grains():
    w = Window.with_spacing((0.0,), (20.0,), 0.125)
    rng = np.random.default_rng(1)
    centers = rng.uniform(-3, 20, size=(12, 1))
    scales = rng.uniform(0.2, 3, size=12)
    vols = [boolean_volume(_field(Grains(centers[:k], scales[:k], SPEC), w), UNIT, 20.0) for k in range(13)]
    assert np.all(np.diff(vols) >= 0)


def test_complement_and_functional_agree():
    lam = 40.0
    w = window_for(UNIT, lam, 0.0625)
    for seed in range(5):
        f = simulate_field(SPEC, w, 1.0, seed)
        v = boolean_volume(f, UNIT, lam)
        assert v + uncovered_volume(f, UNIT, lam) == pytest.approx(grid_volume(f, UNIT, lam), rel=1e-14)
        g = integrate_functional(f, UNIT, lam, G=lambda x: np.minimum(x, 1), apply_to="counts")
        assert g.value == pytest.approx(v, rel=1e-12)


def test_single_grain_volume():
    w = Window.with_spacing((0.0,), (8.0,), 0.125)
    f = _field(Grains(np.array([[2.0]]), np.array([3.0]), SPEC), w)
    assert boolean_volume(f, UNIT, 8.0) == pytest.approx(3.0)


def test_coverage_gof():
    w = Window((0.0,), (1.0,), (2,))
    fields = [simulate_field(SPEC, w, 1.0, derive_seed(21, i)) for i in range(4000)]
    assert coverage_gof(fields) > 0.01
    assert coverage_probability(SPEC) == pytest.approx(1 - math.exp(-3.0), rel=1e-15)


def test_region_validation():
    f = simulate_field(SPEC, Window.with_spacing((0.0,), (5.0,), 0.25), 1.0, 0)
    with pytest.raises(ConfigurationError):
        boolean_volume(f, UNIT, 10.0)
    with pytest.raises(ConfigurationError):
        boolean_volume(f, GaussianBump((0.5,), 0.1), 5.0)


def test_mean_volume_small_run():
    cfg = boolean_config(SPEC, UNIT, lambdas=(32.0,), replications=400, h=0.125, master_seed=5)
    vol = run_replications(cfg).at(32.0, "raw")
    target = coverage_probability(SPEC) * 32.0
    assert abs(vol.mean() - target) < 4 * vol.std(ddof=1) / math.sqrt(vol.size)


def test_experiment_rejects_wrong_subordinator():
    from grainlrd.experiments import ExperimentConfig

    cfg = ExperimentConfig(SPEC, UNIT, 0.0, (32.0,), 10, {"kind": "identity"}, "counts")
    with pytest.raises(ConfigurationError):
        boolean_limit_experiment(cfg)


def test_dense_scale_ratio():
    lo, hi = GrainSpec(r0=1.0), GrainSpec(r0=2.0)
    assert dense_scale_ratio(lo, hi) == pytest.approx(math.exp(mean_mu(lo) - mean_mu(hi)))
    assert dense_scale_ratio(lo, hi) < 1
