"""Boolean-model volume ``Leb_d(𝒳 ∩ λA)`` on the grid and its stable-limit experiment.

The covered set is ``{X ≥ 1}``, i.e. ``G(x) = min(x, 1)`` applied to the counts,
so the volume functional is the subordinated functional with ``φ = 1_A``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ConfigurationError
from .experiments import ExperimentConfig, SampleSet, regime_report, run_replications
from .model import GrainSpec, mean_mu
from .sampler import FieldSample
from .testfunctions import BallIndicator, BoxIndicator, TestFunction


def _region_mask(field: FieldSample, A: TestFunction, lam: float) -> np.ndarray:
    lo, hi = A.support_box()
    win = field.window
    slack = win.h.max()
    if np.any(lam * np.asarray(lo) < np.asarray(win.lo) - slack) or np.any(
        lam * np.asarray(hi) > np.asarray(win.hi) + slack
    ):
        raise ConfigurationError("window does not contain λA")
    return A(win.nodes() / lam) > 0


def boolean_volume(field: FieldSample, A: TestFunction, lam: float) -> float:
    """``h^d · #{nodes t ∈ λA with X(t) >= 1}``."""
    if not isinstance(A, (BoxIndicator, BallIndicator)):
        raise ConfigurationError("A must be a box or ball indicator")
    mask = _region_mask(field, A, lam)
    return field.window.cell_volume * int(np.count_nonzero((field.counts >= 1) & mask))


def uncovered_volume(field: FieldSample, A: TestFunction, lam: float) -> float:
    mask = _region_mask(field, A, lam)
    return field.window.cell_volume * int(np.count_nonzero((field.counts == 0) & mask))


def grid_volume(field: FieldSample, A: TestFunction, lam: float) -> float:
    """Grid measure of ``λA``: the sum of covered and uncovered volumes."""
    return field.window.cell_volume * int(np.count_nonzero(_region_mask(field, A, lam)))


def coverage_probability(spec: GrainSpec, M: float = 1.0) -> float:
    """``P(X_M(t) >= 1) = 1 - e^{-Mμ}``."""
    return -math.expm1(-M * mean_mu(spec))


@dataclass(frozen=True)
class BooleanVolumeSample:
    lam: float
    volume: float
    analytic_mean: float
    region_volume: float


def boolean_config(spec: GrainSpec, A: TestFunction, lambdas=(256.0,), replications: int = 2000,
                   h: float = 1.0 / 16.0, master_seed: int = 4242, name: str = "boolean") -> ExperimentConfig:
    """Unaggregated (γ = 0) experiment with ``G = min(x, 1)`` applied to the counts."""
    return ExperimentConfig(spec, A, 0.0, tuple(lambdas), replications, {"kind": "min1"}, "counts", h,
                            master_seed, name)


def boolean_limit_experiment(config: ExperimentConfig, samples: SampleSet | None = None, threads: int = 1,
                             mean_se: float = 3.0) -> dict:
    """Mean-volume check plus the stable-branch checks (Hill, CF distance, prefactor ``e^{-μ}``)."""
    if config.subordinator.get("kind") != "min1" or config.gamma != 0 or config.apply_to != "counts":
        raise ConfigurationError("the Boolean experiment needs gamma = 0 and G = min(x, 1) on the counts")
    if samples is None:
        samples = run_replications(config, threads)
    report = regime_report(config, samples)
    lam = samples.largest_lambda
    vol = samples.at(lam, "raw")
    A = config.phi
    mu = mean_mu(config.spec)
    target = coverage_probability(config.spec) * lam**config.spec.d * A.volume
    se = float(np.std(vol, ddof=1) / math.sqrt(vol.size))
    report["checks"].insert(0, {
        "name": "mean_volume", "value": float(np.mean(vol)), "target": target, "tolerance": mean_se * se,
        "passed": bool(abs(np.mean(vol) - target) <= mean_se * se), "se": se,
    })
    report["diagnostics"]["prefactor_target"] = math.exp(-mu)
    report["passed"] = all(c["passed"] for c in report["checks"])
    report["prefactor"] = next((c["value"] for c in report["checks"] if c["name"] == "prefactor"), None)
    return report


def coverage_gof(fields, M: float = 1.0) -> float:
    """Chi-square p-value of the covered/uncovered count at one node per field vs ``1 - e^{-Mμ}``."""
    covered = sum(int(f.counts.flat[0] >= 1) for f in fields)
    n = len(fields)
    p = coverage_probability(fields[0].spec, M)
    res = stats.chisquare([covered, n - covered], [n * p, n * (1 - p)])
    return float(res.pvalue)


def dense_scale_ratio(spec_lo: GrainSpec, spec_hi: GrainSpec) -> float:
    """Predicted ratio of centred-volume scales between two grain laws: ``e^{-μ_hi}/e^{-μ_lo}``."""
    return math.exp(mean_mu(spec_lo) - mean_mu(spec_hi))


__all__ = [
    "boolean_volume", "uncovered_volume", "grid_volume", "coverage_probability", "BooleanVolumeSample",
    "boolean_config", "boolean_limit_experiment", "coverage_gof", "dense_scale_ratio",
]
