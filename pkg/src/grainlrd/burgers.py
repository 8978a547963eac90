"""Hopf-Cole velocities of Burgers' equation with a random grain initial potential.

With ``u(0, y) = e^{ξ(y)/κ}`` the rescaled velocity is the ratio

    v_λ(t, x) = -κ ∫ ∇g(t, x, y/λ) (G(ξ(y)) - E G(ξ(y))) dy / (λ ∫ g(t, x, y/λ) G(ξ(y)) dy),

``G(z) = e^{z/κ}``.  Both integrals are grid Riemann sums over the window
``λ·[x - c√(κt), x + c√(κt)]``; the centring uses the exact Poisson expectation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .charlier import Subordinator
from .errors import ConfigurationError, DegenerateDenominatorError
from .experiments import LAMBDA_STRIDE, _field, slope_fit, subordinated_mean
from .limits import LimitLaw
from .model import GrainSpec, mean_mu, scaling_exponent
from .sampler import Window, derive_seed
from .testfunctions import HeatKernelGradient

DENOM_RTOL = 1e-12


def heat_kernel(t, x, y, kappa: float) -> np.ndarray:
    """``g(t, x, y) = (2πκt)^{-d/2} exp(-|x - y|²/(2κt))``; points carry a trailing axis of size d."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if t <= 0 or kappa <= 0:
        raise ConfigurationError("heat kernel needs t > 0 and kappa > 0")
    d = np.broadcast_shapes(x.shape, y.shape)[-1]
    r2 = np.sum((x - y) ** 2, axis=-1)
    return (2.0 * math.pi * kappa * t) ** (-d / 2.0) * np.exp(-0.5 * r2 / (kappa * t))


def heat_kernel_grad(t, x, y, kappa: float) -> np.ndarray:
    """``∇_x g = -(x - y)/(κt) g``, shape ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return -(x - y) / (kappa * t) * heat_kernel(t, x, y, kappa)[..., None]


def hopf_cole_subordinator(kappa: float) -> Subordinator:
    return Subordinator(lambda z: np.exp(z / kappa), 1.0, 1.0 / kappa, f"exp(x/{kappa})")


@dataclass(frozen=True)
class BurgersConfig:
    spec: GrainSpec = field(default_factory=GrainSpec)
    kappa: float = 1.0
    points: tuple = ((0.5, 0.0), (0.5, 0.25), (1.0, 0.0), (1.0, 0.25))
    lambdas: tuple = (16.0, 32.0, 64.0, 128.0)
    gamma: float = 1.0
    replications: int = 300
    trunc: float = 8.0
    h: float = 0.25
    master_seed: int = 777
    name: str = "burgers"

    def __post_init__(self):
        pts = tuple((float(t), tuple(float(v) for v in np.atleast_1d(x))) for t, x in self.points)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if self.kappa <= 0:
            raise ConfigurationError("viscosity must be positive")
        if any(t <= 0 for t, _ in pts):
            raise ConfigurationError("evaluation times must be positive")
        if any(len(x) != self.spec.d for _, x in pts):
            raise ConfigurationError("evaluation points must match the grain dimension")
        if self.trunc < 8.0:
            raise ConfigurationError("truncation multiplier must be at least 8")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be nonnegative")
        lam = np.asarray(self.lambdas)
        if lam.size > 1 and np.any(lam[1:] / lam[:-1] < 1.5 - 1e-12):
            raise ConfigurationError("lambda list must be geometric-increasing with ratio >= 1.5")

    @property
    def apply_to(self) -> str:
        """γ = 0 uses ``ξ = X`` itself; γ > 0 the centred, scaled field."""
        return "xi" if self.gamma > 0 else "counts"

    def M(self, lam: float) -> float:
        return float(lam) ** self.gamma

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "spec": self.spec.to_dict(),
            "kappa": self.kappa,
            "points": [[t, list(x)] for t, x in self.points],
            "lambdas": list(self.lambdas),
            "gamma": self.gamma,
            "replications": self.replications,
            "trunc": self.trunc,
            "h": self.h,
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BurgersConfig":
        kw = dict(d)
        kw["spec"] = GrainSpec(**kw.get("spec", {}))
        if "points" in kw:
            kw["points"] = tuple((p[0], tuple(np.atleast_1d(p[1]))) for p in kw["points"])
        if "lambdas" in kw:
            kw["lambdas"] = tuple(kw["lambdas"])
        return cls(**kw)

    def window(self, lam: float) -> Window:
        """Union of the truncation boxes of every evaluation point."""
        lo = np.min([np.asarray(x) - self.trunc * math.sqrt(self.kappa * t) for t, x in self.points], axis=0)
        hi = np.max([np.asarray(x) + self.trunc * math.sqrt(self.kappa * t) for t, x in self.points], axis=0)
        return Window.with_spacing(lam * lo, lam * hi, self.h)


@dataclass(frozen=True, eq=False)
class VelocityPlan:
    """Grid weights of ``∇g(t, x, ·/λ)`` and ``g(t, x, ·/λ)`` for one evaluation point."""

    window: Window
    lam: float
    t: float
    x: tuple
    kappa: float
    grad: np.ndarray  # (..., d)
    kern: np.ndarray

    @classmethod
    def build(cls, window: Window, lam: float, t: float, x, kappa: float, trunc: float = 8.0) -> "VelocityPlan":
        x = tuple(float(v) for v in np.atleast_1d(x))
        reach = trunc * math.sqrt(kappa * t)
        if np.any(lam * (np.asarray(x) - reach) < np.asarray(window.lo) - window.h.max()) or np.any(
            lam * (np.asarray(x) + reach) > np.asarray(window.hi) + window.h.max()
        ):
            raise ConfigurationError("window does not cover the heat-kernel truncation domain")
        y = window.nodes() / lam
        inside = np.all(np.abs(y - np.asarray(x)) <= reach, axis=-1)
        kern = np.where(inside, heat_kernel(t, np.asarray(x), y, kappa), 0.0)
        grad = np.where(inside[..., None], heat_kernel_grad(t, np.asarray(x), y, kappa), 0.0)
        return cls(window, float(lam), float(t), x, float(kappa), grad, kern)


@dataclass(frozen=True)
class Velocity:
    v: np.ndarray
    numerator: np.ndarray
    denominator: float


def hopf_cole_velocity(values: np.ndarray, plan: VelocityPlan, EG: float, kappa: float | None = None) -> Velocity:
    """Velocity from grid values ``G(ξ)``: ``-κ Σ ∇g (G - EG) h^d / (λ Σ g G h^d)``.

    ``values`` already holds ``G(ξ(y))`` on the plan's window; ``EG`` is its exact
    mean.  Raises when the denominator is below ``1e-12`` of its expected size.
    """
    kappa = plan.kappa if kappa is None else kappa
    cell = plan.window.cell_volume
    centred = values - EG
    d = plan.grad.shape[-1]
    num = np.array([-kappa * cell * math.fsum((plan.grad[..., i] * centred).ravel()) for i in range(d)])
    den = plan.lam * cell * math.fsum((plan.kern * values).ravel())
    scale = plan.lam * plan.lam**d * abs(EG)
    if not den > DENOM_RTOL * scale:
        raise DegenerateDenominatorError(f"denominator {den!r} below {DENOM_RTOL}·{scale!r}")
    return Velocity(num / den, num, den)


def potential_values(counts: np.ndarray, spec: GrainSpec, M: float, apply_to: str, kappa: float) -> np.ndarray:
    z = counts.astype(float)
    if apply_to == "xi":
        z = (z - M * mean_mu(spec)) / math.sqrt(M)
    return np.exp(z / kappa)


def velocity_normalization(config: BurgersConfig, lam: float) -> float:
    """``λ^{1+d+γ/2-H}`` (γ > 0) or ``λ^{1+d-d/α}`` (γ = 0)."""
    d = config.spec.d
    H = scaling_exponent(config.spec, config.gamma).H
    if config.gamma == 0:
        return lam ** (1.0 + d - H)
    return lam ** (1.0 + d + 0.5 * config.gamma - H)


def expected_slope(config: BurgersConfig) -> float:
    return -math.log(velocity_normalization(config, math.e))


def _burgers_chunk(config: BurgersConfig, lam_idx: int, lam: float, plans, EG: float, reps, cache_dir):
    M = config.M(lam)
    rows = []
    for rep in reps:
        seed = derive_seed(config.master_seed, lam_idx * LAMBDA_STRIDE + rep)
        f = _field(config, plans[0].window, M, seed, cache_dir)
        vals = potential_values(f.counts, config.spec, M, config.apply_to, config.kappa)
        for k, plan in enumerate(plans):
            try:
                vel = hopf_cole_velocity(vals, plan, EG)
                rows.append((lam, plan.t, plan.x, rep, seed, float(vel.v[0]), float(vel.numerator[0]),
                             vel.denominator, False))
            except DegenerateDenominatorError:
                rows.append((lam, plan.t, plan.x, rep, seed, math.nan, math.nan, math.nan, True))
    return rows


@dataclass
class BurgersSamples:
    config: BurgersConfig
    rows: list

    def values(self, lam: float, t: float, x) -> np.ndarray:
        x = tuple(np.atleast_1d(x).astype(float))
        return np.array([r[5] for r in self.rows if r[0] == lam and r[1] == t and r[2] == x and not r[8]])

    @property
    def degenerate_rate(self) -> float:
        return sum(r[8] for r in self.rows) / max(len(self.rows), 1)

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "t", "x", "replication", "seed", "v", "numerator", "denominator"])
            for lam, t, x, rep, seed, v, num, den, _ in self.rows:
                w.writerow([format(lam, ".17g"), format(t, ".17g"), ";".join(format(c, ".17g") for c in x),
                            rep, seed, format(v, ".17g"), format(num, ".17g"), format(den, ".17g")])


def run_burgers(config: BurgersConfig, threads: int = 1, cache_dir=None, chunk: int = 25) -> BurgersSamples:
    rows = []
    G = hopf_cole_subordinator(config.kappa)
    for lam_idx, lam in enumerate(config.lambdas):
        window = config.window(lam)
        plans = [VelocityPlan.build(window, lam, t, x, config.kappa, config.trunc) for t, x in config.points]
        EG = subordinated_mean(G, mean_mu(config.spec), config.M(lam), config.apply_to)
        reps = range(config.replications)
        chunks = [reps[i:i + chunk] for i in range(0, len(reps), chunk)]
        if threads == 1:
            parts = [_burgers_chunk(config, lam_idx, lam, plans, EG, c, cache_dir) for c in chunks]
        else:
            parts = Parallel(n_jobs=threads)(
                delayed(_burgers_chunk)(config, lam_idx, lam, plans, EG, c, cache_dir) for c in chunks
            )
        for p in parts:
            rows.extend(p)
    return BurgersSamples(config, rows)


def burgers_scaling_experiment(config: BurgersConfig, samples: BurgersSamples | None = None,
                               threads: int = 1, slope_tol: float = 0.15, ks_p: float = 0.01) -> dict:
    """Slope of ``log median|v_λ|`` against ``log λ`` per evaluation point, plus a KS
    check of the normalized velocities in the Gaussian regime."""
    if samples is None:
        samples = run_burgers(config, threads)
    target = expected_slope(config)
    regime = scaling_exponent(config.spec, config.gamma)
    points = []
    for t, x in config.points:
        scales = [float(np.median(np.abs(samples.values(lam, t, x)))) for lam in config.lambdas]
        fit = slope_fit(config.lambdas, scales)
        entry = {"t": t, "x": list(x), "scales": scales, "slope": fit.slope, "slope_stderr": fit.stderr,
                 "target": target, "passed": abs(fit.slope - target) <= slope_tol}
        if regime.regime == "Gaussian" and config.spec.d == 1:
            lam = max(config.lambdas)
            z = velocity_normalization(config, lam) * samples.values(lam, t, x)
            var = LimitLaw.build("GaussianB", config.spec, HeatKernelGradient(t, x, config.kappa)).variance
            ks = stats.kstest(z, "norm", args=(0.0, math.sqrt(var)))
            entry.update(ks_pvalue=float(ks.pvalue), limit_variance=var, sample_variance=float(np.var(z, ddof=1)),
                         ks_passed=bool(ks.pvalue > ks_p))
        points.append(entry)
    rate = samples.degenerate_rate
    return {
        "schema": 1,
        "name": config.name,
        "regime": regime.regime,
        "gamma": config.gamma,
        "kappa": config.kappa,
        "expected_slope": target,
        "slope_tolerance": slope_tol,
        "points": points,
        "degenerate_rate": rate,
        "degenerate_flagged": rate > 0.01,
        "slope": float(np.mean([p["slope"] for p in points])),
        "passed": all(p["passed"] for p in points) and rate <= 0.01,
    }


def gamma0_prefactor(kappa: float) -> float:
    """``κ(e^{1/κ} - 1)``, the γ = 0 limit prefactor."""
    return kappa * math.expm1(1.0 / kappa)


__all__ = [
    "heat_kernel", "heat_kernel_grad", "hopf_cole_subordinator", "BurgersConfig", "VelocityPlan", "Velocity",
    "hopf_cole_velocity", "potential_values", "velocity_normalization", "expected_slope", "BurgersSamples",
    "run_burgers", "burgers_scaling_experiment", "gamma0_prefactor",
]
