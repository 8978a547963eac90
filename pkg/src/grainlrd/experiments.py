"""Replicated scaling experiments for linear and subordinated grain functionals.

A replication draws one aggregated field ``X_M`` (``M = λ^γ``) on the window
``λ·supp φ`` and evaluates

    λ^{-H} (X_{λ,M}(φ) - E X_{λ,M}(φ))                 (identity G)
    λ^{γ/2-H} (Y_{λ,M}(φ) - E Y_{λ,M}(φ)),  Y = ∫ G(ξ) φ(·/λ)   (G of ξ = (X_M - Mμ)/√M)
    λ^{-H} (∫ G(X) φ(·/λ) - E ...)                          (G of the counts, γ = 0)

with Riemann sums over the grid and means taken analytically on the same grid.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .charlier import (
    CharlierBasis,
    Subordinator,
    boolean_indicator,
    charlier_coeff_proj,
    exponential,
    hermite_h1,
    hermite_h1_adaptive,
    identity,
    poisson_pmf,
    truncation_range,
)
from .errors import ConfigurationError, DegenerateSampleError, NumericalFailure
from .limits import LimitLaw, cf_distance, finite_lambda_law, fit_stable_prefactor, theta_clusters
from .model import GrainSpec, c_lambda, mean_mu, scaling_exponent
from .sampler import FieldSample, Window, derive_seed, dump_field, load_field, simulate_field
from .testfunctions import TestFunction, from_dict

THRESHOLDS = {
    "ks_p": 0.01,
    "variance_rel": 0.10,
    "hill_abs": 0.15,
    "sd_ratio_rel": 0.10,
    "correlation": 0.9,
    "prefactor_rel": 0.15,
    "cf_clusters": 3,
    "centering_se": 4.0,
}
LAMBDA_STRIDE = 1 << 32  # seed index = λ-index · stride + replication


# subordinators -----------------------------------------------------------------
def subordinator_from_dict(d: dict | None) -> Subordinator:
    d = dict(d or {"kind": "identity"})
    kind = d.get("kind", "identity")
    if kind == "identity":
        return identity()
    if kind == "exp":
        return exponential(float(d["a"]))
    if kind == "min1":
        return boolean_indicator()
    raise ConfigurationError(f"unknown subordinator kind {kind!r}")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    spec: GrainSpec
    phi: TestFunction
    gamma: float
    lambdas: tuple
    replications: int = 1000
    subordinator: dict = field(default_factory=lambda: {"kind": "identity"})
    apply_to: str = "auto"
    h: float = 0.25
    master_seed: int = 12345
    name: str = "experiment"

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in np.atleast_1d(self.lambdas)))
        object.__setattr__(self, "subordinator", dict(self.subordinator))
        if self.apply_to == "auto":
            object.__setattr__(self, "apply_to", "xi" if self.gamma > 0 else "counts")
        self.validate()

    def validate(self) -> None:
        if self.gamma < 0:
            raise ConfigurationError("gamma must be nonnegative")
        if not self.lambdas or min(self.lambdas) <= 0:
            raise ConfigurationError("lambdas must be positive")
        lam = np.asarray(self.lambdas)
        if lam.size > 1 and np.any(lam[1:] / lam[:-1] < 1.5 - 1e-12):
            raise ConfigurationError("lambda list must be geometric-increasing with ratio >= 1.5")
        if self.replications < 1:
            raise ConfigurationError("need at least one replication")
        if self.apply_to not in ("xi", "counts"):
            raise ConfigurationError("apply_to must be 'xi', 'counts' or 'auto'")
        if self.h <= 0:
            raise ConfigurationError("grid spacing h must be positive")
        if self.phi.dim != self.spec.d:
            raise ConfigurationError("test function and grain dimensions differ")
        subordinator_from_dict(self.subordinator)

    @property
    def G(self) -> Subordinator:
        return subordinator_from_dict(self.subordinator)

    @property
    def is_identity(self) -> bool:
        return self.subordinator.get("kind", "identity") == "identity"

    def M(self, lam: float) -> float:
        return float(lam) ** self.gamma

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "spec": self.spec.to_dict(),
            "phi": self.phi.describe(),
            "gamma": self.gamma,
            "lambdas": list(self.lambdas),
            "replications": self.replications,
            "subordinator": self.subordinator,
            "apply_to": self.apply_to,
            "h": self.h,
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            spec=GrainSpec(**d.get("spec", {})),
            phi=from_dict(d["phi"]),
            gamma=float(d["gamma"]),
            lambdas=tuple(d["lambdas"]),
            replications=int(d.get("replications", 1000)),
            subordinator=d.get("subordinator", {"kind": "identity"}),
            apply_to=d.get("apply_to", "auto"),
            h=float(d.get("h", 0.25)),
            master_seed=int(d.get("master_seed", 12345)),
            name=d.get("name", "experiment"),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# functionals -------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class FunctionalPlan:
    """Grid weights ``φ(t/λ)`` on a window, reused by every replication at that λ."""

    window: Window
    lam: float
    weights: np.ndarray
    half_mask: np.ndarray

    @property
    def weight_sum(self) -> float:
        return math.fsum(self.weights.ravel()) * self.window.cell_volume


def window_for(phi: TestFunction, lam: float, h: float) -> Window:
    lo, hi = phi.support_box()
    return Window.with_spacing(lam * np.asarray(lo), lam * np.asarray(hi), h)


def plan_functional(window: Window, phi: TestFunction, lam: float) -> FunctionalPlan:
    lo, hi = phi.support_box()
    slack = window.h.max()
    if np.any(lam * np.asarray(lo) < np.asarray(window.lo) - slack) or np.any(
        lam * np.asarray(hi) > np.asarray(window.hi) + slack
    ):
        raise ConfigurationError("window does not cover the support of φ(·/λ)")
    w = phi(window.nodes() / lam)
    even = np.ones(window.n_grid, dtype=bool)
    for ax in range(window.d):
        idx = [slice(None)] * window.d
        idx[ax] = slice(1, None, 2)
        even[tuple(idx)] = False
    return FunctionalPlan(window, float(lam), np.asarray(w, dtype=float), even)


@dataclass(frozen=True)
class FunctionalValue:
    value: float
    error: float


def transformed_values(field: FieldSample, G: Subordinator | None, apply_to: str = "xi") -> np.ndarray:
    if G is None:
        return field.counts.astype(float)
    if apply_to == "counts":
        return np.asarray(G(field.counts.astype(float)), dtype=float)
    mu = mean_mu(field.spec)
    xi = (field.counts - field.M * mu) / math.sqrt(field.M)
    return np.asarray(G(xi), dtype=float)


def integrate_functional(field: FieldSample, phi: TestFunction, lam: float, G: Subordinator | None = None,
                         apply_to: str = "xi", plan: FunctionalPlan | None = None) -> FunctionalValue:
    """``h^d Σ_t v(t) φ(t/λ)`` with ``v = X`` or ``G(ξ)``/``G(X)``; the error is the
    difference to the same sum on every other node (spacing ``2h``)."""
    if plan is None:
        plan = plan_functional(field.window, phi, lam)
    elif plan.window != field.window:
        raise ConfigurationError("plan and field windows differ")
    vals = transformed_values(field, G, apply_to)
    prod = vals * plan.weights
    cell = field.window.cell_volume
    full = cell * math.fsum(prod.ravel())
    half = cell * 2 ** field.window.d * math.fsum(prod[plan.half_mask].ravel())
    return FunctionalValue(full, abs(full - half))


def subordinated_mean(G: Subordinator, mu: float, M: float, apply_to: str = "xi") -> float:
    """``E G(ξ)`` (or ``E G(X)``) under the exact Poisson(Mμ) law of ``X_M(t)``."""
    m = M * mu
    lo, hi = truncation_range(m)
    x = np.arange(lo, hi + 1, dtype=float)
    arg = x if apply_to == "counts" else (x - m) / math.sqrt(M)
    vals = np.asarray(G(arg), dtype=float) * poisson_pmf(x, m)
    if not np.all(np.isfinite(vals)):
        raise NumericalFailure("E G is not finite on the truncation range")
    return math.fsum(vals)


def analytic_mean(config: ExperimentConfig, plan: FunctionalPlan, G: Subordinator | None) -> float:
    """Grid-consistent mean ``E h^d Σ v(t) φ(t/λ) = E v · h^d Σ φ(t/λ)``."""
    M = config.M(plan.lam)
    if G is None:
        return M * mean_mu(config.spec) * plan.weight_sum
    return subordinated_mean(G, mean_mu(config.spec), M, config.apply_to) * plan.weight_sum


def normalization(config: ExperimentConfig, lam: float, subordinated: bool) -> float:
    H = scaling_exponent(config.spec, config.gamma).H
    if subordinated and config.apply_to == "xi":
        return lam ** (0.5 * config.gamma - H)
    return lam ** (-H)


# replications ------------------------------------------------------------------
@dataclass(frozen=True)
class StatisticSample:
    lam: float
    gamma: float
    replication: int
    seed: int
    statistic: float
    identity_statistic: float
    raw: float
    grid_error: float


CSV_COLUMNS = ("lambda", "gamma", "replication", "seed", "statistic", "identity_statistic", "raw", "grid_error")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


@dataclass
class SampleSet:
    config: ExperimentConfig
    rows: list

    def at(self, lam: float, column: str = "statistic") -> np.ndarray:
        return np.array([getattr(r, column) for r in self.rows if r.lam == lam])

    @property
    def largest_lambda(self) -> float:
        return max(self.config.lambdas)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r.lam), _fmt(r.gamma), str(r.replication), str(r.seed), _fmt(r.statistic),
                            _fmt(r.identity_statistic), _fmt(r.raw), _fmt(r.grid_error)])


def read_samples_csv(path) -> list[StatisticSample]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        return [
            StatisticSample(float(r["lambda"]), float(r["gamma"]), int(r["replication"]), int(r["seed"]),
                            float(r["statistic"]), float(r["identity_statistic"]), float(r["raw"]),
                            float(r["grid_error"]))
            for r in rd
        ]


def _field(config: ExperimentConfig, window: Window, M: float, seed: int, cache_dir) -> FieldSample:
    if cache_dir is None:
        return simulate_field(config.spec, window, M, seed)
    path = Path(cache_dir) / f"{config.spec.digest()[:16]}_{seed}.grnf"
    if path.exists():
        with open(path, "rb") as fh:
            f = load_field(fh)
        if f.window == window and f.M == M and f.spec == config.spec:
            return f
    f = simulate_field(config.spec, window, M, seed)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        dump_field(f, fh)
    os.replace(tmp, path)
    return f


def _replicate_chunk(config: ExperimentConfig, plan: FunctionalPlan, lam_idx: int, reps, means, cache_dir):
    lam = plan.lam
    M = config.M(lam)
    G = None if config.is_identity else config.G
    norm_id = normalization(config, lam, False)
    norm_sub = normalization(config, lam, True)
    out = []
    for rep in reps:
        seed = derive_seed(config.master_seed, lam_idx * LAMBDA_STRIDE + rep)
        f = _field(config, plan.window, M, seed, cache_dir)
        ident = integrate_functional(f, config.phi, lam, None, plan=plan)
        s_id = norm_id * (ident.value - means[0])
        if G is None:
            stat, raw, err = s_id, ident.value, ident.error
        else:
            sub = integrate_functional(f, config.phi, lam, G, config.apply_to, plan=plan)
            stat, raw, err = norm_sub * (sub.value - means[1]), sub.value, sub.error
        out.append(StatisticSample(lam, config.gamma, int(rep), int(seed), float(stat), float(s_id),
                                   float(raw), float(err)))
    return out


def run_replications(config: ExperimentConfig, threads: int = 1, cache_dir=None, chunk: int = 50) -> SampleSet:
    """All replications at every λ; output order and values do not depend on ``threads``."""
    rows = []
    G = None if config.is_identity else config.G
    for lam_idx, lam in enumerate(config.lambdas):
        window = window_for(config.phi, lam, config.h)
        plan = plan_functional(window, config.phi, lam)
        means = (analytic_mean(config, plan, None), analytic_mean(config, plan, G) if G else math.nan)
        reps = range(config.replications)
        chunks = [reps[i:i + chunk] for i in range(0, len(reps), chunk)]
        if threads == 1:
            parts = [_replicate_chunk(config, plan, lam_idx, c, means, cache_dir) for c in chunks]
        else:
            parts = Parallel(n_jobs=threads)(
                delayed(_replicate_chunk)(config, plan, lam_idx, c, means, cache_dir) for c in chunks
            )
        for p in parts:
            rows.extend(p)
    return SampleSet(config, rows)


# estimators --------------------------------------------------------------------
@dataclass(frozen=True)
class HillEstimate:
    alpha: float
    se: float
    k: int


def _hill(sorted_desc: np.ndarray, k: int) -> float:
    top = sorted_desc[: k + 1]
    if top[k] <= 0:
        raise DegenerateSampleError("Hill threshold order statistic is not positive")
    return 1.0 / np.mean(np.log(top[:k]) - math.log(top[k]))


def hill_estimator(samples, k_frac: float = 0.05, n_boot: int = 200, seed: int = 0,
                   min_samples: int = 500) -> HillEstimate:
    """Hill tail-index estimate on the ``k = k_frac·n`` largest ``|samples|``, bootstrap SE."""
    x = np.abs(np.asarray(samples, dtype=float))
    if x.size < min_samples:
        raise ConfigurationError(f"Hill estimator needs at least {min_samples} samples")
    if not 0.01 < k_frac < 0.2:
        raise ConfigurationError("k_frac must lie in (0.01, 0.2)")
    k = int(k_frac * x.size)
    xs = np.sort(x)[::-1]
    if np.unique(xs[: k + 1]).size < 0.5 * (k + 1):
        raise DegenerateSampleError("too many ties among the upper order statistics")
    est = _hill(xs, k)
    rng = np.random.Generator(np.random.Philox(seed))
    boots = []
    for _ in range(n_boot):
        b = np.sort(x[rng.integers(0, x.size, x.size)])[::-1]
        try:
            boots.append(_hill(b, k))
        except DegenerateSampleError:
            continue
    se = float(np.std(boots, ddof=1)) if len(boots) > 1 else math.nan
    return HillEstimate(float(est), se, k)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float


def slope_fit(x, y) -> SlopeFit:
    """Least squares of ``log y`` on ``log x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size or x.size < 4:
        raise ConfigurationError("slope fit needs at least 4 paired points")
    if np.any(y <= 0) or np.any(x <= 0):
        raise ConfigurationError("slope fit needs positive data")
    res = stats.linregress(np.log(x), np.log(y))
    return SlopeFit(float(res.slope), float(res.intercept), float(res.stderr))


# verdicts ----------------------------------------------------------------------
def _check(name, value, target, tolerance, passed, **extra) -> dict:
    return {"name": name, "value": value, "target": target, "tolerance": tolerance, "passed": bool(passed), **extra}


def expected_prefactor(config: ExperimentConfig) -> float:
    """Factor multiplying the identity limit: ``h_{G,μ}(1)`` for G of ξ, ``c_G(1; μ)`` for G of X."""
    if config.is_identity:
        return 1.0
    G, mu = config.G, mean_mu(config.spec)
    if config.apply_to == "counts":
        return float(charlier_coeff_proj(CharlierBasis(mu, 2), G)[1])
    try:
        return hermite_h1(G, mu)
    except NumericalFailure:
        return hermite_h1_adaptive(G, mu)


def regime_report(config: ExperimentConfig, samples: SampleSet, n_boot: int = 500,
                  finite_lambda_diagnostic: bool = True) -> dict:
    """Pass/fail checks at the largest λ plus the raw numbers behind them."""
    spec = config.spec
    regime = scaling_exponent(spec, config.gamma)
    lam = samples.largest_lambda
    x = samples.at(lam)
    x_id = samples.at(lam, "identity_statistic")
    pref = expected_prefactor(config)
    checks, diag = [], {}
    n = x.size
    diag["n"] = n
    diag["mean"] = float(np.mean(x))
    diag["variance"] = float(np.var(x, ddof=1))
    diag["expected_prefactor"] = pref
    diag["median_grid_error"] = float(np.median(samples.at(lam, "grid_error")))

    if regime.regime == "Gaussian":
        # normality and variance are checked on the linear statistic;
        # a subordinated run carries it along under the same seeds
        law = LimitLaw.build("GaussianB", spec, config.phi)
        target_var = law.variance
        v_id = float(np.var(x_id, ddof=1))
        ks = stats.kstest(x_id, "norm", args=(0.0, math.sqrt(target_var)))
        se = math.sqrt(v_id / n)
        m_id = float(np.mean(x_id))
        checks.append(_check("centering", m_id, 0.0, THRESHOLDS["centering_se"] * se,
                             abs(m_id) <= THRESHOLDS["centering_se"] * se))
        checks.append(_check("ks_normal", float(ks.pvalue), THRESHOLDS["ks_p"], None,
                             ks.pvalue > THRESHOLDS["ks_p"], statistic=float(ks.statistic)))
        rel = v_id / target_var - 1.0
        checks.append(_check("variance", v_id, target_var, THRESHOLDS["variance_rel"],
                             abs(rel) <= THRESHOLDS["variance_rel"], relative_error=rel))
        if not config.is_identity:
            sub_var = target_var * pref**2
            ks_sub = stats.kstest(x, "norm", args=(0.0, math.sqrt(sub_var)))
            diag["subordinated_ks_pvalue"] = float(ks_sub.pvalue)
            diag["subordinated_skewness"] = float(stats.skew(x))
        if spec.d == 1:
            H = regime.H
            diag["finite_lambda_variance"] = config.M(lam) * lam ** (-2 * H) * c_lambda(spec, config.phi, lam)
    else:
        kind = "IntermediateJ" if regime.regime == "Intermediate" else "StableL"
        law = LimitLaw.build(kind, spec, config.phi, prefactor=pref)
        if kind == "StableL":
            try:
                hill = hill_estimator(x, 0.05, seed=config.master_seed)
                checks.append(_check("hill_index", hill.alpha, spec.alpha, THRESHOLDS["hill_abs"],
                                     abs(hill.alpha - spec.alpha) <= THRESHOLDS["hill_abs"],
                                     se=hill.se, k=hill.k))
            except DegenerateSampleError as exc:
                checks.append(_check("hill_index", None, spec.alpha, THRESHOLDS["hill_abs"], False,
                                     error=str(exc)))
        clusters = theta_clusters(law)
        dist = cf_distance(x, law, clusters=clusters, n_boot=n_boot, seed=config.master_seed,
                           min_clusters=THRESHOLDS["cf_clusters"])
        checks.append(_check("cf_distance", dist.distance, 0.0, dist.band, dist.passed,
                             clusters_passed=dist.clusters_passed, detail=dist.to_dict()))
        if kind == "StableL" and not config.is_identity:
            try:
                fit = fit_stable_prefactor(x, law)
                rel = fit.prefactor / abs(pref) - 1.0
                checks.append(_check("prefactor", fit.prefactor, abs(pref), THRESHOLDS["prefactor_rel"],
                                     abs(rel) <= THRESHOLDS["prefactor_rel"], relative_error=rel,
                                     gaussian_part=fit.gaussian_part))
            except DegenerateSampleError as exc:
                checks.append(_check("prefactor", None, abs(pref), THRESHOLDS["prefactor_rel"], False,
                                     error=str(exc)))
        if finite_lambda_diagnostic and spec.d == 1 and config.is_identity:
            fl = finite_lambda_law(spec, config.phi, lam, config.M(lam), regime.H)
            try:
                fd = cf_distance(x, fl, clusters=clusters, n_boot=n_boot, seed=config.master_seed)
                diag["finite_lambda_cf"] = {"distance": fd.distance, "clusters_passed": fd.clusters_passed,
                                            "cluster_distances": fd.cluster_distances.tolist(),
                                            "cluster_bands": fd.cluster_bands.tolist()}
            except ConfigurationError as exc:
                diag["finite_lambda_cf"] = {"error": str(exc)}
    if not config.is_identity and regime.regime == "Gaussian":
        sd_ratio = float(np.std(x, ddof=1) / np.std(x_id, ddof=1))
        rel = sd_ratio / abs(pref) - 1.0
        checks.append(_check("sd_ratio", sd_ratio, abs(pref), THRESHOLDS["sd_ratio_rel"],
                             abs(rel) <= THRESHOLDS["sd_ratio_rel"], relative_error=rel))
        corr = float(np.corrcoef(x, x_id)[0, 1])
        checks.append(_check("shared_seed_correlation", corr, THRESHOLDS["correlation"], None,
                             corr > THRESHOLDS["correlation"]))
    return {
        "schema": 1,
        "name": config.name,
        "config_digest": config.digest(),
        "regime": regime.regime,
        "H": regime.H,
        "gamma": config.gamma,
        "lambda": lam,
        "checks": checks,
        "diagnostics": diag,
        "passed": all(c["passed"] for c in checks),
    }


def variance_slope(samples: SampleSet, column: str = "raw") -> SlopeFit:
    """Slope of ``log Var`` of the raw functional against ``log λ``."""
    lams = list(samples.config.lambdas)
    v = [np.var(samples.at(l, column), ddof=1) for l in lams]
    return slope_fit(lams, v)


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


__all__ = [
    "THRESHOLDS", "ExperimentConfig", "FunctionalPlan", "FunctionalValue", "StatisticSample", "SampleSet",
    "subordinator_from_dict", "window_for", "plan_functional", "integrate_functional", "transformed_values",
    "subordinated_mean", "analytic_mean", "normalization", "run_replications", "read_samples_csv",
    "HillEstimate", "hill_estimator", "SlopeFit", "slope_fit", "expected_prefactor", "regime_report",
    "variance_slope", "write_json",
]
