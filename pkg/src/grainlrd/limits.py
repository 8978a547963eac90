"""Characteristic functions of the Gaussian, stable and intermediate limit laws.

All three laws are laws of linear functionals ``L(φ)`` of a random measure, so a
``LimitLaw`` couples the kind with a grain spec and a test function.  An optional
``prefactor`` ``c`` turns the law of ``L(φ)`` into the law of ``c L(φ)``, which is
how subordinated and Boolean limits are expressed.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, optimize, special

from .errors import ConfigurationError, DegenerateSampleError, NumericalFailure
from .model import QUAD_LIMIT, GrainSpec, c_phi, levy_integral_quadrature, sigma_alpha
from .testfunctions import BallIndicator, BoxIndicator, TestFunction

KINDS = ("GaussianB", "StableL", "IntermediateJ")
GL_NODES = 24
CF_FLOOR = 0.05
JACOBI_ORDERS = (32, 64, 128, 256, 512)
JACOBI_RTOL = 1e-9


def psi(z):
    """``e^{iz} - 1 - iz`` without cancellation for small ``|z|``."""
    z = np.asarray(z, dtype=float)
    re = -2.0 * np.sin(0.5 * z) ** 2
    small = np.abs(z) < 1e-2
    z2 = z * z
    series = -z * z2 / 6.0 * (1.0 - z2 / 20.0 * (1.0 - z2 / 42.0))
    im = np.where(small, series, np.sin(z) - z)
    return re + 1j * im


def _grain_interval(spec: GrainSpec) -> tuple[float, float]:
    """``Ξ⁰ = [a, b]`` in d = 1."""
    return (0.0, 1.0) if spec.shape == "cube" else (-1.0, 1.0)


def power_integrals(phi: TestFunction, alpha: float) -> tuple[float, float]:
    """``(∫|φ|^α, ∫|φ|^α sgn φ)``."""
    if isinstance(phi, (BoxIndicator, BallIndicator)):
        v = phi.volume
        return v, v
    lo, hi = phi.support_box()
    if phi.dim == 1:
        pts = sorted(set(phi.breakpoints()))
        a, b = float(lo[0]), float(hi[0])
        inner = [p for p in pts if a < p < b]

        def f(x, signed):
            v = float(phi(np.array([x]))[0])
            return abs(v) ** alpha * (math.copysign(1.0, v) if signed else 1.0)

        res = []
        for signed in (False, True):
            val, err = integrate.quad(f, a, b, args=(signed,), points=inner or None,
                                      epsabs=1e-13, epsrel=1e-10, limit=QUAD_LIMIT)
            res.append(val)
        return res[0], res[1]
    # d = 2: tensor Gauss-Legendre over the support box, refined until stable
    def rule(n):
        xs, ws = np.polynomial.legendre.leggauss(n)
        gx = 0.5 * (hi[0] - lo[0]) * xs + 0.5 * (hi[0] + lo[0])
        gy = 0.5 * (hi[1] - lo[1]) * xs + 0.5 * (hi[1] + lo[1])
        w = np.outer(ws, ws) * 0.25 * (hi[0] - lo[0]) * (hi[1] - lo[1])
        pts = np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1)
        v = phi(pts)
        a = np.abs(v) ** alpha
        return float(np.sum(w * a)), float(np.sum(w * a * np.sign(v)))

    prev = rule(96)
    cur = rule(192)
    if abs(cur[0] - prev[0]) > 1e-6 * abs(cur[0]):
        raise NumericalFailure("power integral of φ did not converge")
    return cur


@dataclass(frozen=True, eq=False)
class LimitLaw:
    """One of the three limit laws of a linear functional; CF via ``cf``."""

    kind: str
    spec: GrainSpec
    phi: TestFunction
    prefactor: float = 1.0
    r_min: float = 0.0
    log_weight: float = 1.0
    variance: float = field(default=math.nan)
    power_abs: float = field(default=math.nan)
    power_signed: float = field(default=math.nan)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown limit law {self.kind!r}")
        if self.kind == "IntermediateJ" and self.spec.d != 1:
            raise ConfigurationError("the intermediate law is implemented for d = 1 only")
        if self.phi.dim != self.spec.d:
            raise ConfigurationError("test function and grain dimensions differ")

    @classmethod
    def build(cls, kind: str, spec: GrainSpec, phi: TestFunction, prefactor: float = 1.0,
              r_min: float = 0.0, log_weight: float = 1.0) -> "LimitLaw":
        """Precompute the scale constants that the CF needs."""
        kw = {"log_weight": float(log_weight)}
        if kind == "GaussianB":
            kw["variance"] = c_phi(spec, phi)
        elif kind == "StableL":
            kw["power_abs"], kw["power_signed"] = power_integrals(phi, spec.alpha)
        return cls(kind, spec, phi, float(prefactor), float(r_min), **kw)

    def scaled(self, c: float) -> "LimitLaw":
        return replace(self, prefactor=self.prefactor * c)

    def cf(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        fn = {"GaussianB": cf_gaussian, "StableL": cf_stable, "IntermediateJ": cf_intermediate}[self.kind]
        return np.vectorize(lambda t: fn(self, t), otypes=[complex])(theta)

    def describe(self) -> dict:
        return {"kind": self.kind, "spec": self.spec.to_dict(), "phi": self.phi.describe(),
                "prefactor": self.prefactor, "r_min": self.r_min, "log_weight": self.log_weight}


# Gaussian ----------------------------------------------------------------------
def cf_gaussian(law: LimitLaw, theta: float) -> complex:
    s = law.prefactor * theta
    return complex(math.exp(-0.5 * s * s * law.variance))


# stable ------------------------------------------------------------------------
def stable_log_cf(law: LimitLaw, theta: float) -> complex:
    """``-σ_α |θ|^α Leb(Ξ⁰)^α ∫|φ|^α (1 - i sgn(θφ) tan(πα/2))`` at ``θ·prefactor``."""
    s = law.prefactor * theta
    if s == 0:
        return 0j
    a = law.spec.alpha
    scale = sigma_alpha(law.spec) * abs(s) ** a * law.spec.grain_volume ** a
    skew = math.copysign(1.0, s) * math.tan(0.5 * math.pi * a)
    return -scale * complex(law.power_abs, -skew * law.power_signed)


def cf_stable(law: LimitLaw, theta: float) -> complex:
    return complex(np.exp(stable_log_cf(law, theta)))


def stable_log_cf_direct(law: LimitLaw, theta: float) -> complex:
    """Oracle: ``c_f ∫ du ∫ (e^{iθrφL} - 1 - iθrφL) r^{-1-α} dr`` with the r-integral
    done by oscillatory quadrature at every ``u`` (d = 1)."""
    s = law.prefactor * theta
    spec = law.spec
    if spec.d != 1:
        raise ConfigurationError("direct stable oracle is d = 1 only")
    lo, hi = law.phi.support_box()
    inner = [p for p in law.phi.breakpoints() if lo[0] < p < hi[0]]
    L = spec.grain_volume

    def part(u, which):
        v = float(law.phi(np.array([u]))[0])
        if v == 0.0:
            return 0.0
        z = levy_integral_quadrature(spec.alpha, spec.c_f, s * L * v)
        return z.real if which == 0 else z.imag

    re, _ = integrate.quad(part, lo[0], hi[0], args=(0,), points=inner or None, limit=200, epsrel=1e-9)
    im, _ = integrate.quad(part, lo[0], hi[0], args=(1,), points=inner or None, limit=200, epsrel=1e-9)
    return complex(re, im)


# intermediate ------------------------------------------------------------------
def _gl_pieces(edges: np.ndarray, n: int = GL_NODES) -> tuple[np.ndarray, np.ndarray]:
    xs, ws = np.polynomial.legendre.leggauss(n)
    a, b = edges[:-1, None], edges[1:, None]
    half = 0.5 * (b - a)
    return (half * xs + 0.5 * (a + b)).ravel(), (half * ws).ravel()


class _JKernel:
    """``K(u, r) = ∫φ(t) 1(t - u ∈ rΞ⁰) dt = Φ(u + rb) - Φ(u + ra)`` and its u-integrals."""

    def __init__(self, law: LimitLaw):
        self.law = law
        self.a, self.b = _grain_interval(law.spec)
        lo, hi = law.phi.support_box()
        self.s0, self.s1 = float(lo[0]), float(hi[0])
        bp = sorted({self.s0, self.s1, *[p for p in law.phi.breakpoints() if self.s0 <= p <= self.s1]})
        self.bp = np.asarray(bp)
        self.Phi0 = float(law.phi.antiderivative(np.array([self.s0]))[0])
        self.total = float(law.phi.antiderivative(np.array([self.s1]))[0]) - self.Phi0

    def Phi(self, v):
        return self.law.phi.antiderivative(np.clip(v, self.s0, self.s1)) - self.Phi0

    def F(self, r: float, theta: float) -> complex:
        """``∫ Ψ(θ K(u, r)) du``."""
        # u-breakpoints: either grain end crossing a breakpoint of φ
        edges = np.unique(np.concatenate([self.bp - r * self.b, self.bp - r * self.a]))
        x, w = _gl_pieces(edges)
        k = self.Phi(x + r * self.b) - self.Phi(x + r * self.a)
        return complex(np.sum(w * psi(theta * k)))

    def r_star(self) -> float:
        """Grain scale beyond which ``F`` is affine in ``r``."""
        return (self.s1 - self.s0) / (self.b - self.a)

    def edge_constant(self, theta: float) -> complex:
        x, w = _gl_pieces(self.bp)
        P = self.Phi(x)
        return complex(np.sum(w * (psi(theta * P) + psi(theta * (self.total - P)))))


def _jacobi_head(ker: _JKernel, theta: float, alpha: float, upper: float, atol: float = 0.0) -> complex:
    """``∫_0^upper F(r) r^{-1-α} dr`` by Gauss-Jacobi on ``F(r)/r²`` with weight ``r^{1-α}``.

    The node count doubles until two successive rules agree to ``JACOBI_RTOL``
    (or to ``atol``, for pieces that are subtracted from a larger integral).
    """
    prev = None
    for n in JACOBI_ORDERS:
        x, w = _jacobi_rule(n, alpha)
        r = 0.5 * upper * (1.0 + x)
        vals = np.array([ker.F(ri, theta) for ri in r]) / (r * r)
        cur = (0.5 * upper) ** (2.0 - alpha) * complex(np.sum(w * vals))
        if prev is not None and abs(cur - prev) <= max(JACOBI_RTOL * abs(cur), atol, 1e-300):
            return cur
        prev = cur
    raise NumericalFailure(f"Gauss-Jacobi head integral did not settle (θ={theta})")


def _panel_integral(ker: _JKernel, theta: float, alpha: float, lo: float, hi: float) -> complex:
    """``∫_lo^hi F(r) r^{-1-α} dr`` on panels shorter than a quarter oscillation."""
    step = 0.5 * math.pi / abs(theta)
    edges = np.unique(np.concatenate([np.geomspace(lo, hi, 8), np.arange(lo, hi, step), [hi]]))
    prev = None
    for n in (16, 24, 40):
        x, w = _gl_pieces(edges, n)
        vals = np.array([ker.F(ri, theta) for ri in x]) * x ** (-1.0 - alpha)
        cur = complex(np.sum(w * vals))
        if prev is not None and abs(cur - prev) <= JACOBI_RTOL * max(abs(cur), 1e-300):
            return cur
        prev = cur
    raise NumericalFailure(f"panelled head integral did not settle (θ={theta})")


def _head_integral(ker: _JKernel, theta: float, alpha: float, lo: float, hi: float) -> complex:
    """``∫_lo^hi F(r) r^{-1-α} dr`` for ``0 <= lo < hi``."""
    split = min(hi, 4.0 / abs(theta))
    out = 0j
    if lo < split:
        out += _jacobi_head(ker, theta, alpha, split)
        if lo > 0:
            out -= _jacobi_head(ker, theta, alpha, lo, atol=JACOBI_RTOL * abs(out))
    if split < hi:
        out += _panel_integral(ker, theta, alpha, max(lo, split), hi)
    return out


@lru_cache(maxsize=32)
def _jacobi_rule(n: int, alpha: float):
    return special.roots_jacobi(n, 0.0, 1.0 - alpha)


def intermediate_log_cf(law: LimitLaw, theta: float) -> complex:
    """``c_f ∫_{r_min}^∞ ∫ Ψ(θ K(u, r)) du r^{-1-α} dr`` (d = 1).

    Past ``r*`` (grain longer than the support) ``F(r) = (|Ξ⁰| r - |supp|) Ψ(θ∫φ) + E(θ)``
    and the r-integral is closed form.  Below ``r*`` the integrand behaves like
    ``r^{1-α}`` near zero (Gauss-Jacobi on ``F(r)/r²``) and oscillates with period
    about ``2π/|θ|`` further out (panelled Gauss-Legendre).
    ``r_min > 0`` gives the finite-λ law, whose marks start at ``r0/λ``.
    """
    s = law.prefactor * theta
    if s == 0:
        return 0j
    spec = law.spec
    a = spec.alpha
    ker = _JKernel(law)
    r_star = ker.r_star()
    r_lo = law.r_min

    head = 0j
    if r_lo < r_star:
        head = _head_integral(ker, s, a, r_lo, r_star)
    start = max(r_star, r_lo)
    width = ker.b - ker.a
    supp = ker.s1 - ker.s0
    psi_total = complex(psi(s * ker.total))
    E = ker.edge_constant(s)
    tail = (width * psi_total * start ** (1.0 - a) / (a - 1.0)
            + (E - supp * psi_total) * start ** (-a) / a)
    out = law.log_weight * spec.c_f * (head + tail)
    if not np.isfinite(out):
        raise NumericalFailure("intermediate log-CF quadrature failed")
    return out


def cf_intermediate(law: LimitLaw, theta: float) -> complex:
    return complex(np.exp(intermediate_log_cf(law, theta)))


def finite_lambda_law(spec: GrainSpec, phi: TestFunction, lam: float, M: float, H: float,
                      prefactor: float = 1.0) -> LimitLaw:
    """Exact law of ``λ^{-H}(X_{λ,M}(φ) - E X_{λ,M}(φ))`` in d = 1 (continuum, no grid).

    Rescaling ``t = λs``, ``u = λu'``, ``r = λr'`` turns the Poisson log-CF into the
    intermediate form with weight ``M λ^{1-α}``, argument ``θ λ^{1-H}`` and marks
    starting at ``r0/λ``.  Used as a diagnostic of finite-λ distance to the limits.
    """
    if spec.d != 1:
        raise ConfigurationError("finite-λ law is implemented for d = 1 only")
    return LimitLaw.build("IntermediateJ", spec, phi, prefactor=prefactor * lam ** (1.0 - H),
                          r_min=spec.r0 / lam, log_weight=M * lam ** (1.0 - spec.alpha))


# empirical CF and distances ----------------------------------------------------
def empirical_cf(samples, theta) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return np.exp(1j * np.multiply.outer(theta, x)).mean(axis=-1)


def theta_clusters(law: LimitLaw, levels=(0.9, 0.75, 0.55, 0.35, 0.15), spread: float = 0.1,
                   per_cluster: int = 3) -> list[np.ndarray]:
    """Positive θ clusters centred where ``|CF|`` takes the given levels."""
    def modulus(t):
        return abs(law.cf(t).item())

    out = []
    for level in levels:
        hi = 1.0
        while modulus(hi) > level:
            hi *= 2.0
            if hi > 1e6:
                raise NumericalFailure("target CF does not decay")
        lo = 0.0
        while lo == 0.0 or modulus(lo) < level:
            lo = 0.5 * hi if lo == 0.0 else 0.5 * lo
        c = optimize.brentq(lambda t: modulus(t) - level, lo, hi, xtol=1e-8 * hi)
        out.append(c * np.linspace(1.0 - spread, 1.0 + spread, per_cluster))
    return out


@dataclass
class CFDistance:
    theta: np.ndarray
    empirical: np.ndarray
    target: np.ndarray
    distance: float
    band: float
    cluster_distances: np.ndarray
    cluster_bands: np.ndarray
    min_clusters: int = 3

    @property
    def clusters_passed(self) -> int:
        return int(np.sum(self.cluster_distances <= self.cluster_bands))

    @property
    def passed(self) -> bool:
        return self.clusters_passed >= self.min_clusters

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "ecf_re": self.empirical.real.tolist(),
            "ecf_im": self.empirical.imag.tolist(),
            "target_re": self.target.real.tolist(),
            "target_im": self.target.imag.tolist(),
            "distance": self.distance,
            "band": self.band,
            "cluster_distances": self.cluster_distances.tolist(),
            "cluster_bands": self.cluster_bands.tolist(),
            "clusters_passed": self.clusters_passed,
            "passed": self.passed,
        }


def cf_distance(samples, law: LimitLaw, clusters=None, n_boot: int = 500, seed: int = 0,
                level: float = 0.95, min_clusters: int = 3, min_samples: int = 500) -> CFDistance:
    """Sup distance between empirical and target CF per θ-cluster, with a bootstrap band.

    The band for a cluster is the ``level`` quantile of ``sup_θ |ECF*(θ) - ECF(θ)|``
    over bootstrap resamples; the cluster passes when the observed distance lies
    inside it.  Every cluster is evaluated at ``±θ``.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < min_samples:
        raise DegenerateSampleError(f"need at least {min_samples} samples, got {x.size}")
    if clusters is None:
        clusters = theta_clusters(law)
    clusters = [np.asarray(c, dtype=float) for c in clusters]
    sym = [np.concatenate([-c[::-1], c]) for c in clusters]
    theta = np.concatenate(sym)
    target = law.cf(theta)
    if np.any(np.abs(target) < CF_FLOOR):
        raise ConfigurationError(f"θ-grid reaches |CF| < {CF_FLOOR}")
    E = np.exp(1j * np.multiply.outer(x, theta))  # (n, T)
    ecf = E.mean(axis=0)
    rng = np.random.Generator(np.random.Philox(seed))
    counts = rng.multinomial(x.size, np.full(x.size, 1.0 / x.size), size=n_boot).astype(float)
    boot = counts @ E / x.size  # (B, T)
    dev = np.abs(boot - ecf)
    err = np.abs(ecf - target)
    bounds = np.cumsum([0] + [s.size for s in sym])
    dists, bands = [], []
    for i in range(len(sym)):
        sl = slice(bounds[i], bounds[i + 1])
        dists.append(err[sl].max())
        bands.append(np.quantile(dev[:, sl].max(axis=1), level))
    return CFDistance(theta, ecf, target, float(err.max()), float(np.quantile(dev.max(axis=1), level)),
                      np.asarray(dists), np.asarray(bands), min_clusters)


@dataclass
class PrefactorFit:
    prefactor: float
    gaussian_part: float
    theta: np.ndarray
    residual: float


def fit_stable_prefactor(samples, law: LimitLaw, levels=(0.9, 0.15), n_theta: int = 24) -> PrefactorFit:
    """Estimate ``c`` in ``samples ≈ c L_α(φ)`` from the empirical CF modulus.

    Fits ``-log|ECF(θ)| = A|θ|^α + Bθ²`` (``A, B >= 0``) on θ where the unit-prefactor
    target modulus runs between ``levels``; the quadratic term absorbs a Gaussian
    nuisance component.  ``c = (A / A_1)^{1/α}`` with ``A_1`` the unit-law coefficient.
    """
    if law.kind != "StableL":
        raise ConfigurationError("prefactor fit needs a stable law")
    unit = replace(law, prefactor=1.0)
    a = law.spec.alpha
    A1 = -stable_log_cf(unit, 1.0).real
    x = np.asarray(samples, dtype=float)
    scale = np.std(x)
    if not scale > 0:
        raise DegenerateSampleError("samples are constant")
    # θ range chosen on the empirical modulus so the fit sees the data's own scale
    grid = np.geomspace(1e-3, 1e3, 2000) / scale
    mod = np.abs(empirical_cf(x, grid))
    inside = (mod <= levels[0]) & (mod >= levels[1])
    if inside.sum() < 2:
        raise DegenerateSampleError("empirical CF modulus never falls in the fitting band")
    first = np.argmax(inside)
    last = first + np.argmin(inside[first:]) if not inside[first:].all() else grid.size
    theta = np.geomspace(grid[first], grid[max(last - 1, first + 1)], n_theta)
    y = -np.log(np.abs(empirical_cf(x, theta)))
    X = np.column_stack([theta**a, theta**2])
    coef, res = optimize.nnls(X, y)
    return PrefactorFit(float((coef[0] / A1) ** (1.0 / a)), float(coef[1]), theta, float(res))


def hermitian_defect(law: LimitLaw, theta) -> float:
    """``max |CF(-θ) - conj CF(θ)|``."""
    theta = np.asarray(theta, dtype=float)
    return float(np.max(np.abs(law.cf(-theta) - np.conj(law.cf(theta)))))


__all__ = [
    "KINDS", "LimitLaw", "psi", "power_integrals", "cf_gaussian", "cf_stable", "stable_log_cf",
    "stable_log_cf_direct", "intermediate_log_cf", "cf_intermediate", "finite_lambda_law", "empirical_cf",
    "theta_clusters", "CFDistance", "cf_distance", "PrefactorFit", "fit_stable_prefactor",
    "hermitian_defect",
]
