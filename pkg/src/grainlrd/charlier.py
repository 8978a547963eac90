"""Charlier calculus on Poisson laws.

Polynomials ``P_k(x; μ)`` are generated by the three-term recurrence

    P_{k+1} = (x - μ - k) P_k - k μ P_{k-1},   P_0 = 1,  P_1 = x - μ,

which follows from ``(1+u) ∂_u P(u) = (x - (1+u)μ) P(u)`` for the generating
function ``(1+u)^x e^{-uμ}``.  Where values can grow like ``√(k! μ^k)`` we work
with the orthonormal versions ``q_k = P_k / √(k! μ^k)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .errors import IllConditionedError, NumericalFailure, UndefinedRankError

RANK_TOL = 1e-10


def poisson_logpmf(x, mu: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if mu == 0:
        return np.where(x == 0, 0.0, -np.inf)
    return x * math.log(mu) - mu - special.gammaln(x + 1.0)


def poisson_pmf(x, mu: float) -> np.ndarray:
    return np.exp(poisson_logpmf(x, mu))


def truncation_range(mu: float) -> tuple[int, int]:
    """Support window holding all but ~1e-12 of the Poisson(μ) mass."""
    spread = 12.0 * math.sqrt(mu) + 40.0
    return max(0, int(math.floor(mu - spread))), int(math.ceil(mu + spread))


def _fsum(a) -> float:
    return math.fsum(np.asarray(a, dtype=float).ravel())


@dataclass(frozen=True)
class Subordinator:
    """A function ``G`` with declared exponential growth bound ``|G(x)| <= C1 e^{C2 |x|}``."""

    fn: Callable[[np.ndarray], np.ndarray]
    C1: float = math.inf
    C2: float = 0.0
    name: str = "G"

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def check_growth(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(np.abs(self(x)) <= self.C1 * np.exp(self.C2 * np.abs(x)) * (1 + 1e-12)))


def identity() -> Subordinator:
    return Subordinator(lambda x: x, 1.0, 1.0, "identity")


def exponential(a: float) -> Subordinator:
    return Subordinator(lambda x: np.exp(a * x), 1.0, abs(a), f"exp({a}x)")


def boolean_indicator() -> Subordinator:
    return Subordinator(lambda x: np.minimum(x, 1.0), 1.0, 1.0, "min(x,1)")


@dataclass(frozen=True)
class CharlierBasis:
    """Charlier polynomials up to order ``K`` on the truncated Poisson(μ) support."""

    mu: float
    K: int = 8
    x_lo: int = field(init=False)
    x_max: int = field(init=False)

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        lo, hi = truncation_range(self.mu)
        object.__setattr__(self, "x_lo", lo)
        object.__setattr__(self, "x_max", hi)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.x_lo, self.x_max + 1)

    @property
    def pmf(self) -> np.ndarray:
        return poisson_pmf(self.x, self.mu)

    def polys(self, x=None) -> np.ndarray:
        """``P_k(x; μ)`` for ``k = 0..K``; shape ``(K+1,) + x.shape``."""
        x = self.x if x is None else np.asarray(x, dtype=float)
        return charlier_table(self.mu, self.K, x)

    def orthonormal(self, x=None) -> np.ndarray:
        x = self.x if x is None else np.asarray(x, dtype=float)
        return orthonormal_table(self.mu, self.K, x)

    def norms(self) -> np.ndarray:
        """``E P_k(N)^2 = k! μ^k``."""
        k = np.arange(self.K + 1)
        return np.exp(special.gammaln(k + 1.0) + k * math.log(self.mu))


def charlier_table(mu: float, K: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty((K + 1,) + x.shape)
    out[0] = 1.0
    if K >= 1:
        out[1] = x - mu
    for k in range(1, K):
        out[k + 1] = (x - mu - k) * out[k] - k * mu * out[k - 1]
    return out


def orthonormal_table(mu: float, K: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty((K + 1,) + x.shape)
    out[0] = 1.0
    if K >= 1:
        out[1] = (x - mu) / math.sqrt(mu)
    for k in range(1, K):
        out[k + 1] = ((x - mu - k) * out[k] - math.sqrt(k * mu) * out[k - 1]) / math.sqrt((k + 1) * mu)
    return out


def charlier_poly(basis: CharlierBasis, k: int, x) -> np.ndarray:
    if not 0 <= k <= basis.K:
        raise ValueError(f"order {k} outside 0..{basis.K}")
    return charlier_table(basis.mu, k, x)[k]


def _g_values(basis: CharlierBasis, G, x) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        g = np.asarray(G(np.asarray(x, dtype=float)), dtype=float)
    if not np.all(np.isfinite(g)):
        raise NumericalFailure("subordinator overflowed on the truncation range")
    return g


def charlier_coeff_proj(basis: CharlierBasis, G) -> np.ndarray:
    """``c_G(k; μ) = μ^{-k} E G(N) P_k(N; μ)`` for ``k = 0..K``."""
    x, p = basis.x, basis.pmf
    g = _g_values(basis, G, x)
    P = basis.polys()
    with np.errstate(over="ignore", invalid="ignore"):
        terms = g * P * p
    if not np.all(np.isfinite(terms)):
        raise NumericalFailure("G·P_k overflowed")
    return np.array([_fsum(terms[k]) / basis.mu**k for k in range(basis.K + 1)])


def charlier_coeff_diff(basis: CharlierBasis, G) -> np.ndarray:
    """``c_G(k; μ) = E D_+^k G(N)`` with the forward difference ``D_+``."""
    x = np.arange(basis.x_lo, basis.x_max + basis.K + 1)
    g = _g_values(basis, G, x)
    p = basis.pmf
    n = p.size
    out = np.empty(basis.K + 1)
    diff = g
    for k in range(basis.K + 1):
        out[k] = _fsum(diff[:n] * p)
        diff = np.diff(diff)
    return out


def second_moment(basis: CharlierBasis, G) -> float:
    g = _g_values(basis, G, basis.x)
    return _fsum(g * g * basis.pmf)


def charlier_rank(basis: CharlierBasis, G, coeffs=None) -> int:
    """Smallest ``k >= 1`` with ``c_G(k) != 0`` relative to the bound ``√(k!/μ^k E G²)``."""
    c = charlier_coeff_proj(basis, G) if coeffs is None else np.asarray(coeffs)
    scale = math.sqrt(second_moment(basis, G))
    k = np.arange(c.size)
    bound = scale * np.sqrt(np.exp(special.gammaln(k + 1.0) - k * math.log(basis.mu)))
    for kk in range(1, c.size):
        if abs(c[kk]) > RANK_TOL * bound[kk]:
            return kk
    raise UndefinedRankError(f"all Charlier coefficients up to order {c.size - 1} vanish")


# bivariate Poisson -------------------------------------------------------------
@dataclass(frozen=True)
class BivariatePoisson:
    """``(N1, N2) = (M1 + M3, M2 + M3)`` with independent Poisson ``M_i``."""

    mu1: float
    mu2: float
    mu3: float

    def __post_init__(self):
        if self.mu1 <= 0 or self.mu2 <= 0:
            raise ValueError("marginal means must be positive")
        if not 0 <= self.mu3 < min(self.mu1, self.mu2):
            raise ValueError("need 0 <= mu3 < min(mu1, mu2)")

    @property
    def rho(self) -> float:
        return self.mu3 / math.sqrt(self.mu1 * self.mu2)


def bivariate_pmf_direct(biv: BivariatePoisson, x, y) -> np.ndarray:
    """``P(N1 = x, N2 = y)`` by the convolution over the common part ``M3``."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    x, y = np.broadcast_arrays(x, y)
    out = np.zeros(x.shape)
    top = int(np.minimum(x, y).max(initial=0))
    m = np.arange(top + 1)
    lm3 = poisson_logpmf(m, biv.mu3)
    for idx in np.ndindex(x.shape):
        xi, yi = int(x[idx]), int(y[idx])
        mm = m[: min(xi, yi) + 1]
        logs = (lm3[: mm.size]
                + poisson_logpmf(xi - mm, biv.mu1 - biv.mu3)
                + poisson_logpmf(yi - mm, biv.mu2 - biv.mu3))
        out[idx] = _fsum(np.exp(logs))
    return out


def _pmf_mu_derivatives(mu: float, K: int, top: int) -> np.ndarray:
    """``∂_μ^k p(x; μ) = μ^{-k} p(x; μ) P_k(x; μ)`` for ``x = 0..top``.

    Uses ``∂_μ p(x) = p(x-1) - p(x)``.  Unlike the forward polynomial recurrence,
    repeated differencing of the pmf stays accurate where ``P_k`` is the minimal
    solution (small ``x``, large ``k``).
    """
    out = np.empty((K + 1, top + 1))
    out[0] = poisson_pmf(np.arange(top + 1), mu)
    for k in range(K):
        prev = out[k]
        out[k + 1] = -prev
        out[k + 1, 1:] += prev[:-1]
    return out


def mehler_pmf(biv: BivariatePoisson, x, y, K: int, return_bound: bool = False):
    """Mehler expansion of the bivariate pmf, truncated after order ``K``.

    ``p(x, y) = p(x; μ1) p(y; μ2) Σ_k ρ^k q_k(x; μ1) q_k(y; μ2)`` with orthonormal
    ``q_k``; equivalently ``Σ_k μ3^k / k! · ∂^k p(x; μ1) ∂^k p(y; μ2)``, which is
    the form evaluated here.  Since
    ``|q_k(x)| <= p(x)^{-1/2}``, the dropped tail is at most
    ``√(p(x)p(y)) ρ^{K+1} / (1 - ρ)``.
    """
    if K < 0:
        raise ValueError("K must be nonnegative")
    rho = biv.rho
    if rho >= 1.0 - 1e-6:
        raise IllConditionedError(f"correlation {rho} too close to one")
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    x, y = np.broadcast_arrays(x, y)
    if x.size and min(x.min(), y.min()) < 0:
        raise ValueError("counts must be nonnegative")
    top = int(max(x.max(initial=0), y.max(initial=0)))
    dx = _pmf_mu_derivatives(biv.mu1, K, top)
    dy = _pmf_mu_derivatives(biv.mu2, K, top)
    k = np.arange(K + 1)
    with np.errstate(divide="ignore"):
        w = np.exp(k * math.log(biv.mu3) - special.gammaln(k + 1.0)) if biv.mu3 > 0 else (k == 0).astype(float)
    val = np.einsum("k,k...,k...->...", w, dx[:, x], dy[:, y])
    px, py = poisson_pmf(x, biv.mu1), poisson_pmf(y, biv.mu2)
    if return_bound:
        bound = np.sqrt(px * py) * rho ** (K + 1) / (1.0 - rho)
        return val, bound
    return val


def mehler_order(rho: float, norm_bound: float = 1.0, tol: float = 1e-12) -> int:
    """Smallest ``K`` with ``ρ^{K+1} / (1 - ρ) · norm_bound < tol``."""
    if rho <= 0:
        return 0
    if rho >= 1.0 - 1e-6:
        raise IllConditionedError(f"correlation {rho} too close to one")
    return max(0, math.ceil(math.log(tol * (1.0 - rho) / norm_bound) / math.log(rho)) - 1)


def cross_moments(biv: BivariatePoisson, K: int) -> np.ndarray:
    """``E P_k(N1; μ1) P_l(N2; μ2)`` under the direct joint pmf, ``k, l = 0..K``."""
    lo1, hi1 = truncation_range(biv.mu1)
    lo2, hi2 = truncation_range(biv.mu2)
    xs, ys = np.arange(lo1, hi1 + 1), np.arange(lo2, hi2 + 1)
    joint = bivariate_pmf_direct(biv, xs[:, None], ys[None, :])
    Px = charlier_table(biv.mu1, K, xs)
    Py = charlier_table(biv.mu2, K, ys)
    out = np.empty((K + 1, K + 1))
    for k in range(K + 1):
        for l in range(K + 1):
            out[k, l] = _fsum(Px[k][:, None] * Py[l][None, :] * joint)
    return out


@dataclass(frozen=True)
class CovarianceSeries:
    value: float
    truncation_bound: float
    k_star: int
    leading: float
    remainder: float
    remainder_bound: float
    terms: np.ndarray


def covariance_subordinated(biv: BivariatePoisson, G1, G2, K: int = 40) -> CovarianceSeries:
    """``Cov(G1(N1), G2(N2)) = Σ_{k>=1} c_{G1}(k; μ1) c_{G2}(k; μ2) μ3^k / k!``.

    Also returns the split at the Charlier rank ``k*`` (leading term plus
    remainder) with the geometric remainder bound and the bound on the terms
    dropped past ``K``.
    """
    b1, b2 = CharlierBasis(biv.mu1, K), CharlierBasis(biv.mu2, K)
    c1, c2 = charlier_coeff_proj(b1, G1), charlier_coeff_proj(b2, G2)
    k = np.arange(K + 1)
    log_w = np.where(k > 0, k * math.log(biv.mu3) if biv.mu3 > 0 else -np.inf, 0.0) - special.gammaln(k + 1.0)
    terms = c1 * c2 * np.exp(log_w)
    terms[0] = 0.0
    value = _fsum(terms[1:])
    rho = biv.rho
    norm = math.sqrt(second_moment(b1, G1) * second_moment(b2, G2))
    trunc = rho ** (K + 1) / (1.0 - rho) * norm if rho < 1 else math.inf
    try:
        k_star = max(charlier_rank(b1, G1, c1), charlier_rank(b2, G2, c2))
    except UndefinedRankError:
        return CovarianceSeries(value, trunc, 0, 0.0, value, trunc, terms)
    leading = float(terms[k_star])
    rem_bound = rho ** (k_star + 1) / (1.0 - rho) * norm
    return CovarianceSeries(value, trunc, k_star, leading, value - leading, rem_bound, terms)


def sample_bivariate(biv: BivariatePoisson, seed: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(int(seed)))
    m1 = rng.poisson(biv.mu1 - biv.mu3, n)
    m2 = rng.poisson(biv.mu2 - biv.mu3, n)
    m3 = rng.poisson(biv.mu3, n)
    return np.column_stack([m1 + m3, m2 + m3])


def inar1_transition(mu: float, mu3: float, x, y) -> np.ndarray:
    """Poisson INAR(1) transition ``p(y | x) = p(x, y; μ, μ, μ3) / p(x; μ)``."""
    biv = BivariatePoisson(mu, mu, mu3)
    return bivariate_pmf_direct(biv, x, y) / poisson_pmf(x, mu)


# Hermite side --------------------------------------------------------------------
def _gauss_expectation(fn, mu: float, n: int) -> float:
    z, w = np.polynomial.hermite_e.hermegauss(n)
    vals = fn(math.sqrt(mu) * z)
    return _fsum(w * vals) / math.sqrt(2.0 * math.pi)


def hermite_h1(G, mu: float, n_nodes: int = 128) -> float:
    """``h_{G,μ}(1) = μ^{-1} E[G(Z_μ) Z_μ]`` with ``Z_μ ~ N(0, μ)`` (Gauss-Hermite)."""
    if n_nodes < 64:
        raise ValueError("use at least 64 Gauss-Hermite nodes")
    second = _gauss_expectation(lambda z: np.asarray(G(z), dtype=float) ** 2, mu, n_nodes)
    if not np.isfinite(second):
        raise NumericalFailure("E G(Z)^2 is not finite")
    fine = _gauss_expectation(lambda z: np.asarray(G(z), dtype=float) * z, mu, n_nodes) / mu
    coarse = _gauss_expectation(lambda z: np.asarray(G(z), dtype=float) * z, mu, n_nodes // 2) / mu
    if abs(fine - coarse) > 1e-6 * max(1.0, abs(fine)):
        raise NumericalFailure(f"Gauss-Hermite rule not converged ({coarse} vs {fine})")
    return fine


def hermite_h1_adaptive(G, mu: float) -> float:
    """Same quantity by adaptive quadrature against the normal density (for non-smooth G)."""
    from scipy import integrate

    s = math.sqrt(mu)
    f = lambda z: float(G(np.array([s * z]))[0]) * s * z * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    val, _ = integrate.quad(f, -40.0, 40.0, points=[0.0], limit=500, epsabs=1e-13, epsrel=1e-12)
    return val / mu


@dataclass(frozen=True)
class CoefficientLimit:
    M: np.ndarray
    scaled_c1: np.ndarray
    h1: float

    @property
    def distance(self) -> np.ndarray:
        return np.abs(self.scaled_c1 - self.h1)


def scaled_first_coefficient(G, mu: float, M: float) -> float:
    """``√M c_{G,M}(1)`` for ``G_M(x) = G((x - μM)/√M)`` by exact truncated Poisson sums."""
    nu = mu * M
    lo, hi = truncation_range(nu)
    x = np.arange(lo, hi + 1, dtype=float)
    p = poisson_pmf(x, nu)
    g = np.asarray(G((x - nu) / math.sqrt(M)), dtype=float)
    return math.sqrt(M) * _fsum(g * (x - nu) * p) / nu


def coeff_limit_check(G, mu: float, M_list, h1: float | None = None) -> CoefficientLimit:
    M = np.asarray(M_list, dtype=float)
    seq = np.array([scaled_first_coefficient(G, mu, m) for m in M])
    if h1 is None:
        try:
            h1 = hermite_h1(G, mu)
        except NumericalFailure:
            h1 = hermite_h1_adaptive(G, mu)
    return CoefficientLimit(M, seq, float(h1))


def exponential_scaled_c1(a: float, mu: float, M: float) -> float:
    """Closed form of ``√M c_{G,M}(1)`` for ``G(x) = e^{ax}``."""
    s = a / math.sqrt(M)
    return math.exp((math.expm1(s) - s) * mu * M) * math.sqrt(M) * math.expm1(s)


def exponential_mean(a: float, mu: float, M: float = 1.0) -> float:
    """``E exp(a (N - μM)/√M)`` for ``N ~ Poisson(μM)``."""
    s = a / math.sqrt(M)
    return math.exp((math.expm1(s) - s) * mu * M)


# invariant suite -----------------------------------------------------------------
@dataclass(frozen=True)
class InvariantResult:
    name: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.deviation) and self.deviation < self.tolerance)

    def to_dict(self) -> dict:
        return {"name": self.name, "deviation": self.deviation, "tolerance": self.tolerance, "passed": self.passed}


def invariant_suite(mus=(0.5, 3.0, 10.0), K: int = 8, mehler=(3.0, 3.0, 1.5), x_max: int = 30,
                    a: float = 0.5, mu_closed: float = 3.0, M_limit: float = 1e6, fault: float = 0.0) -> list[InvariantResult]:
    """Exactness checks of the Charlier calculus, each reported as a max deviation.

    ``fault`` multiplies the projected coefficient ``c(1)`` by ``1 + fault`` before
    comparison; it exists so the suite can be shown to fail (negative control).
    """
    out = []
    orth = 0.0
    for mu in mus:
        b = CharlierBasis(mu, K)
        P = b.polys()
        gram = np.einsum("kx,lx,x->kl", P, P, b.pmf)
        orth = max(orth, float(np.max(np.abs(gram - np.diag(b.norms())) / b.norms()[:, None])))
    out.append(InvariantResult("orthogonality", orth, 1e-8))

    biv = BivariatePoisson(*mehler)
    xs = np.arange(x_max + 1)
    K_m = mehler_order(biv.rho, tol=1e-16)
    direct = bivariate_pmf_direct(biv, xs[:, None], xs[None, :])
    series = mehler_pmf(biv, xs[:, None], xs[None, :], K_m)
    out.append(InvariantResult("mehler_vs_direct", float(np.max(np.abs(series - direct))), 1e-10))

    G = exponential(a)
    b = CharlierBasis(mu_closed, K)
    proj = charlier_coeff_proj(b, G)
    proj[1] *= 1.0 + fault
    diff = charlier_coeff_diff(b, G)
    out.append(InvariantResult("projection_vs_difference", float(np.max(np.abs(proj - diff) / np.abs(diff))), 1e-9))

    k = np.arange(7)
    closed = math.expm1(a) ** k * math.exp(math.expm1(a) * mu_closed)
    out.append(InvariantResult("exponential_closed_form", float(np.max(np.abs(proj[:7] - closed) / closed)), 1e-9))

    kb = np.arange(1, 7)
    cmin = charlier_coeff_proj(CharlierBasis(mu_closed, 6), boolean_indicator())[1:]
    target = (-1.0) ** (kb + 1) * math.exp(-mu_closed)
    out.append(InvariantResult("min_closed_form", float(np.max(np.abs(cmin - target) / np.abs(target))), 1e-9))

    h1 = a * math.exp(a * a * mu_closed / 2.0)
    scaled = scaled_first_coefficient(G, mu_closed, M_limit) * (1.0 + fault)
    out.append(InvariantResult("scaled_first_coefficient", abs(scaled - h1), 1e-3))
    return out
