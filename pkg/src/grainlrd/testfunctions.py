"""Test functions in L1 ∩ L∞ used to integrate the grain field.

Every test function knows its L1/L∞ norms, a box outside of which it is
negligible, and its autocorrelation ``A(u) = ∫ φ(t) φ(t + u) dt``.  The
autocorrelation is what the covariance functionals actually consume, so the
closed forms below are the hot path; ``LinearCombination`` falls back to
quadrature (d = 1 only).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .errors import ConfigurationError

TAIL_TOL = 1e-14


def _as_points(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if dim == 1 and x.ndim <= 1:
        return x[..., None]
    return x


def lens_area(rho, dist):
    """Area of the intersection of two discs of radius ``rho`` at distance ``dist``."""
    rho = np.asarray(rho, dtype=float)
    dist = np.abs(np.asarray(dist, dtype=float))
    rho, dist = np.broadcast_arrays(rho, dist)
    out = np.zeros(rho.shape)
    m = dist < 2.0 * rho
    r, s = rho[m], dist[m]
    out[m] = 2.0 * r**2 * np.arccos(s / (2.0 * r)) - 0.5 * s * np.sqrt(
        np.maximum(4.0 * r**2 - s**2, 0.0)
    )
    return out


class TestFunction:
    """Base class; subclasses fill in the closed forms."""

    __test__ = False  # keep pytest from collecting this class
    dim: int
    kind: str = "generic"

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    @property
    def l1_norm(self) -> float:
        raise NotImplementedError

    @property
    def linf_norm(self) -> float:
        raise NotImplementedError

    def support_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Box outside which ``|φ| < TAIL_TOL`` (exact support for indicators)."""
        raise NotImplementedError

    def breakpoints(self) -> list[float]:
        """Kinks/jumps of φ (d = 1), used to split quadrature ranges."""
        lo, hi = self.support_box()
        return [float(lo[0]), float(hi[0])]

    def antiderivative(self, x) -> np.ndarray:
        """``∫_{-∞}^x φ`` for d = 1."""
        raise NotImplementedError

    def autocorrelation(self, u) -> np.ndarray:
        raise NotImplementedError

    def autocorrelation_radius(self) -> float:
        lo, hi = self.support_box()
        return float(np.linalg.norm(hi - lo))

    # linear structure -------------------------------------------------
    def __mul__(self, c: float) -> "LinearCombination":
        return LinearCombination([(float(c), self)])

    __rmul__ = __mul__

    def __add__(self, other: "TestFunction") -> "LinearCombination":
        return LinearCombination([(1.0, self), (1.0, other)])

    def __sub__(self, other: "TestFunction") -> "LinearCombination":
        return LinearCombination([(1.0, self), (-1.0, other)])

    def __neg__(self) -> "LinearCombination":
        return LinearCombination([(-1.0, self)])

    def describe(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True, eq=False)
class BoxIndicator(TestFunction):
    """Indicator of the half-open box ``(lo, hi]``."""

    lo: tuple
    hi: tuple
    kind: str = field(default="rectangle", init=False)

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi) or any(b <= a for a, b in zip(lo, hi)):
            raise ConfigurationError(f"invalid box ({lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def __call__(self, x):
        x = _as_points(x, self.dim)
        inside = np.all((x > np.asarray(self.lo)) & (x <= np.asarray(self.hi)), axis=-1)
        return inside.astype(float)

    @property
    def l1_norm(self):
        return self.volume

    @property
    def linf_norm(self):
        return 1.0

    def support_box(self):
        return np.asarray(self.lo), np.asarray(self.hi)

    def antiderivative(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip(x, self.lo[0], self.hi[0]) - self.lo[0]

    def autocorrelation(self, u):
        u = _as_points(u, self.dim)
        return np.prod(np.clip(self.widths - np.abs(u), 0.0, None), axis=-1)

    def describe(self):
        return {"kind": self.kind, "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True, eq=False)
class BallIndicator(TestFunction):
    center: tuple
    radius: float
    kind: str = field(default="ball", init=False)

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in np.atleast_1d(self.center)))
        if self.radius <= 0:
            raise ConfigurationError("ball radius must be positive")
        if self.dim not in (1, 2):
            raise ConfigurationError("ball indicator supports d = 1, 2")

    @property
    def dim(self):
        return len(self.center)

    @property
    def volume(self):
        return 2.0 * self.radius if self.dim == 1 else math.pi * self.radius**2

    def __call__(self, x):
        x = _as_points(x, self.dim)
        return (np.linalg.norm(x - np.asarray(self.center), axis=-1) <= self.radius).astype(float)

    @property
    def l1_norm(self):
        return self.volume

    @property
    def linf_norm(self):
        return 1.0

    def support_box(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def antiderivative(self, x):
        c = self.center[0]
        return np.clip(np.asarray(x, dtype=float), c - self.radius, c + self.radius) - (c - self.radius)

    def autocorrelation(self, u):
        u = _as_points(u, self.dim)
        dist = np.linalg.norm(u, axis=-1)
        if self.dim == 1:
            return np.clip(2.0 * self.radius - dist, 0.0, None)
        return lens_area(self.radius, dist)

    def describe(self):
        return {"kind": self.kind, "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class GaussianBump(TestFunction):
    """``exp(-|x - center|² / 2 scale²)`` (peak value one)."""

    center: tuple
    scale: float
    kind: str = field(default="gaussian", init=False)

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in np.atleast_1d(self.center)))
        if self.scale <= 0:
            raise ConfigurationError("gaussian scale must be positive")

    @property
    def dim(self):
        return len(self.center)

    def __call__(self, x):
        x = _as_points(x, self.dim)
        r2 = np.sum((x - np.asarray(self.center)) ** 2, axis=-1)
        return np.exp(-0.5 * r2 / self.scale**2)

    @property
    def l1_norm(self):
        return (self.scale * math.sqrt(2.0 * math.pi)) ** self.dim

    @property
    def linf_norm(self):
        return 1.0

    def _reach(self):
        return self.scale * math.sqrt(2.0 * math.log(1.0 / TAIL_TOL))

    def support_box(self):
        c = np.asarray(self.center)
        return c - self._reach(), c + self._reach()

    def breakpoints(self):
        lo, hi = self.support_box()
        return [float(lo[0]), self.center[0], float(hi[0])]

    def antiderivative(self, x):
        z = (np.asarray(x, dtype=float) - self.center[0]) / (self.scale * math.sqrt(2.0))
        return self.scale * math.sqrt(math.pi / 2.0) * (1.0 + special.erf(z))

    def autocorrelation(self, u):
        u = _as_points(u, self.dim)
        s = self.scale
        return (s * math.sqrt(math.pi)) ** self.dim * np.exp(-np.sum(u**2, axis=-1) / (4.0 * s**2))

    def autocorrelation_radius(self):
        return 2.0 * self._reach()

    def describe(self):
        return {"kind": self.kind, "center": list(self.center), "scale": self.scale}


@dataclass(frozen=True, eq=False)
class HeatKernel(TestFunction):
    """``y ↦ g(t, x, y)``, the Gaussian heat kernel with variance ``κ t``."""

    t: float
    x: tuple
    kappa: float
    kind: str = field(default="heat_kernel", init=False)

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        if self.t <= 0 or self.kappa <= 0:
            raise ConfigurationError("heat kernel needs t > 0 and kappa > 0")

    @property
    def dim(self):
        return len(self.x)

    @property
    def var(self):
        return self.kappa * self.t

    def __call__(self, y):
        y = _as_points(y, self.dim)
        r2 = np.sum((np.asarray(self.x) - y) ** 2, axis=-1)
        return (2.0 * math.pi * self.var) ** (-self.dim / 2.0) * np.exp(-0.5 * r2 / self.var)

    @property
    def l1_norm(self):
        return 1.0

    @property
    def linf_norm(self):
        return (2.0 * math.pi * self.var) ** (-self.dim / 2.0)

    def _reach(self):
        return math.sqrt(self.var) * math.sqrt(2.0 * math.log(1.0 / TAIL_TOL))

    def support_box(self):
        c = np.asarray(self.x)
        return c - self._reach(), c + self._reach()

    def breakpoints(self):
        lo, hi = self.support_box()
        return [float(lo[0]), self.x[0], float(hi[0])]

    def antiderivative(self, y):
        z = (np.asarray(y, dtype=float) - self.x[0]) / math.sqrt(2.0 * self.var)
        return 0.5 * (1.0 + special.erf(z))

    def autocorrelation(self, u):
        u = _as_points(u, self.dim)
        s2 = 2.0 * self.var
        return (2.0 * math.pi * s2) ** (-self.dim / 2.0) * np.exp(-0.5 * np.sum(u**2, axis=-1) / s2)

    def autocorrelation_radius(self):
        return 2.0 * self._reach()

    def describe(self):
        return {"kind": self.kind, "t": self.t, "x": list(self.x), "kappa": self.kappa}


@dataclass(frozen=True, eq=False)
class HeatKernelGradient(TestFunction):
    """Component ``i`` of ``y ↦ ∇_x g(t, x, y) = -(x - y)/(κ t) g(t, x, y)``."""

    t: float
    x: tuple
    kappa: float
    component: int = 0
    kind: str = field(default="heat_kernel_gradient", init=False)

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        if self.t <= 0 or self.kappa <= 0:
            raise ConfigurationError("heat kernel needs t > 0 and kappa > 0")
        if not 0 <= self.component < self.dim:
            raise ConfigurationError("gradient component out of range")

    @property
    def dim(self):
        return len(self.x)

    @property
    def var(self):
        return self.kappa * self.t

    @property
    def kernel(self) -> HeatKernel:
        return HeatKernel(self.t, self.x, self.kappa)

    def __call__(self, y):
        y = _as_points(y, self.dim)
        i = self.component
        return -(self.x[i] - y[..., i]) / self.var * self.kernel(y)

    @property
    def l1_norm(self):
        # E|Z_i| / σ² times the other (unit-mass) directions
        return math.sqrt(2.0 / math.pi) / math.sqrt(self.var)

    @property
    def linf_norm(self):
        # attained at |y_i - x_i| = σ on the axis
        s = math.sqrt(self.var)
        return (2.0 * math.pi * self.var) ** (-self.dim / 2.0) * math.exp(-0.5) / s

    def _reach(self):
        return math.sqrt(self.var) * math.sqrt(2.0 * math.log(1.0 / TAIL_TOL) + 4.0)

    def support_box(self):
        c = np.asarray(self.x)
        return c - self._reach(), c + self._reach()

    def breakpoints(self):
        lo, hi = self.support_box()
        return [float(lo[0]), self.x[0], float(hi[0])]

    def antiderivative(self, y):
        # φ = -∂_y g in d = 1
        return -self.kernel(np.asarray(y, dtype=float))

    def autocorrelation(self, u):
        # A = -∂²_{u_i} N(0, 2σ² I)(u)
        u = _as_points(u, self.dim)
        s2 = 2.0 * self.var
        n = (2.0 * math.pi * s2) ** (-self.dim / 2.0) * np.exp(-0.5 * np.sum(u**2, axis=-1) / s2)
        return n * (1.0 / s2 - u[..., self.component] ** 2 / s2**2)

    def autocorrelation_radius(self):
        return 2.0 * self._reach()

    def describe(self):
        return {
            "kind": self.kind,
            "t": self.t,
            "x": list(self.x),
            "kappa": self.kappa,
            "component": self.component,
        }


class LinearCombination(TestFunction):
    """Finite linear combination of test functions (autocorrelation by quadrature, d = 1)."""

    kind = "linear_combination"

    def __init__(self, terms: Sequence[tuple[float, TestFunction]]):
        flat: list[tuple[float, TestFunction]] = []
        for c, f in terms:
            if isinstance(f, LinearCombination):
                flat.extend((c * c2, f2) for c2, f2 in f.terms)
            else:
                flat.append((c, f))
        dims = {f.dim for _, f in flat}
        if len(dims) != 1:
            raise ConfigurationError("mixed dimensions in linear combination")
        self.terms = flat
        self.dim = dims.pop()

    def __call__(self, x):
        return sum(c * f(x) for c, f in self.terms)

    @property
    def linf_norm(self):
        # upper bound; exact value is not needed anywhere
        return sum(abs(c) * f.linf_norm for c, f in self.terms)

    @property
    def l1_norm(self):
        if self.dim != 1:
            return sum(abs(c) * f.l1_norm for c, f in self.terms)
        pts = sorted(set(self.breakpoints()))
        return sum(
            integrate.quad(lambda t: abs(float(self(np.array([t]))[0])), a, b, limit=200)[0]
            for a, b in zip(pts[:-1], pts[1:])
        )

    def support_box(self):
        boxes = [f.support_box() for _, f in self.terms]
        lo = np.min([b[0] for b in boxes], axis=0)
        hi = np.max([b[1] for b in boxes], axis=0)
        return lo, hi

    def breakpoints(self):
        return sorted({p for _, f in self.terms for p in f.breakpoints()})

    def antiderivative(self, x):
        return sum(c * f.antiderivative(x) for c, f in self.terms)

    def autocorrelation_radius(self):
        lo, hi = self.support_box()
        return float(np.linalg.norm(hi - lo))

    def autocorrelation(self, u):
        if self.dim != 1:
            raise ConfigurationError("numeric autocorrelation is implemented for d = 1 only")
        u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(-1)
        bps = self.breakpoints()
        out = np.empty(u.shape)
        for n, uu in enumerate(u):
            pts = sorted({p for b in bps for p in (b, b - uu)})
            f = lambda t: float(self(np.array([t]))[0] * self(np.array([t + uu]))[0])
            out[n] = math.fsum(
                integrate.quad(f, a, b, limit=200, epsabs=1e-13, epsrel=1e-11)[0]
                for a, b in zip(pts[:-1], pts[1:])
            )
        return out

    def describe(self):
        return {"kind": self.kind, "terms": [[c, f.describe()] for c, f in self.terms]}


def from_dict(d: dict) -> TestFunction:
    """Inverse of ``describe``; used by the config layer."""
    kind = d["kind"]
    if kind == "rectangle":
        return BoxIndicator(tuple(d["lo"]), tuple(d["hi"]))
    if kind == "ball":
        return BallIndicator(tuple(d["center"]), float(d["radius"]))
    if kind == "gaussian":
        return GaussianBump(tuple(d["center"]), float(d["scale"]))
    if kind == "heat_kernel":
        return HeatKernel(float(d["t"]), tuple(d["x"]), float(d["kappa"]))
    if kind == "heat_kernel_gradient":
        return HeatKernelGradient(float(d["t"]), tuple(d["x"]), float(d["kappa"]), int(d.get("component", 0)))
    if kind == "linear_combination":
        return LinearCombination([(float(c), from_dict(f)) for c, f in d["terms"]])
    raise ConfigurationError(f"unknown test function kind {kind!r}")
