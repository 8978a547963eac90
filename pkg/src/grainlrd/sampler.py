"""Exact simulation of the window-restricted Poisson grain process.

Only grains that can touch the observation window are drawn.  Their intensity
``M du f(r) dr`` restricted to ``{(u, r): (u + r^{1/d}Ξ⁰) ∩ W ≠ ∅}`` has total
mass ``M ∫ Leb_d(W ⊕ r^{1/d}Ξ̌⁰) f(r) dr``.  For box windows the Minkowski volume is
a polynomial in ``ρ = r^{1/d}`` (Steiner formula), so the tilted mark law is a
finite mixture of Pareto laws with indices ``α - s`` and can be drawn exactly:
no radius cap, no truncation bias.

Per grain the draw consumes, in this order, one uniform for the mixture
component, one for the mark, and ``d`` for the germ (ball grains in d = 2
redraw the germ pair on rejection).
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, IntegrityError
from .model import GrainSpec, mean_mu


@dataclass(frozen=True)
class Window:
    """Axis-aligned box ``[lo, hi]`` with ``n_grid`` cell-centred nodes per axis."""

    lo: tuple
    hi: tuple
    n_grid: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        n = tuple(int(v) for v in np.atleast_1d(self.n_grid))
        if len(n) == 1 and len(lo) > 1:
            n = n * len(lo)
        if not (len(lo) == len(hi) == len(n)):
            raise ConfigurationError("window bounds and grid sizes disagree in dimension")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ConfigurationError("window needs hi > lo on every axis")
        if any(k < 2 for k in n):
            raise ConfigurationError("window needs at least 2 nodes per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n_grid", n)

    @classmethod
    def cube(cls, a: float, b: float, n_grid: int, d: int = 1) -> "Window":
        return cls((a,) * d, (b,) * d, (n_grid,) * d)

    @classmethod
    def with_spacing(cls, lo, hi, h: float) -> "Window":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        n = np.maximum(np.ceil((hi - lo) / h - 1e-9).astype(int), 2)
        return cls(tuple(lo), tuple(lo + n * h), tuple(n))

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def h(self) -> np.ndarray:
        return self.lengths / np.asarray(self.n_grid)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def axis_nodes(self, axis: int) -> np.ndarray:
        return self.lo[axis] + (np.arange(self.n_grid[axis]) + 0.5) * self.h[axis]

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``n_grid + (d,)``."""
        axes = [self.axis_nodes(i) for i in range(self.d)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "n_grid": list(self.n_grid)}


@dataclass(frozen=True)
class Grain:
    center: np.ndarray
    mark: float

    @property
    def scale(self) -> float:
        return self.mark ** (1.0 / len(self.center))


@dataclass(frozen=True)
class Grains:
    """Struct-of-arrays grain list: germs ``centers`` (n, d) and volume marks ``marks`` (n,)."""

    centers: np.ndarray
    marks: np.ndarray
    spec: GrainSpec

    def __len__(self) -> int:
        return len(self.marks)

    def __iter__(self):
        for c, r in zip(self.centers, self.marks):
            yield Grain(c, float(r))

    @property
    def scales(self) -> np.ndarray:
        return self.marks ** (1.0 / self.spec.d)

    def select(self, mask) -> "Grains":
        return Grains(self.centers[mask], self.marks[mask], self.spec)

    @classmethod
    def empty(cls, spec: GrainSpec) -> "Grains":
        return cls(np.zeros((0, spec.d)), np.zeros(0), spec)


@dataclass(frozen=True, eq=False)
class FieldSample:
    spec: GrainSpec
    window: Window
    grains: Grains
    counts: np.ndarray
    M: float
    seed: int

    def __post_init__(self):
        self.counts.setflags(write=False)

    def dump(self, fh) -> None:
        dump_field(self, fh)


def derive_seed(master_seed: int, index: int) -> int:
    """64-bit seed of replication ``index``; independent streams for any index."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _minkowski_terms(spec: GrainSpec, window: Window) -> list[tuple[float, float]]:
    """``Leb_d(W ⊕ ρΞ̌⁰) = Σ coef · r^{s}``; returns the (coef, s) pairs."""
    L = window.lengths
    if spec.d == 1:
        return [(float(L[0]), 0.0), (1.0 if spec.shape == "cube" else 2.0, 1.0)]
    perim = float(L[0] + L[1])
    if spec.shape == "cube":
        return [(float(L[0] * L[1]), 0.0), (perim, 0.5), (1.0, 1.0)]
    return [(float(L[0] * L[1]), 0.0), (2.0 * perim, 0.5), (math.pi, 1.0)]


def relevant_mass(spec: GrainSpec, window: Window, M: float) -> float:
    """``Λ = M ∫ Leb_d(W ⊕ r^{1/d}Ξ̌⁰) f(r) dr`` (closed form through Pareto moments)."""
    if window.d != spec.d:
        raise ConfigurationError("window and grain dimensions differ")
    return M * sum(c * spec.mark_moment(s) for c, s in _minkowski_terms(spec, window))


def _sample_marks(spec: GrainSpec, window: Window, n: int, rng) -> np.ndarray:
    terms = _minkowski_terms(spec, window)
    weights = np.array([c * spec.mark_moment(s) for c, s in terms])
    cum = np.cumsum(weights / weights.sum())
    comp = np.searchsorted(cum, rng.random(n), side="right")
    comp = np.minimum(comp, len(terms) - 1)
    index = spec.alpha - np.array([s for _, s in terms])[comp]
    u = 1.0 - rng.random(n)  # (0, 1]
    return spec.r0 * u ** (-1.0 / index)


def _dist_to_box(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    gap = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    return np.sqrt(np.sum(gap**2, axis=-1))


def _sample_centers(spec: GrainSpec, window: Window, scales: np.ndarray, rng) -> np.ndarray:
    n, d = len(scales), spec.d
    lo, L = np.asarray(window.lo), window.lengths
    v = rng.random((n, d))
    rho = scales[:, None]
    if spec.shape == "cube":
        # u + ρ(0,1]^d meets W  iff  u in (lo - ρ, hi)
        return lo - rho + v * (L + rho)
    if d == 1:
        return lo - rho + v * (L + 2.0 * rho)
    # ball, d = 2: rejection from the bounding box, acceptance >= π/4
    u = lo - rho + v * (L + 2.0 * rho)
    bad = _dist_to_box(u, lo, lo + L) > scales
    while np.any(bad):
        idx = np.flatnonzero(bad)
        r = rho[idx]
        u[idx] = lo - r + rng.random((idx.size, d)) * (L + 2.0 * r)
        bad[idx] = _dist_to_box(u[idx], lo, lo + L) > scales[idx]
    return u


def sample_grains(spec: GrainSpec, window: Window, M: float, seed: int) -> Grains:
    """All grains of the intensity-``M`` process that can cover a node of ``window``."""
    if M <= 0:
        raise ConfigurationError("intensity multiplier M must be positive")
    rng = make_rng(seed)
    n = int(rng.poisson(relevant_mass(spec, window, M)))
    marks = _sample_marks(spec, window, n, rng)
    centers = _sample_centers(spec, window, marks ** (1.0 / spec.d), rng)
    return Grains(centers, marks, spec)


def _index_range(lo_coord, hi_coord, axis_lo, h, n, closed_left: bool):
    """Node index range ``[i0, i1]`` of cell-centred nodes inside an interval."""
    a = (np.asarray(lo_coord) - axis_lo) / h - 0.5
    b = (np.asarray(hi_coord) - axis_lo) / h - 0.5
    a = np.clip(a, -2.0, n + 1.0)
    b = np.clip(b, -2.0, n + 1.0)
    i0 = np.ceil(a) if closed_left else np.floor(a) + 1.0
    i1 = np.floor(b)
    return np.clip(i0, 0, n).astype(np.int64), np.clip(i1, -1, n - 1).astype(np.int64)


def evaluate_field(grains: Grains, window: Window) -> np.ndarray:
    """Coverage counts ``X_M(t)`` at every node ``t`` of ``window``."""
    spec = grains.spec
    d = spec.d
    if window.d != d:
        raise ConfigurationError("window and grain dimensions differ")
    n = window.n_grid
    h = window.h
    if len(grains) == 0:
        return np.zeros(n, dtype=np.int32)
    c = grains.centers
    rho = grains.scales
    cube = spec.shape == "cube"
    if d == 1:
        if cube:
            i0, i1 = _index_range(c[:, 0], c[:, 0] + rho, window.lo[0], h[0], n[0], False)
        else:
            i0, i1 = _index_range(c[:, 0] - rho, c[:, 0] + rho, window.lo[0], h[0], n[0], True)
        ok = i0 <= i1
        diff = np.bincount(i0[ok], minlength=n[0] + 1) - np.bincount(i1[ok] + 1, minlength=n[0] + 1)
        return np.cumsum(diff[:-1]).astype(np.int32)
    if cube:
        x0, x1 = _index_range(c[:, 0], c[:, 0] + rho, window.lo[0], h[0], n[0], False)
        y0, y1 = _index_range(c[:, 1], c[:, 1] + rho, window.lo[1], h[1], n[1], False)
        ok = (x0 <= x1) & (y0 <= y1)
        x0, x1, y0, y1 = x0[ok], x1[ok] + 1, y0[ok], y1[ok] + 1
        stride = n[1] + 1
        size = (n[0] + 1) * stride
        diff = (
            np.bincount(x0 * stride + y0, minlength=size)
            - np.bincount(x1 * stride + y0, minlength=size)
            - np.bincount(x0 * stride + y1, minlength=size)
            + np.bincount(x1 * stride + y1, minlength=size)
        ).reshape(n[0] + 1, stride)
        return np.cumsum(np.cumsum(diff, axis=0), axis=1)[:-1, :-1].astype(np.int32)
    # ball, d = 2: per-row spans along axis 1 for each covered axis-0 index
    r0_, r1_ = _index_range(c[:, 0] - rho, c[:, 0] + rho, window.lo[0], h[0], n[0], True)
    ok = r0_ <= r1_
    c, rho, r0_, r1_ = c[ok], rho[ok], r0_[ok], r1_[ok]
    counts_per = r1_ - r0_ + 1
    g = np.repeat(np.arange(len(rho)), counts_per)
    offsets = np.arange(g.size) - np.repeat(np.cumsum(counts_per) - counts_per, counts_per)
    rows = r0_[g] + offsets
    dx = window.axis_nodes(0)[rows] - c[g, 0]
    half = np.sqrt(np.maximum(rho[g] ** 2 - dx**2, 0.0))
    y0, y1 = _index_range(c[g, 1] - half, c[g, 1] + half, window.lo[1], h[1], n[1], True)
    good = y0 <= y1
    stride = n[1] + 1
    size = n[0] * stride
    diff = (
        np.bincount(rows[good] * stride + y0[good], minlength=size)
        - np.bincount(rows[good] * stride + y1[good] + 1, minlength=size)
    ).reshape(n[0], stride)
    return np.cumsum(diff, axis=1)[:, :-1].astype(np.int32)


def simulate_field(spec: GrainSpec, window: Window, M: float, seed: int) -> FieldSample:
    grains = sample_grains(spec, window, M, seed)
    return FieldSample(spec, window, grains, evaluate_field(grains, window), float(M), int(seed))


def center_normalize(field: FieldSample, spec: GrainSpec | None = None) -> np.ndarray:
    """``ξ(t) = (X_M(t) - M μ) / √M``."""
    spec = spec or field.spec
    return (field.counts - field.M * mean_mu(spec)) / math.sqrt(field.M)


# binary dump -----------------------------------------------------------------
_MAGIC = b"GRNF"
_VERSION = 1


def dump_field(field: FieldSample, fh) -> None:
    """Little-endian binary dump: header (spec hash + spec JSON, window, M, seed) then arrays."""
    spec_json = json.dumps(field.spec.to_dict(), sort_keys=True).encode()
    d = field.spec.d
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", _VERSION))
    fh.write(bytes.fromhex(field.spec.digest()))
    fh.write(struct.pack("<I", len(spec_json)))
    fh.write(spec_json)
    fh.write(struct.pack("<I", d))
    fh.write(struct.pack(f"<{d}d", *field.window.lo))
    fh.write(struct.pack(f"<{d}d", *field.window.hi))
    fh.write(struct.pack(f"<{d}q", *field.window.n_grid))
    fh.write(struct.pack("<dQQ", field.M, field.seed, len(field.grains)))
    fh.write(np.ascontiguousarray(field.grains.centers, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(field.grains.marks, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(field.counts, dtype="<i4").tobytes())


def load_field(fh) -> FieldSample:
    def read(n):
        b = fh.read(n)
        if len(b) != n:
            raise IntegrityError("truncated field dump")
        return b

    if read(4) != _MAGIC:
        raise IntegrityError("not a field dump")
    (version,) = struct.unpack("<I", read(4))
    if version != _VERSION:
        raise IntegrityError(f"unsupported dump version {version}")
    digest = read(32).hex()
    (n_json,) = struct.unpack("<I", read(4))
    spec = GrainSpec(**json.loads(read(n_json)))
    if spec.digest() != digest:
        raise IntegrityError("spec hash mismatch in field dump")
    (d,) = struct.unpack("<I", read(4))
    lo = struct.unpack(f"<{d}d", read(8 * d))
    hi = struct.unpack(f"<{d}d", read(8 * d))
    n_grid = struct.unpack(f"<{d}q", read(8 * d))
    M, seed, n = struct.unpack("<dQQ", read(24))
    window = Window(lo, hi, n_grid)
    centers = np.frombuffer(read(8 * d * n), dtype="<f8").reshape(n, d).astype(float)
    marks = np.frombuffer(read(8 * n), dtype="<f8").astype(float)
    counts = np.frombuffer(read(4 * int(np.prod(n_grid))), dtype="<i4").reshape(n_grid).astype(np.int32)
    return FieldSample(spec, window, Grains(centers, marks, spec), counts, M, seed)


def field_to_bytes(field: FieldSample) -> bytes:
    buf = io.BytesIO()
    dump_field(field, buf)
    return buf.getvalue()


def field_from_bytes(data: bytes) -> FieldSample:
    return load_field(io.BytesIO(data))
