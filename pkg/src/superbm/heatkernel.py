"""Gaussian heat kernel, the heat semigroup on a box grid, and weighted norms.

Grids are cell-centred boxes ``[-L, L]^dim`` with ``n`` nodes per axis.
Convolutions are carried out on a zero-padded ``2n``-periodic extension with
the node-sampled (and renormalised) Gaussian kernel, so wrap-around only
couples points at distance ``>= 2L``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy import fft as sfft

from .errors import ConfigurationError, DomainError

# Atom sums are evaluated in blocks of this many atoms to bound memory.
_ATOM_BLOCK = 2048
# Worker threads for scipy.fft; set through set_fft_workers().
_FFT_WORKERS = 1


def set_fft_workers(n: int) -> None:
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(n))


@dataclass(frozen=True)
class GridSpec:
    dim: int
    half_extent: float
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigurationError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 8 or self.n % 2:
            raise ConfigurationError(f"points per axis must be even and >= 8, got {self.n}")
        if not self.half_extent > 0:
            raise ConfigurationError(f"half extent must be positive, got {self.half_extent}")

    @property
    def h(self) -> float:
        return 2.0 * self.half_extent / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        k = np.arange(self.n)
        return -self.half_extent + (k + 0.5) * self.h

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(n,)`` in 1D and ``(n, n, 2)`` in 2D."""
        if self.dim == 1:
            return self.axis.copy()
        xx, yy = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([xx, yy], axis=-1)

    @cached_property
    def radius(self) -> np.ndarray:
        if self.dim == 1:
            return np.abs(self.axis)
        return np.linalg.norm(self.nodes, axis=-1)

    def contains(self, points) -> np.ndarray:
        """Mask of points lying strictly inside the box."""
        pts = as_points(points, self.dim)
        return np.all(np.abs(pts) < self.half_extent, axis=-1)

    @classmethod
    def for_horizon(cls, dim: int, t_max: float, n: int, support_radius: float = 0.0,
                    kernel_tail: float = 1e-10) -> "GridSpec":
        """Box large enough that heat-kernel mass leaking past the boundary is below ``kernel_tail``."""
        from scipy.special import erfcinv

        z = math.sqrt(2.0) * float(erfcinv(kernel_tail / dim))
        return cls(dim, support_radius + z * math.sqrt(t_max), n)


def as_points(x, dim: int) -> np.ndarray:
    """Coerce ``x`` to an array of points with shape ``(N, dim)``."""
    arr = np.asarray(x, dtype=float)
    if dim == 1:
        return arr.reshape(-1, 1)
    if arr.shape[-1] != dim:
        raise DomainError(f"points must have trailing dimension {dim}, got shape {arr.shape}")
    return arr.reshape(-1, dim)


@dataclass
class GridField:
    spec: GridSpec
    values: np.ndarray
    nonneg: bool = True

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.spec.shape:
            raise ConfigurationError(f"values shape {vals.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(vals)):
            raise DomainError("grid field contains non-finite values")
        if self.nonneg and np.any(vals < 0):
            raise DomainError("grid field flagged nonnegative has negative values")
        self.values = vals

    @classmethod
    def from_function(cls, spec: GridSpec, func, nonneg: bool = True) -> "GridField":
        return cls(spec, np.asarray(func(spec.nodes), dtype=float).reshape(spec.shape), nonneg)

    @classmethod
    def constant(cls, spec: GridSpec, c: float) -> "GridField":
        return cls(spec, np.full(spec.shape, float(c)), nonneg=c >= 0)

    def integral(self) -> float:
        return float(self.values.sum() * self.spec.cell_volume)

    def max(self) -> float:
        return float(self.values.max())

    def interpolate(self, points) -> np.ndarray:
        """Linear (bilinear in 2D) interpolation at arbitrary points; linear extrapolation in the rim half-cell."""
        pts = as_points(points, self.spec.dim)
        ax = self.spec.axis
        if self.spec.dim == 1:
            return _interp1(ax, self.values, pts[:, 0])
        from scipy.interpolate import RegularGridInterpolator

        rgi = RegularGridInterpolator((ax, ax), self.values, bounds_error=False, fill_value=None)
        return rgi(pts)


def _interp1(ax, vals, x):
    # np.interp clamps outside the node range; extrapolate linearly in the rim instead
    out = np.interp(x, ax, vals)
    lo, hi = x < ax[0], x > ax[-1]
    if lo.any():
        out[lo] = vals[0] + (x[lo] - ax[0]) * (vals[1] - vals[0]) / (ax[1] - ax[0])
    if hi.any():
        out[hi] = vals[-1] + (x[hi] - ax[-1]) * (vals[-1] - vals[-2]) / (ax[-1] - ax[-2])
    return out


@dataclass
class FiniteMeasure:
    """Atoms (positions, positive masses) plus an optional nonnegative grid density."""

    positions: np.ndarray
    masses: np.ndarray
    density: GridField | None = None

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=float).reshape(-1)
        dim = self.density.spec.dim if self.density is not None else None
        pos = np.asarray(self.positions, dtype=float)
        if dim is None:
            dim = pos.shape[-1] if pos.ndim == 2 else 1
        pos = pos.reshape(-1, dim) if pos.size else np.zeros((0, dim))
        if pos.shape[0] != masses.shape[0]:
            raise ConfigurationError("positions and masses have different lengths")
        if np.any(~np.isfinite(masses)) or np.any(masses <= 0):
            raise DomainError("atom masses must be finite and strictly positive")
        if self.density is not None and not self.density.nonneg:
            raise DomainError("density part must be nonnegative")
        self.positions = pos
        self.masses = masses

    @classmethod
    def dirac(cls, point=0.0, mass: float = 1.0, dim: int = 1) -> "FiniteMeasure":
        return cls(as_points(point, dim), [mass])

    @classmethod
    def atomic(cls, positions, masses, dim: int = 1) -> "FiniteMeasure":
        return cls(as_points(positions, dim), masses)

    @classmethod
    def from_density(cls, density: GridField) -> "FiniteMeasure":
        return cls(np.zeros((0, density.spec.dim)), np.zeros(0), density)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def atom_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def total_mass(self) -> float:
        dens = self.density.integral() if self.density is not None else 0.0
        return self.atom_mass + dens

    @property
    def n_atoms(self) -> int:
        return self.masses.shape[0]

    def scaled(self, c: float) -> "FiniteMeasure":
        if c < 0:
            raise DomainError("measures can only be scaled by nonnegative factors")
        if c == 0:
            return FiniteMeasure(np.zeros((0, self.dim)), np.zeros(0))
        dens = None if self.density is None else GridField(self.density.spec, c * self.density.values)
        return FiniteMeasure(self.positions.copy(), c * self.masses, dens)

    def __add__(self, other: "FiniteMeasure") -> "FiniteMeasure":
        if other.dim != self.dim:
            raise ConfigurationError("cannot add measures of different dimension")
        dens = self.density
        if other.density is not None:
            if dens is None:
                dens = other.density
            else:
                if dens.spec != other.density.spec:
                    raise ConfigurationError("density parts live on different grids")
                dens = GridField(dens.spec, dens.values + other.density.values)
        return FiniteMeasure(np.vstack([self.positions, other.positions]),
                             np.concatenate([self.masses, other.masses]), dens)

    def check_inside(self, spec: GridSpec) -> None:
        if self.dim != spec.dim:
            raise ConfigurationError(f"measure dimension {self.dim} does not match grid dimension {spec.dim}")
        if self.n_atoms and not np.all(spec.contains(self.positions)):
            raise ConfigurationError("atoms must lie strictly inside the grid box")
        if self.density is not None and self.density.spec != spec:
            raise ConfigurationError("density part lives on a different grid")

    def atom_table(self) -> dict:
        """Total atom mass per distinct position."""
        table: dict = {}
        for p, m in zip(map(tuple, self.positions), self.masses):
            table[p] = table.get(p, 0.0) + float(m)
        return table

    def dominated_by(self, other: "FiniteMeasure", rtol: float = 1e-12) -> bool:
        """True when ``self <= other`` as measures, checked atomwise and nodewise."""
        mine, theirs = self.atom_table(), other.atom_table()
        for p, m in mine.items():
            if theirs.get(p, 0.0) < m * (1 - rtol):
                return False
        if self.density is not None:
            if other.density is None or other.density.spec != self.density.spec:
                return False
            if np.any(other.density.values < self.density.values * (1 - rtol)):
                return False
        return True


def heat_kernel(t: float, x, dim: int = 1):
    """Brownian transition density ``(2 pi t)^{-dim/2} exp(-|x|^2 / 2t)``.

    ``x`` is a scalar/array of coordinates in 1D, or an array whose last axis
    has length 2 in 2D.
    """
    if not t > 0:
        raise DomainError(f"heat kernel needs t > 0, got {t}")
    x = np.asarray(x, dtype=float)
    r2 = x**2 if dim == 1 else np.sum(x**2, axis=-1)
    out = np.exp(-r2 / (2.0 * t)) / (2.0 * math.pi * t) ** (dim / 2)
    return float(out) if np.ndim(out) == 0 else out


def atom_field(t: float, positions: np.ndarray, masses: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Exact Gaussian-mixture sum of atoms at the grid nodes (no binning)."""
    out = np.zeros(spec.shape)
    if masses.size == 0:
        return out
    ax = spec.axis
    norm = 1.0 / math.sqrt(2.0 * math.pi * t)
    for start in range(0, masses.size, _ATOM_BLOCK):
        pos = positions[start:start + _ATOM_BLOCK]
        m = masses[start:start + _ATOM_BLOCK]
        gx = np.exp(-((ax[:, None] - pos[None, :, 0]) ** 2) / (2.0 * t)) * norm
        if spec.dim == 1:
            out += gx @ m
        else:
            gy = np.exp(-((ax[:, None] - pos[None, :, 1]) ** 2) / (2.0 * t)) * norm
            out += (gx * m) @ gy.T
    return out


class HeatOperator:
    """Convolution with the node-sampled heat kernel on a zero-padded grid.

    The kernel is sampled at the minimum-image offsets of the ``2n``-periodic
    padded grid and renormalised to unit mass, so the operator is positive,
    conserves mass and reduces to the identity as ``t -> 0``.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.padded = 2 * spec.n
        m = np.arange(self.padded)
        self._offsets = np.minimum(m, self.padded - m) * spec.h
        self._cache: dict = {}

    def axis_multiplier(self, t: float, full: bool) -> np.ndarray:
        key = (t, full)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if t == 0:
            size = self.padded if full else self.padded // 2 + 1
            mult = np.ones(size)
        else:
            k = np.exp(-self._offsets**2 / (2.0 * t))
            k /= k.sum()
            mult = (sfft.fft(k) if full else sfft.rfft(k)).real
        if len(self._cache) > 20000:
            self._cache.clear()
        self._cache[key] = mult
        return mult

    def multiplier(self, t: float) -> np.ndarray:
        if self.spec.dim == 1:
            return self.axis_multiplier(t, full=False)
        return self.axis_multiplier(t, full=True)[:, None] * self.axis_multiplier(t, full=False)[None, :]

    def forward(self, values: np.ndarray) -> np.ndarray:
        shape = (self.padded,) * self.spec.dim
        return sfft.rfftn(values, s=shape, workers=_FFT_WORKERS)

    def backward(self, spectrum: np.ndarray) -> np.ndarray:
        shape = (self.padded,) * self.spec.dim
        out = sfft.irfftn(spectrum, s=shape, workers=_FFT_WORKERS)
        n = self.spec.n
        return out[:n] if self.spec.dim == 1 else out[:n, :n]

    def apply(self, t: float, values: np.ndarray) -> np.ndarray:
        if t == 0:
            return np.array(values, dtype=float)
        return self.backward(self.forward(values) * self.multiplier(t))


@lru_cache(maxsize=16)
def heat_operator(spec: GridSpec) -> HeatOperator:
    return HeatOperator(spec)


def semigroup_field(t: float, f: GridField) -> GridField:
    """Heat semigroup ``S_t f`` of a grid function (zero outside the box)."""
    if not t > 0:
        raise DomainError(f"semigroup needs t > 0, got {t}")
    out = heat_operator(f.spec).apply(t, f.values)
    if f.nonneg:
        # exact result is nonnegative; strip FFT round-off
        np.maximum(out, 0.0, out=out)
    return GridField(f.spec, out, f.nonneg)


def semigroup_measure(t: float, mu: FiniteMeasure, spec: GridSpec) -> GridField:
    """``S_t mu`` at the nodes: exact Gaussian mixture for atoms plus convolution of the density part."""
    if not t > 0:
        raise DomainError(f"semigroup needs t > 0, got {t}")
    mu.check_inside(spec)
    if not mu.total_mass > 0:
        raise DomainError("semigroup_measure needs a nonzero measure")
    vals = atom_field(t, mu.positions, mu.masses, spec)
    if mu.density is not None:
        vals += semigroup_field(t, mu.density).values
    return GridField(spec, vals)


def weight_constant(dim: int) -> float:
    """``C_w`` with ``int C_w exp(-|x|) dx = 1`` over ``R^dim``."""
    if dim == 1:
        return 0.5
    if dim == 2:
        return 1.0 / (2.0 * math.pi)
    raise ConfigurationError(f"unsupported dimension {dim}")


def weight(spec: GridSpec) -> np.ndarray:
    return weight_constant(spec.dim) * np.exp(-spec.radius)


def weighted_norm(f: GridField, p) -> float:
    """Exponentially weighted L^1 (``p=1``) or L^inf (``p=inf``) norm on the grid."""
    wf = weight(f.spec) * np.abs(f.values)
    if p == 1:
        return float(wf.sum() * f.spec.cell_volume)
    if p in (np.inf, "inf", math.inf):
        return float(wf.max())
    raise DomainError(f"p must be 1 or inf, got {p}")


def weighted_sup(values: np.ndarray, spec: GridSpec) -> float:
    return float(np.max(weight(spec) * np.abs(values)))
