"""Ball-kernel density estimates of particle snapshots, Dirac combs, and the
Laplace diagnostic for the density field."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DomainError
from .heatkernel import FiniteMeasure, GridField, GridSpec, as_points
from .loglaplace import PicardSolution, laplace_functional
from .particles import mean_se


def ball_volume(r: float, dim: int) -> float:
    if dim == 1:
        return 2.0 * r
    if dim == 2:
        return math.pi * r * r
    raise ConfigurationError(f"unsupported dimension {dim}")


@dataclass(frozen=True)
class Mollifier:
    """Normalised indicator of the closed ball of radius ``1/n``."""

    n: int
    dim: int = 1

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"mollifier index must be a positive integer, got {self.n}")
        if self.dim not in (1, 2):
            raise ConfigurationError(f"unsupported dimension {self.dim}")

    @property
    def radius(self) -> float:
        return 1.0 / self.n

    @property
    def normalizer(self) -> float:
        return self.n / 2.0 if self.dim == 1 else self.n**2 / math.pi


def mollified_density(snapshot, z, moll: Mollifier, particle_mass: float = 1.0) -> float:
    """``eps * #{i : |xi_i - z| <= 1/n} / Leb(B_{1/n})``."""
    pts = as_points(snapshot, moll.dim)
    zz = as_points(z, moll.dim)[0]
    if pts.shape[0] == 0:
        return 0.0
    d2 = np.sum((pts - zz) ** 2, axis=1)
    cnt = int(np.count_nonzero(d2 <= moll.radius**2))
    return particle_mass * cnt * moll.normalizer


def ball_counts(snapshot, spec: GridSpec, radius: float) -> np.ndarray:
    """Number of particles in the closed ball of ``radius`` around every node."""
    pts = as_points(snapshot, spec.dim)
    if pts.shape[0] == 0:
        return np.zeros(spec.shape, dtype=np.int64)
    if spec.dim == 1:
        x = np.sort(pts[:, 0])
        ax = spec.axis
        return np.searchsorted(x, ax + radius, side="right") - np.searchsorted(x, ax - radius, side="left")
    tree = cKDTree(pts)
    nodes = spec.nodes.reshape(-1, 2)
    return tree.query_ball_point(nodes, radius, return_length=True).reshape(spec.shape)


def density_field(snapshot, spec: GridSpec, moll: Mollifier, particle_mass: float = 1.0) -> GridField:
    """Mollified density of a snapshot at every grid node."""
    if moll.dim != spec.dim:
        raise ConfigurationError("mollifier and grid dimensions differ")
    cnt = ball_counts(snapshot, spec, moll.radius)
    return GridField(spec, particle_mass * moll.normalizer * cnt.astype(float))


def boundary_mass_fraction(snapshot, spec: GridSpec, moll: Mollifier) -> float:
    """Fraction of particles whose kernel ball sticks out of the box (their mass is partly lost)."""
    pts = as_points(snapshot, spec.dim)
    if pts.shape[0] == 0:
        return 0.0
    near = np.any(np.abs(pts) > spec.half_extent - moll.radius, axis=1)
    return float(near.mean())


def uniform_ball(rng: np.random.Generator, n: int, r: float, dim: int) -> np.ndarray:
    if dim == 1:
        return rng.uniform(-r, r, size=(n, 1))
    rad = r * np.sqrt(rng.random(n))
    ang = 2 * math.pi * rng.random(n)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)


def dirac_comb(phi, N: int, r: float, rng: np.random.Generator, dim: int | None = None) -> FiniteMeasure:
    """``Leb(B_r)/N * sum_i phi(xi_i) delta_{xi_i}`` with ``xi_i`` uniform on ``B_r(0)``.

    ``phi`` is a GridField, a callable on point arrays, or a constant.
    Atoms with ``phi(xi_i) = 0`` are dropped.
    """
    if int(N) != N or N <= 0:
        raise DomainError(f"N must be a positive integer, got {N}")
    if isinstance(phi, GridField):
        dim = phi.spec.dim
        if r > phi.spec.half_extent:
            raise ConfigurationError("comb radius exceeds the grid half extent")
    elif dim is None:
        dim = 1
    if not r > 0:
        raise DomainError("radius must be positive")
    xi = uniform_ball(rng, int(N), r, dim)
    if isinstance(phi, GridField):
        w = phi.interpolate(xi)
    elif callable(phi):
        w = np.asarray(phi(xi[:, 0] if dim == 1 else xi), dtype=float)
    else:
        w = np.full(int(N), float(phi))
    if np.any(w < 0):
        raise DomainError("phi must be nonnegative")
    masses = ball_volume(r, dim) * w / N
    keep = masses > 0
    return FiniteMeasure(xi[keep], masses[keep])


def smoothed_pairing(snapshot, f_grid: GridField, moll: Mollifier, particle_mass: float) -> float:
    """``h^dim * sum_nodes eta(x) f(x)`` for the mollified density ``eta``."""
    eta = density_field(snapshot, f_grid.spec, moll, particle_mass)
    return float(np.sum(eta.values * f_grid.values) * f_grid.spec.cell_volume)


@dataclass
class DensityDiagnosticReport:
    t: float
    pde_value: float
    raw_estimate: float
    raw_se: float
    ns: list
    estimates: list
    std_errors: list
    smoothing_bias: list
    model_bias: float
    boundary_fraction: list
    sigmas: float
    passed: bool
    per_n_pass: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("t", "pde_value", "raw_estimate", "raw_se", "ns", "estimates",
                                              "std_errors", "smoothing_bias", "model_bias",
                                              "boundary_fraction", "sigmas", "passed", "per_n_pass")}


def _check_inputs(paths, t, x0, pde):
    if not paths:
        raise DomainError("empty path list")
    gam = {p.gamma for p in paths}
    if len(gam) != 1 or not math.isclose(gam.pop(), pde.params.gamma):
        raise ConfigurationError("paths and PDE solution use different gamma")
    if not math.isclose(pde.times[-1], t, rel_tol=1e-9):
        raise ConfigurationError(f"PDE solution ends at t={pde.times[-1]}, diagnostic asks for t={t}")
    eps = paths[0].particle_mass
    x0_count = int(np.sum(np.ceil(x0.masses / eps * (1 - 1e-12))))
    if any(p.initial_count != x0_count or p.particle_mass != eps for p in paths):
        raise ConfigurationError("paths were not all started from x0 with one particle mass")


def diagnostic_grid(f_spec: GridSpec, ns, nodes_per_radius: int = 20) -> GridSpec:
    """Grid fine enough that the smallest kernel ball spans ``nodes_per_radius`` nodes."""
    h = min(1.0 / n for n in ns) / nodes_per_radius
    n = int(2 * math.ceil(f_spec.half_extent / h))
    return GridSpec(f_spec.dim, f_spec.half_extent, max(n, f_spec.n))


def density_samples(paths, f, t: float, ns, grid: GridSpec):
    """Per-path raw and smoothed values of ``1{t<T} exp(-<., f>)``.

    Returns ``(raw, smoothed, boundary)`` with ``smoothed`` of shape
    ``(len(ns), len(paths))`` and the worst boundary-loss fraction per ``n``.
    """
    if isinstance(f, GridField):
        fg = GridField(grid, f.interpolate(grid.nodes.reshape(-1, grid.dim)).reshape(grid.shape), nonneg=False)
        fraw = f.interpolate
    else:
        fg = GridField(grid, np.asarray(f(grid.nodes), dtype=float), nonneg=False)
        fraw = lambda x: np.asarray(f(x if x.shape[1] > 1 else x[:, 0]), dtype=float)  # noqa: E731
    molls = [Mollifier(n, grid.dim) for n in ns]
    raw = np.zeros(len(paths))
    sm = np.zeros((len(ns), len(paths)))
    bfrac = np.zeros(len(ns))
    for k, p in enumerate(paths):
        if p.exploded and p.explosion_time <= t * (1 + 1e-12):
            continue
        x = p.snapshot_at(t)
        if x is None:
            raise DomainError(f"path {p.replicate} has no snapshot at t={t}")
        if x.shape[0] == 0:
            raw[k] = 1.0
            sm[:, k] = 1.0
            continue
        eps = p.particle_mass
        raw[k] = math.exp(-eps * float(np.sum(fraw(x))))
        for j, m in enumerate(molls):
            sm[j, k] = math.exp(-smoothed_pairing(x, fg, m, eps))
            bfrac[j] = max(bfrac[j], boundary_mass_fraction(x, grid, m))
    return raw, sm, bfrac


def diagnostic_report(raw, smoothed, boundary, t: float, ns, pde_value: float, model_bias: float = 0.0,
                      sigmas: float = 3.0) -> DensityDiagnosticReport:
    raw_m, raw_se = mean_se(raw)
    ests, ses, biases, oks = [], [], [], []
    for j in range(len(ns)):
        m_, se_ = mean_se(smoothed[j])
        # paired difference: smoothing is the only thing that differs
        b = abs(float(np.mean(smoothed[j] - raw)))
        ests.append(m_)
        ses.append(se_)
        biases.append(b)
        oks.append(bool(abs(m_ - pde_value) <= sigmas * se_ + b + model_bias))
    return DensityDiagnosticReport(t, pde_value, raw_m, raw_se, list(ns), ests, ses, biases, model_bias,
                                   list(map(float, boundary)), sigmas, all(oks), oks)


def abs_continuity_diagnostic(paths, f, t: float, x0: FiniteMeasure, pde: PicardSolution,
                              ns=(8, 16, 32), model_bias: float = 0.0, sigmas: float = 3.0,
                              grid: GridSpec | None = None) -> DensityDiagnosticReport:
    """Compare ``E[1{t<T} exp(-<eta_t^n, f>)]`` with ``exp(-<x0, V_t f>)``.

    ``f`` is the test function as a GridField (interpolated onto the
    diagnostic grid) or a callable.  For every ``n`` the estimate must lie
    within ``sigmas`` standard errors plus the smoothing bias (paired mean
    difference between smoothed and raw per-path values, which share all
    randomness) plus ``model_bias``, the finite particle-mass bias of the
    simulator.
    """
    _check_inputs(paths, t, x0, pde)
    grid = grid or diagnostic_grid(f.spec if isinstance(f, GridField) else pde.spec, ns)
    raw, sm, bfrac = density_samples(paths, f, t, ns, grid)
    return diagnostic_report(raw, sm, bfrac, t, ns, laplace_functional(x0, pde), model_bias, sigmas)
