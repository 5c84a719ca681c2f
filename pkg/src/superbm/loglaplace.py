"""Monotone Picard solver for the log-Laplace equation

    v(t) = S_t mu + int_0^t S_{t-s} Psi(v(s)) ds

with measure or function initial data, plus the closed-form oracles that
go with it.

Numerically the solution is split as ``v = phi(t) + u(t, x)`` where ``phi``
solves the spatially flat problem ``phi' = Psi(phi)`` started from the far-field
level ``a_inf`` of the data (0 for measures, the grid minimum for function
data).  The deviation ``u`` is iterated as

    u_{k+1} = (S_t mu - a_inf) + int_0^t S_{t-s} [Psi(phi + u_k) - Psi(phi)] ds

which is the same fixed-point map written so that neither the box truncation
nor Gaussian underflow far from the atoms can pull ``v`` below ``phi``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ConvergenceError, DomainError, PreconditionError
from .heatkernel import (
    FiniteMeasure,
    GridField,
    GridSpec,
    atom_field,
    heat_operator,
    semigroup_measure,
    weight,
)

LOWER_SLACK = 1e-12
UPPER_SLACK = 1e-9
COMPARE_SLACK = 1e-6

# Gauss-Legendre rule used on the first time cell [0, tau_1]
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)


@dataclass(frozen=True)
class GammaParams:
    gamma: float

    def __post_init__(self):
        g = float(self.gamma)
        if not (0.0 < g < 1.0) or not math.isfinite(g):
            raise DomainError(f"gamma must lie in (0, 1), got {self.gamma}")
        object.__setattr__(self, "gamma", g)

    @property
    def gamma_prime(self) -> float:
        return 1.0 / (1.0 - self.gamma)


@dataclass(frozen=True)
class NonlinearitySpec:
    """Reaction term of the equation.

    ``power_gamma`` is ``coefficient * lam**gamma`` and ``linear_plus_one`` is
    ``lam + 1``.  A positive ``damping`` ``c`` adds ``-c * v`` to the power
    reaction; it is handled by the substitution ``v = exp(-c t) U``.
    """

    kind: str = "power_gamma"
    damping: float = 0.0
    coefficient: float = 1.0

    def __post_init__(self):
        if self.kind not in ("power_gamma", "linear_plus_one"):
            raise ConfigurationError(f"unknown nonlinearity {self.kind!r}")
        if self.damping < 0 or self.coefficient <= 0:
            raise ConfigurationError("damping must be >= 0 and coefficient > 0")
        if self.kind == "linear_plus_one" and (self.damping or self.coefficient != 1.0):
            raise ConfigurationError("linear_plus_one takes no damping or coefficient")

    def __call__(self, lam, params: GammaParams):
        lam = np.asarray(lam, dtype=float)
        if self.kind == "linear_plus_one":
            return lam + 1.0
        return self.coefficient * lam**params.gamma - self.damping * lam


POWER = NonlinearitySpec("power_gamma")
LINEAR = NonlinearitySpec("linear_plus_one")


@dataclass(frozen=True)
class PicardConfig:
    params: GammaParams
    t_final: float
    time_steps: int = 64
    t_min: float | None = None
    tol: float = 1e-8
    max_iters: int = 200

    def __post_init__(self):
        problems = []
        if not self.t_final > 0:
            problems.append(f"t_final must be positive, got {self.t_final}")
        if self.t_min is None and self.t_final > 0:
            object.__setattr__(self, "t_min", self.t_final / 100.0)
        if self.t_min is not None and not (0 < self.t_min < self.t_final):
            problems.append(f"t_min must lie in (0, t_final), got {self.t_min}")
        if self.time_steps < 4:
            problems.append(f"time_steps must be >= 4, got {self.time_steps}")
        if not self.tol > 0:
            problems.append(f"tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            problems.append(f"max_iters must be >= 1, got {self.max_iters}")
        if problems:
            raise ConfigurationError("; ".join(problems), problems)

    def mesh(self) -> np.ndarray:
        """Graded mesh ``t (j/M)^2`` with ``t_min`` inserted."""
        j = np.arange(self.time_steps + 1)
        tau = self.t_final * (j / self.time_steps) ** 2
        tau[-1] = self.t_final
        if not np.any(np.isclose(tau, self.t_min, rtol=1e-12, atol=0)):
            tau = np.sort(np.append(tau, self.t_min))
        return tau


@dataclass
class PicardSolution:
    config: PicardConfig
    spec: GridSpec
    psi: NonlinearitySpec
    times: np.ndarray
    slices: list
    iter_count: int
    sup_diffs: list
    min_increments: list
    converged: bool
    far_field: np.ndarray = field(default=None, repr=False)

    @property
    def params(self) -> GammaParams:
        return self.config.params

    @property
    def final(self) -> GridField:
        return self.slices[-1]

    def slice_at(self, t: float) -> GridField:
        k = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[k], t, rel_tol=1e-9, abs_tol=1e-15):
            raise DomainError(f"no stored slice at t={t}; stored times span [{self.times[0]}, {self.times[-1]}]")
        return self.slices[k]

    def values(self) -> np.ndarray:
        return np.stack([s.values for s in self.slices])

    def to_csv(self, path, header_lines=()) -> None:
        """Slice dump with columns ``t, node, value`` (flat node index)."""
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["t", "node", "value"])
            for t, s in zip(self.times, self.slices):
                for k, val in enumerate(s.values.ravel()):
                    w.writerow([f"{t:.17g}", k, f"{val:.17g}"])

    def to_npz(self, path) -> None:
        np.savez_compressed(path, times=self.times, values=self.values(), axis=self.spec.axis,
                            sup_diffs=np.asarray(self.sup_diffs))


class _Reaction:
    """Time-dependent reaction ``Psi_s`` for the deviation iteration, and its far-field ODE solution."""

    def __init__(self, psi: NonlinearitySpec, params: GammaParams, a_inf: float):
        self.psi = psi
        self.params = params
        self.a_inf = a_inf

    def far_field(self, t):
        t = np.asarray(t, dtype=float)
        if self.psi.kind == "linear_plus_one":
            return (self.a_inf + 1.0) * np.exp(t) - 1.0
        g = self.params.gamma
        c, b = self.psi.damping, self.psi.coefficient
        growth = (1 - g) * t if c == 0 else np.expm1(c * (1 - g) * t) / c
        return (self.a_inf ** (1 - g) + b * growth) ** self.params.gamma_prime

    def rate(self, s: float, lam):
        if self.psi.kind == "linear_plus_one":
            return lam + 1.0
        c, b, g = self.psi.damping, self.psi.coefficient, self.params.gamma
        amp = b if c == 0 else b * math.exp(c * (1 - g) * s)
        return amp * lam**g

    def scale(self, t: float) -> float:
        return 1.0 if self.psi.damping == 0 else math.exp(-self.psi.damping * t)


def _trap_weights(tau: np.ndarray, i: int) -> np.ndarray:
    """Trapezoid weights of nodes ``1..i`` on ``[tau_1, tau_i]``."""
    w = np.zeros(i + 1)
    d = np.diff(tau[1:i + 1])
    w[1:i] += d / 2
    w[2:i + 1] += d / 2
    return w


def _picard(spec: GridSpec, cfg: PicardConfig, reaction: _Reaction, source) -> PicardSolution:
    """Core fixed-point loop.  ``source(t)`` returns ``S_t mu - a_inf`` on the grid."""
    op = heat_operator(spec)
    tau = cfg.mesh()
    K = len(tau) - 1
    phi = reaction.far_field(tau)
    wgt = weight(spec)
    stored = np.nonzero(tau >= cfg.t_min * (1 - 1e-12))[0]
    stored = stored[stored >= 1]

    u1 = [None] + [source(tau[i]) for i in range(1, K + 1)]

    # contribution of [0, tau_1], frozen at the first iterate
    s_q = tau[1] * (_GL_NODES + 1) / 2
    w_q = tau[1] * _GL_WEIGHTS / 2
    g_q = []
    for s in s_q:
        ff = float(reaction.far_field(s))
        g_q.append(op.forward(reaction.rate(s, ff + source(s)) - reaction.rate(s, ff)))
    first = [None]
    for i in range(1, K + 1):
        acc = sum(wq * op.multiplier(tau[i] - s) * gq for s, wq, gq in zip(s_q, w_q, g_q))
        first.append(np.maximum(op.backward(acc), 0.0))

    weights = [None] + [_trap_weights(tau, i) for i in range(1, K + 1)]
    u = [None] + [x.copy() for x in u1[1:]]
    sup_diffs, min_incs = [], []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        g = [None] + [reaction.rate(tau[j], phi[j] + u[j]) - reaction.rate(tau[j], phi[j]) for j in range(1, K + 1)]
        G = [None] + [op.forward(g[j]) for j in range(1, K)]
        new = [None]
        for i in range(1, K + 1):
            duh = first[i].copy()
            if i >= 2:
                acc = 0
                for j in range(1, i):
                    acc = acc + weights[i][j] * op.multiplier(tau[i] - tau[j]) * G[j]
                duh += op.backward(acc)
                duh += weights[i][i] * g[i]
            np.maximum(duh, 0.0, out=duh)
            new.append(u1[i] + duh)
        diffs = [reaction.scale(tau[i]) * float(np.max(wgt * np.abs(new[i] - u[i]))) for i in stored]
        inc = min(reaction.scale(tau[i]) * float(np.min(new[i] - u[i])) for i in range(1, K + 1))
        sup_diffs.append(max(diffs))
        min_incs.append(inc)
        u = new
        if sup_diffs[-1] < cfg.tol:
            converged = True
            break

    slices = []
    for i in stored:
        vals = reaction.scale(tau[i]) * (phi[i] + u[i])
        slices.append(GridField(spec, np.maximum(vals, 0.0)))
    sol = PicardSolution(cfg, spec, reaction.psi, tau[stored].copy(), slices, it, sup_diffs, min_incs,
                         converged, far_field=np.array([reaction.scale(t) * phi[i] for i, t in zip(stored, tau[stored])]))
    if not converged:
        raise ConvergenceError(
            f"Picard iteration did not reach tol={cfg.tol:g} in {cfg.max_iters} iterations "
            f"(last change {sup_diffs[-1]:.3e})", sup_diffs, sol)
    return sol


def solve(mu: FiniteMeasure, cfg: PicardConfig, spec: GridSpec, psi: NonlinearitySpec = POWER) -> PicardSolution:
    """Solve with a finite measure as initial datum."""
    if not mu.total_mass > 0:
        raise DomainError("initial measure must not be identically zero")
    mu.check_inside(spec)
    op = heat_operator(spec)
    dens = mu.density.values if mu.density is not None else None

    def source(t):
        out = atom_field(t, mu.positions, mu.masses, spec)
        if dens is not None:
            out += np.maximum(op.apply(t, dens), 0.0)
        return out

    return _picard(spec, cfg, _Reaction(psi, cfg.params, 0.0), source)


def solve_function_ic(f: GridField, cfg: PicardConfig, spec: GridSpec | None = None,
                      psi: NonlinearitySpec = POWER) -> PicardSolution:
    """Solve with a bounded nonnegative function as initial datum.

    Outside the box the datum is continued by its smallest grid value, so
    constant data give the flat solution on the whole grid.
    """
    spec = spec or f.spec
    if f.spec != spec:
        raise ConfigurationError("initial function lives on a different grid")
    if np.any(f.values < 0):
        raise DomainError("initial function must be nonnegative")
    if not np.any(f.values > 0):
        raise DomainError("initial function must not be identically zero")
    a_inf = float(f.values.min())
    dev = f.values - a_inf
    op = heat_operator(spec)
    flat = not np.any(dev > 0)

    def source(t):
        if flat:
            return np.zeros(spec.shape)
        return np.maximum(op.apply(t, dev), 0.0)

    return _picard(spec, cfg, _Reaction(psi, cfg.params, a_inf), source)


def exact_constant_solution(a, t, params: GammaParams, damping: float = 0.0, coefficient: float = 1.0):
    """Flat solution ``(a^{1-gamma} + t(1-gamma))^{gamma'}`` (optionally damped)."""
    a = np.asarray(a, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(a < 0) or np.any(t < 0):
        raise DomainError("a and t must be nonnegative")
    g = params.gamma
    growth = (1 - g) * t if damping == 0 else np.expm1(damping * (1 - g) * t) / damping
    out = (a ** (1 - g) + coefficient * growth) ** params.gamma_prime * np.exp(-damping * t)
    return float(out) if out.ndim == 0 else out


def semigroup_at(mu: FiniteMeasure, t: float, x, spec: GridSpec | None = None):
    """``S_t mu`` at arbitrary points: exact for atoms, interpolated for a density part."""
    x = np.asarray(x, dtype=float)
    dim = mu.dim
    pts = x.reshape(-1, 1) if dim == 1 else x.reshape(-1, dim)
    out = np.zeros(pts.shape[0])
    if mu.n_atoms:
        norm = (2 * math.pi * t) ** (-dim / 2)
        for p, m in zip(mu.positions, mu.masses):
            out += m * norm * np.exp(-np.sum((pts - p) ** 2, axis=1) / (2 * t))
    if mu.density is not None:
        from .heatkernel import semigroup_field

        out += semigroup_field(t, mu.density).interpolate(pts)
    return out.reshape(x.shape[:-1] if dim > 1 else x.shape)


def exact_linear_majorant(mu: FiniteMeasure, t: float, x):
    """``e^t S_t mu(x) + e^t - 1``, the solution for the reaction ``lam + 1``."""
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    if mu.total_mass == 0:
        return np.zeros(np.shape(x)) + math.expm1(t)
    return math.exp(t) * semigroup_at(mu, t, x) + math.expm1(t)


@dataclass
class BoundsReport:
    passed: bool
    worst_lower_margin: float
    worst_upper_margin: float
    violations: list
    unresolved_ties: int = 0
    resolvable_lower_margin: float = math.inf  # over nodes where v - lower is representable

    def as_dict(self) -> dict:
        return {"passed": self.passed, "worst_lower_margin": self.worst_lower_margin,
                "unresolved_ties": self.unresolved_ties, "resolvable_lower_margin": self.resolvable_lower_margin,
                "worst_upper_margin": self.worst_upper_margin, "violations": self.violations[:20],
                "n_violations": len(self.violations)}


def _node_point(spec: GridSpec, idx):
    return float(spec.axis[idx[0]]) if spec.dim == 1 else tuple(float(spec.axis[k]) for k in idx)


def check_bounds(sol: PicardSolution, mu: FiniteMeasure) -> BoundsReport:
    """Check ``((1-g)t)^{g'} < v <= e^t S_t mu + e^t`` on every stored slice and node."""
    if sol.psi.kind != "power_gamma" or sol.psi.damping or sol.psi.coefficient != 1.0:
        raise ConfigurationError("bounds apply to the undamped power reaction only")
    g, gp = sol.params.gamma, sol.params.gamma_prime
    spec = sol.spec
    violations = []
    lo_m, up_m = math.inf, math.inf
    ties = 0
    res_m = math.inf
    for t, s in zip(sol.times, sol.slices):
        lower = ((1 - g) * t) ** gp
        smu = semigroup_measure(t, mu, spec).values
        upper = math.exp(t) * smu + math.exp(t)
        lm = s.values - lower
        um = upper - s.values
        lo_m = min(lo_m, float(lm.min()))
        up_m = min(up_m, float(um.min()))
        # v >= lower + S_t mu, so a tie is only acceptable where that gap rounds away
        resolvable = smu > 8 * np.finfo(float).eps * lower
        ties += int(np.count_nonzero(lm <= 0))
        if resolvable.any():
            res_m = min(res_m, float(lm[resolvable].min()))
        bad_lo = (lm <= -LOWER_SLACK) | ((lm <= 0) & resolvable)
        for idx in zip(*np.nonzero(bad_lo)):
            violations.append({"kind": "lower", "t": float(t), "x": _node_point(spec, idx),
                               "value": float(s.values[idx]), "bound": lower})
        for idx in zip(*np.nonzero(um < -UPPER_SLACK)):
            violations.append({"kind": "upper", "t": float(t), "x": _node_point(spec, idx),
                               "value": float(s.values[idx]), "bound": float(upper[idx])})
    return BoundsReport(not violations, lo_m, up_m, violations, ties, res_m)


@dataclass
class ComparisonReport:
    passed: bool
    worst_margin: float
    where: tuple | None
    solutions: tuple = field(default=(), repr=False)


def _worst(diff: np.ndarray, times, spec):
    k = np.unravel_index(int(np.argmin(diff)), diff.shape)
    return float(diff[k]), (float(times[k[0]]), _node_point(spec, k[1:]))


def compare_solutions(mu: FiniteMeasure, nu: FiniteMeasure, cfg: PicardConfig, spec: GridSpec,
                      psi: NonlinearitySpec = POWER, slack: float = COMPARE_SLACK) -> ComparisonReport:
    """Solve for ``mu <= nu`` and check ``v(mu) <= v(nu)`` nodewise."""
    if not mu.dominated_by(nu):
        raise PreconditionError("nu does not dominate mu")
    a = solve(mu, cfg, spec, psi)
    b = solve(nu, cfg, spec, psi)
    margin, where = _worst(b.values() - a.values(), a.times, spec)
    return ComparisonReport(margin >= -slack, margin, where, (a, b))


def concavity_check(mu: FiniteMeasure, nu: FiniteMeasure, lam: float, cfg: PicardConfig, spec: GridSpec,
                    psi: NonlinearitySpec = POWER, slack: float = COMPARE_SLACK) -> ComparisonReport:
    """Check ``v(lam mu + (1-lam) nu) >= lam v(mu) + (1-lam) v(nu)`` nodewise."""
    if not 0 < lam < 1:
        raise DomainError(f"lambda must lie in (0,1), got {lam}")
    a = solve(mu, cfg, spec, psi)
    b = solve(nu, cfg, spec, psi)
    c = solve(mu.scaled(lam) + nu.scaled(1 - lam), cfg, spec, psi)
    margin, where = _worst(c.values() - lam * a.values() - (1 - lam) * b.values(), a.times, spec)
    return ComparisonReport(margin >= -slack, margin, where, (a, b, c))


def pairing(x0: FiniteMeasure, v: GridField) -> float:
    """``<x0, v>``: interpolation at atoms plus grid quadrature of a density part."""
    total = 0.0
    if x0.n_atoms:
        x0.check_inside(v.spec)
        total += float(np.dot(x0.masses, v.interpolate(x0.positions)))
    if x0.density is not None:
        if x0.density.spec != v.spec:
            raise ConfigurationError("density part and solution live on different grids")
        total += float(np.sum(x0.density.values * v.values) * v.spec.cell_volume)
    return total


def laplace_functional(x0: FiniteMeasure, f_solution: PicardSolution, t: float | None = None) -> float:
    """``exp(-<x0, V_t f>)`` at the final (or requested) stored time."""
    v = f_solution.final if t is None else f_solution.slice_at(t)
    return math.exp(-pairing(x0, v))
