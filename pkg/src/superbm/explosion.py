"""Closed-form law of the explosion time of the total mass, and its sampler."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .loglaplace import GammaParams


@dataclass(frozen=True)
class ExplosionLaw:
    total_mass: float
    params: GammaParams

    def __post_init__(self):
        if not (self.total_mass > 0 and math.isfinite(self.total_mass)):
            raise DomainError(f"total mass must be positive and finite, got {self.total_mass}")

    @property
    def gamma(self) -> float:
        return self.params.gamma

    def _rate(self, t):
        # m ((1-g) t)^{g'}
        return self.total_mass * ((1 - self.gamma) * t) ** self.params.gamma_prime

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(np.isnan(t)):
            raise DomainError("explosion cdf needs t >= 0")
        out = -np.expm1(-self._rate(t))
        return float(out) if out.ndim == 0 else out

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(np.isnan(t)):
            raise DomainError("explosion survival needs t >= 0")
        out = np.exp(-self._rate(t))
        return float(out) if out.ndim == 0 else out

    def sample(self, u):
        """Inverse of the survival function: ``survival(sample(u)) = u``."""
        u = np.asarray(u, dtype=float)
        if np.any(~((u > 0) & (u < 1))):
            raise DomainError("uniform variates must lie strictly inside (0, 1)")
        # -log(u) loses relative accuracy as u -> 1; -log1p(u-1) does not for u near 1
        nl = np.where(u > 0.5, -np.log1p(u - 1.0), -np.log(u))
        out = (nl / self.total_mass) ** (1 - self.gamma) / (1 - self.gamma)
        return float(out) if out.ndim == 0 else out

    def draw(self, rng: np.random.Generator, size=None):
        u = rng.random(size)
        # Generator.random can return exactly 0
        u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
        return self.sample(u)

    def survival_laplace(self, a, t):
        """``E[exp(-a <X_t,1>); t < T] = exp(-m (a^{1-g} + t(1-g))^{g'})``."""
        a = np.asarray(a, dtype=float)
        t = np.asarray(t, dtype=float)
        if np.any(a < 0) or np.any(t < 0):
            raise DomainError("survival_laplace needs a >= 0 and t >= 0")
        g = self.gamma
        out = np.exp(-self.total_mass * (a ** (1 - g) + t * (1 - g)) ** self.params.gamma_prime)
        return float(out) if out.ndim == 0 else out


def cdf(law: ExplosionLaw, t):
    return law.cdf(t)


def sample(law: ExplosionLaw, u):
    return law.sample(u)


def survival_laplace(law: ExplosionLaw, a, t):
    return law.survival_laplace(a, t)


def particle_survival(t, n_particles: int, particle_mass: float, params: GammaParams, branch_rate: float | None = None):
    """Exact no-explosion probability by time ``t`` of the Sibuya particle system.

    With ``w = 1 - P(single particle survives)``, ``w`` solves
    ``w' = beta (w^g - w)`` from 0, giving
    ``w^{1-g} = 1 - exp(-(1-g) beta t)``; ``n`` independent particles survive
    with probability ``(1-w)^n``.  This is the finite-mass reference against
    which the small-mass bias of the simulator is quantified.
    """
    g = params.gamma
    beta = particle_mass ** (1 - g) if branch_rate is None else branch_rate
    t = np.asarray(t, dtype=float)
    w = (-np.expm1(-(1 - g) * beta * t)) ** params.gamma_prime
    out = np.exp(n_particles * np.log1p(-w))
    return float(out) if out.ndim == 0 else out


def ks_distance(samples, law: ExplosionLaw, horizon: float | None = None) -> float:
    """Kolmogorov-Smirnov distance of an empirical explosion-time sample from ``law``.

    ``samples`` may contain ``inf`` (or values beyond ``horizon``) for
    censored, non-exploded paths; the supremum is then taken over
    ``[0, horizon]`` only.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise DomainError("empty sample")
    if horizon is not None:
        x = x[x <= horizon]
    if x.size == 0:
        return float(law.cdf(horizon)) if horizon is not None else 1.0
    F = law.cdf(x)
    k = np.arange(1, x.size + 1)
    d = max(float(np.max(k / n - F)), float(np.max(F - (k - 1) / n)))
    if horizon is not None:
        d = max(d, abs(x.size / n - float(law.cdf(horizon))))
    return d
