import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from superbm.errors import DomainError
from superbm.explosion import ExplosionLaw, cdf, ks_distance, particle_survival, sample, survival_laplace
from superbm.loglaplace import GammaParams

P = GammaParams(0.5)
LAW = ExplosionLaw(1.0, P)


def test_cdf_values():
    assert cdf(LAW, 1.0) == pytest.approx(0.221199, abs=1e-6)
    assert cdf(LAW, 0.0) == 0.0
    assert cdf(ExplosionLaw(2.0, P), 2.0) == pytest.approx(0.864665, abs=1e-6)


def test_sample_values():
    assert sample(LAW, math.exp(-1)) == pytest.approx(2.0, rel=1e-14)
    assert cdf(LAW, 2.0) == pytest.approx(1 - math.exp(-1), rel=1e-14)
    near_one = sample(LAW, 1 - 1e-15)
    assert 0 < near_one < 1e-6


@given(st.floats(1e-12, 1 - 1e-12), st.floats(0.05, 0.95), st.floats(0.01, 100.0))
def test_cdf_inverts_sampler(u, g, m):
    law = ExplosionLaw(m, GammaParams(g))
    assert law.cdf(law.sample(u)) == pytest.approx(1 - u, rel=1e-9, abs=1e-15)
    assert law.survival(law.sample(u)) == pytest.approx(u, rel=1e-9)


@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.floats(0.0, 2.0), st.floats(0.1, 5.0))
def test_survival_laplace_monotone(a, b, t, m):
    law = ExplosionLaw(m, P)
    lo, hi = sorted((a, b))
    assert law.survival_laplace(hi, t) <= law.survival_laplace(lo, t)
    assert law.survival_laplace(a, t + 0.1) <= law.survival_laplace(a, t)
    assert ExplosionLaw(m * 2, P).survival_laplace(a, t) <= law.survival_laplace(a, t)


def test_survival_laplace_values():
    assert survival_laplace(LAW, 1.0, 1.0) == pytest.approx(math.exp(-2.25), rel=1e-14)
    assert survival_laplace(LAW, 0.0, 0.7) == pytest.approx(1 - cdf(LAW, 0.7), rel=1e-14)
    assert survival_laplace(ExplosionLaw(3.0, P), 0.4, 0.0) == pytest.approx(math.exp(-1.2), rel=1e-14)
    assert ExplosionLaw(1e-12, P).survival_laplace(1.0, 1.0) == pytest.approx(1.0)


def test_domain_errors():
    with pytest.raises(DomainError):
        ExplosionLaw(0.0, P)
    with pytest.raises(DomainError):
        LAW.cdf(-1.0)
    with pytest.raises(DomainError):
        LAW.sample(1.0)


def test_draws_match_law():
    rng = np.random.default_rng(12345)
    x = LAW.draw(rng, 100_000)
    assert ks_distance(x, LAW) < 1.36 / math.sqrt(1e5) * 1.5


def test_ks_distance_censoring():
    x = np.array([0.1, 0.2, np.inf, np.inf])
    d = ks_distance(x, LAW, horizon=1.0)
    assert d == pytest.approx(max(abs(0.5 - LAW.cdf(1.0)), 0.5 - LAW.cdf(0.2), LAW.cdf(0.1)))
    assert ks_distance(np.full(10, np.inf), LAW, horizon=1.0) == pytest.approx(LAW.cdf(1.0))


@pytest.mark.parametrize("eps,t", [(1e-2, 1.0), (1e-3, 0.5), (0.1, 2.0)])
def test_particle_survival_solves_its_ode(eps, t):
    # one particle: w = P(explode by t) solves w' = beta (w^g - w), leaving 0 like (beta s / 2)^2
    beta = eps ** 0.5
    s0 = 1e-9
    sol = solve_ivp(lambda s, w: beta * (np.maximum(w, 0) ** 0.5 - w), (s0, t), [(beta * s0 / 2) ** 2],
                    rtol=1e-12, atol=1e-30, method="LSODA")
    w = sol.y[0, -1]
    n = math.ceil(1 / eps)
    assert particle_survival(t, n, eps, P) == pytest.approx((1 - w) ** n, rel=1e-6)


def test_particle_survival_approaches_limit():
    errs = [abs(particle_survival(1.0, round(1 / e), e, P) - LAW.survival(1.0)) for e in (1e-2, 1e-3, 1e-4)]
    assert errs[0] > errs[1] > errs[2]
