import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gamma as gamma_fn

from superbm.errors import ConfigurationError, DomainError
from superbm.explosion import ExplosionLaw, particle_survival
from superbm.heatkernel import FiniteMeasure, GridSpec
from superbm.loglaplace import GammaParams, PicardConfig, laplace_functional, solve_function_ic
from superbm.particles import (
    SimConfig,
    TestFunction,
    empirical_explosion_match,
    empirical_laplace,
    explosion_sample,
    explosion_times,
    initial_positions,
    particle_laplace_constant,
    particle_laplace_functional,
    rng_for,
    sample_sibuya,
    sibuya_pmf,
    sibuya_survival,
    simulate,
    simulate_many,
)

P = GammaParams(0.5)
D0 = FiniteMeasure.dirac(0.0)


def test_sibuya_probabilities():
    assert sibuya_pmf(1, 0.5) == pytest.approx(0.5, rel=1e-14)
    assert sibuya_pmf(2, 0.5) == pytest.approx(0.125, rel=1e-14)
    assert sibuya_survival(2, 0.5) == pytest.approx(0.375, rel=1e-14)


@given(st.floats(0.05, 0.95))
@settings(deadline=None)
def test_sibuya_pmf_matches_survival_differences(g):
    k = np.arange(1, 200)
    assert np.allclose(sibuya_pmf(k, g), sibuya_survival(k - 1, g) - sibuya_survival(k, g), rtol=1e-10)
    assert np.all(np.diff(sibuya_survival(k, g)) < 0)


def test_sibuya_small_values_frequencies():
    x = sample_sibuya(P, np.random.default_rng(1), 400_000)
    assert x.min() >= 1
    for k in (1, 2, 3):
        p = float(sibuya_pmf(k, 0.5))
        assert abs(np.mean(x == k) - p) < 4 * math.sqrt(p * (1 - p) / x.size)


def test_sibuya_tail():
    # P(L > k) k^g Gamma(1-g) -> 1
    x = sample_sibuya(P, np.random.default_rng(2), 10_000_000)
    for k in (1e3, 1e4, 1e5):
        ratio = np.mean(x > k) * k**0.5 * gamma_fn(0.5)
        assert abs(ratio - 1) < 0.05


def test_sim_config_validation():
    with pytest.raises(ConfigurationError) as exc:
        SimConfig(P, -1.0, 0.0, replicates=0)
    assert len(exc.value.problems) >= 3
    with pytest.raises(ConfigurationError):
        SimConfig(P, 1.0, 1.0, motion_dt=0.5)
    cfg = SimConfig(P, 1e-2, 1.0)
    assert cfg.branch_rate == pytest.approx(0.1)
    assert cfg.scaling == pytest.approx(1.0)


def test_initial_positions():
    x0 = FiniteMeasure.atomic([0.0, 1.0], [1.0, 0.25])
    pos = initial_positions(x0, 1e-2)
    assert pos.shape == (125, 1)
    with pytest.raises(DomainError):
        initial_positions(FiniteMeasure.dirac(0.0, 1.0).scaled(0.0), 1e-2)


def test_tiny_horizon_keeps_count():
    cfg = SimConfig(P, 1e-2, 1e-3, motion_dt=1e-3)
    p = simulate(D0, cfg, rng_for(0, 0), snapshot_times=(1e-3,))
    # expected number of branchings beta * horizon * count = 1e-2
    assert p.snapshot_counts == [100] or p.event_times.size > 0


def test_free_particle_is_brownian():
    cfg = SimConfig(P, 1.0, 0.5, motion_dt=0.01, branch_rate=0.0, replicates=4000)
    paths = simulate_many(D0, cfg, (0.5,))
    x = np.array([p.snapshot_at(0.5)[0, 0] for p in paths])
    assert all(p.snapshot_counts == [1] for p in paths)
    assert abs(x.mean()) < 4 * math.sqrt(0.5 / x.size)
    assert abs(x.var() - 0.5) < 4 * 0.5 * math.sqrt(2 / x.size)


def test_reproducible_across_threads():
    cfg = SimConfig(P, 1e-2, 1.0, motion_dt=1e-2, replicates=40, seed=99)
    a = simulate_many(D0, cfg, (0.5, 1.0), threads=1)
    b = simulate_many(D0, cfg, (0.5, 1.0), threads=3)
    c = simulate_many(D0, cfg, (0.5, 1.0), start=20, count=20)
    for p, q in zip(a, b):
        assert p.exploded == q.exploded and p.explosion_time == q.explosion_time
        for x, y in zip(p.snapshots, q.snapshots):
            assert np.array_equal(x, y)
    for p, q in zip(a[20:], c):
        assert p.replicate == q.replicate and np.array_equal(p.event_counts, q.event_counts)


def test_counting_fast_path_matches_simulation():
    cfg = SimConfig(P, 1e-2, 1.0, motion_dt=1e-2, replicates=200, seed=5, track_positions=False)
    T = explosion_sample(D0, cfg)
    ref = explosion_times(simulate_many(D0, cfg))
    assert np.array_equal(T, ref)


def test_exploded_fraction():
    cfg = SimConfig(P, 1e-3, 1.0, cap_mass_factor=1e6, seed=3, replicates=10_000, track_positions=False)
    T = explosion_sample(D0, cfg)
    frac = np.mean(np.isfinite(T))
    F = ExplosionLaw(1.0, P).cdf(1.0)
    se = math.sqrt(F * (1 - F) / T.size)
    bias = abs(1 - particle_survival(1.0, 1000, 1e-3, P) - F)
    assert abs(frac - F) <= 3 * se + bias
    assert F == pytest.approx(0.2212, abs=1e-4)


def test_tiny_cap_explodes_everything():
    cfg = SimConfig(P, 1e-2, 1.0, n_max=5, replicates=10)
    assert all(p.exploded and p.explosion_time == 0.0 for p in simulate_many(D0, cfg))
    assert np.all(explosion_sample(D0, cfg) == 0.0)


@pytest.fixture(scope="module")
def tracked_paths():
    cfg = SimConfig(P, 1e-2, 0.5, motion_dt=1e-2, replicates=3000, seed=11)
    return cfg, simulate_many(D0, cfg, (0.5,))


def test_laplace_constant_against_closed_form(tracked_paths):
    cfg, paths = tracked_paths
    for a in (0.5, 1.0):
        est, se = empirical_laplace(paths, a, 0.5)
        exact = ExplosionLaw(1.0, P).survival_laplace(a, 0.5)
        bias = abs(particle_laplace_constant(a, 0.5, 100, cfg) - exact)
        assert abs(est - exact) <= 3 * se + bias


def test_laplace_zero_is_survival(tracked_paths):
    _, paths = tracked_paths
    est, se = empirical_laplace(paths, 0.0, 0.5)
    surv = np.mean([not (p.exploded and p.explosion_time <= 0.5) for p in paths])
    assert est == pytest.approx(surv, abs=1e-15)
    F = ExplosionLaw(1.0, P).cdf(0.5)
    bias = abs(1 - particle_survival(0.5, 100, 1e-2, P) - F)
    assert abs(est - (1 - F)) <= 3 * math.sqrt(F * (1 - F) / len(paths)) + bias


def test_laplace_bump_against_pde(tracked_paths):
    cfg, paths = tracked_paths
    spec = GridSpec(1, 6.5, 512)
    bump = TestFunction(0.0, 1.0, (0.0,), 0.5)
    sol = solve_function_ic(bump.on_grid(spec), PicardConfig(P, 0.5, time_steps=32))
    pde = laplace_functional(D0, sol)
    fe = particle_laplace_functional(D0, bump, 0.5, cfg, spec, time_steps=32)
    est, se = empirical_laplace(paths, bump, 0.5)
    assert abs(est - pde) <= 3 * se + abs(fe - pde)


def test_particle_laplace_constant_limit():
    cfg = SimConfig(P, 1e-6, 1.0)
    exact = ExplosionLaw(1.0, P).survival_laplace(1.0, 1.0)
    assert particle_laplace_constant(1.0, 1.0, 10**6, cfg) == pytest.approx(exact, rel=5e-3)


def test_crossings_scale_invariant():
    cfg = SimConfig(P, 1e-2, 1.0, motion_dt=1e-2, cap_mass_factor=1e4, replicates=200, seed=4)
    paths = simulate_many(D0, cfg, watch=TestFunction(2.0, 0.0), threshold=100.0)
    hit = [p for p in paths if p.mass_crossing is not None]
    assert hit
    assert all(p.f_crossing == p.mass_crossing for p in hit)
    # paths that stay below the level report neither time
    assert all(p.f_crossing is None for p in paths if p.mass_crossing is None)
    assert any(p.mass_crossing is None for p in paths)
    rep = empirical_explosion_match(paths, TestFunction(2.0, 0.0), 100.0)
    assert rep.passed and rep.agreement == 1.0
