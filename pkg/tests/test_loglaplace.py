import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superbm.errors import ConfigurationError, ConvergenceError, DomainError, PreconditionError
from superbm.heatkernel import FiniteMeasure, GridField, GridSpec, heat_kernel
from superbm.loglaplace import (
    LINEAR,
    GammaParams,
    NonlinearitySpec,
    PicardConfig,
    check_bounds,
    compare_solutions,
    concavity_check,
    exact_constant_solution,
    exact_linear_majorant,
    laplace_functional,
    solve,
    solve_function_ic,
)

P = GammaParams(0.5)
SPEC = GridSpec(1, 6.5, 1024)
SMALL = GridSpec(1, 6.5, 256)
CFG = PicardConfig(P, 1.0)
QUICK = PicardConfig(P, 1.0, time_steps=32)


@pytest.fixture(scope="module")
def dirac_solution():
    return solve(FiniteMeasure.dirac(0.0), CFG, SPEC)


def test_gamma_domain():
    for g in (0.0, 1.0, -0.5, 1.5, float("nan")):
        with pytest.raises(DomainError):
            GammaParams(g)
    assert GammaParams(0.5).gamma_prime == 2.0


def test_config_collects_problems():
    with pytest.raises(ConfigurationError) as exc:
        PicardConfig(P, -1.0, time_steps=2, tol=0.0)
    assert len(exc.value.problems) == 3


def test_exact_constant_solution_values():
    assert exact_constant_solution(1.0, 1.0, P) == pytest.approx(2.25, abs=1e-14)
    assert exact_constant_solution(4.0, 0.0, P) == pytest.approx(4.0, abs=1e-14)
    assert exact_constant_solution(0.0, 1.0, P) == pytest.approx(0.25, abs=1e-14)


@given(st.floats(0.0, 10.0), st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.05, 0.95))
def test_constant_solution_is_a_flow(a, s, t, g):
    # the flat solution composes as an ODE flow
    p = GammaParams(g)
    two_step = exact_constant_solution(exact_constant_solution(a, s, p), t, p)
    assert two_step == pytest.approx(exact_constant_solution(a, s + t, p), rel=1e-9)


@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.0, 2.0))
def test_constant_solution_monotone_in_data(a, b, t):
    lo, hi = sorted((a, b))
    assert exact_constant_solution(lo, t, P) <= exact_constant_solution(hi, t, P)


def test_constant_initial_function():
    sol = solve_function_ic(GridField.constant(SPEC, 1.0), CFG)
    interior = np.abs(SPEC.axis) < SPEC.half_extent / 2
    assert np.max(np.abs(sol.final.values[interior] / 2.25 - 1)) < 1e-3
    assert sol.converged


def test_initial_trace():
    sol = solve_function_ic(GridField.constant(SMALL, 4.0), QUICK)
    assert sol.slice_at(QUICK.t_min).values == pytest.approx(exact_constant_solution(4.0, QUICK.t_min, P))
    assert abs(sol.slice_at(QUICK.t_min).values[0] - 4.0) < 0.03


def test_wide_box_density_acts_like_constant():
    mu = FiniteMeasure.from_density(GridField.constant(SPEC, 1.0))
    sol = solve(mu, CFG, SPEC)
    interior = np.abs(SPEC.axis) < 2.0
    assert np.max(np.abs(sol.final.values[interior] - 2.25)) < 1e-3


def test_bump_stays_above_flat_lower_bound():
    f = GridField(SMALL, np.exp(-SMALL.axis**2 / 0.5))
    sol = solve_function_ic(f, QUICK)
    for t, s in zip(sol.times, sol.slices):
        if t >= QUICK.t_min:
            assert np.all(s.values > ((1 - P.gamma) * t) ** P.gamma_prime)


def test_dirac_bounds(dirac_solution):
    v = dirac_solution.final.values
    assert np.all(v > 0.25)
    assert np.all(v <= math.e * heat_kernel(1.0, SPEC.axis) + math.e + 1e-9)
    rep = check_bounds(dirac_solution, FiniteMeasure.dirac(0.0))
    assert rep.passed and rep.resolvable_lower_margin > 0 and rep.worst_upper_margin > 0


def test_bounds_detect_scaled_slices(dirac_solution):
    mu = FiniteMeasure.dirac(0.0)
    for factor, kind in ((0.01, "lower"), (100.0, "upper")):
        bad = dataclasses.replace(dirac_solution, slices=[GridField(s.spec, s.values * factor)
                                                          for s in dirac_solution.slices])
        rep = check_bounds(bad, mu)
        assert not rep.passed
        assert {v["kind"] for v in rep.violations} == {kind}


def test_linear_majorant(dirac_solution):
    mu = FiniteMeasure.dirac(0.0)
    assert exact_linear_majorant(mu, 1.0, 0.0) == pytest.approx(2.8027193798782726, rel=1e-14)
    sol = solve(mu, CFG, SPEC, LINEAR)
    for t, s in zip(sol.times, sol.slices):
        ex = exact_linear_majorant(mu, t, SPEC.axis)
        assert np.max(np.abs(s.values / ex - 1)) < 1e-3
    assert sol.final.interpolate([0.0])[0] == pytest.approx(2.8027193798782726, rel=1e-3)


def test_linear_majorant_degenerate_cases():
    zero = FiniteMeasure.from_density(GridField.constant(SMALL, 0.0))
    assert exact_linear_majorant(zero, 0.7, [0.0, 1.0]) == pytest.approx(math.expm1(0.7))
    g = FiniteMeasure.from_density(GridField(SMALL, np.exp(-SMALL.axis**2)))
    assert exact_linear_majorant(g, 1e-4, [0.3]) == pytest.approx(math.exp(-0.09), rel=1e-3)


def test_picard_iterates_increase(dirac_solution):
    assert min(dirac_solution.min_increments) >= -1e-12
    diffs = dirac_solution.sup_diffs
    assert diffs[-1] < CFG.tol


def test_nonconvergence_is_reported():
    cfg = PicardConfig(P, 1.0, time_steps=16, max_iters=2)
    with pytest.raises(ConvergenceError) as exc:
        solve(FiniteMeasure.dirac(0.0), cfg, SMALL)
    assert len(exc.value.sup_diffs) == 2


def test_solver_rejects_bad_data():
    with pytest.raises(DomainError):
        solve_function_ic(GridField.constant(SMALL, 0.0), QUICK)
    with pytest.raises(ConfigurationError):
        solve(FiniteMeasure.dirac(10.0), QUICK, SMALL)


def test_comparison():
    d0 = FiniteMeasure.dirac(0.0)
    rep = compare_solutions(d0, FiniteMeasure.dirac(0.0, 2.0), QUICK, SMALL)
    assert rep.passed
    rep = compare_solutions(d0, d0 + FiniteMeasure.dirac(1.0), QUICK, SMALL)
    assert rep.passed
    same = compare_solutions(d0, d0, QUICK, SMALL)
    assert abs(same.worst_margin) < 1e-12
    with pytest.raises(PreconditionError):
        compare_solutions(FiniteMeasure.dirac(0.0, 2.0), d0, QUICK, SMALL)


def test_concavity():
    d0, d1 = FiniteMeasure.dirac(0.0), FiniteMeasure.dirac(1.0)
    assert concavity_check(d0, d1, 0.5, QUICK, SMALL).passed
    assert abs(concavity_check(d0, d0, 0.3, QUICK, SMALL).worst_margin) < 1e-9


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.1, 0.9]))
@settings(max_examples=4, deadline=None)
def test_concavity_random_atoms(seed, lam):
    rng = np.random.default_rng(seed)
    mu = FiniteMeasure.atomic(rng.uniform(-2, 2, 3), rng.uniform(0.1, 2, 3))
    nu = FiniteMeasure.atomic(rng.uniform(-2, 2, 2), rng.uniform(0.1, 2, 2))
    assert concavity_check(mu, nu, lam, QUICK, SMALL).passed


def test_laplace_functional_closed_forms():
    for m, a in ((1.0, 1.0), (0.5, 2.0)):
        sol = solve_function_ic(GridField.constant(SMALL, a), QUICK)
        x0 = FiniteMeasure.dirac(0.0, m)
        expected = math.exp(-m * (a ** (1 - P.gamma) + (1 - P.gamma)) ** P.gamma_prime)
        assert laplace_functional(x0, sol) == pytest.approx(expected, rel=1e-10)
    sol = solve_function_ic(GridField.constant(SMALL, 1.0), QUICK)
    assert laplace_functional(FiniteMeasure.dirac(0.0, 1e-12), sol) == pytest.approx(1.0)


def test_damped_reaction_matches_flat_solution():
    psi = NonlinearitySpec("power_gamma", damping=0.7, coefficient=1.3)
    sol = solve_function_ic(GridField.constant(SMALL, 0.4), QUICK, psi=psi)
    ex = exact_constant_solution(0.4, 1.0, P, damping=0.7, coefficient=1.3)
    assert np.allclose(sol.final.values, ex, rtol=1e-10)


def test_slice_dump(tmp_path, dirac_solution):
    path = tmp_path / "slices.csv"
    dirac_solution.to_csv(path, ["hello"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# hello" and lines[1] == "t,node,value"
    t, node, val = lines[-1].split(",")
    assert float(t) == dirac_solution.times[-1] and int(node) == SPEC.n - 1
    assert float(val) == dirac_solution.final.values[-1]


@given(st.floats(0.1, 2.0), st.floats(0.1, 2.0))
@settings(max_examples=5, deadline=None)
def test_solution_monotone_in_scaling(a, b):
    lo, hi = sorted((a, b))
    base = np.exp(-SMALL.axis**2)
    v_lo = solve_function_ic(GridField(SMALL, lo * base), QUICK).values()
    v_hi = solve_function_ic(GridField(SMALL, hi * base), QUICK).values()
    assert np.all(v_lo <= v_hi + 1e-9)


def test_initial_trace_of_measure():
    # <v(t_min), phi> -> <mu, phi> as t_min decreases
    mu = FiniteMeasure.atomic([-0.5, 0.7], [1.0, 0.5])
    phi = np.exp(-SPEC.axis**2)
    exact = 1.0 * math.exp(-0.25) + 0.5 * math.exp(-0.49)
    errs = []
    for t_min in (1e-1, 1e-2, 1e-3):
        sol = solve(mu, PicardConfig(P, 0.2, time_steps=32, t_min=t_min), SPEC)
        v = sol.slice_at(t_min).values
        errs.append(abs(float(np.sum(v * phi) * SPEC.h) - exact))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.01
