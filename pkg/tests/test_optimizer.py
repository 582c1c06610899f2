from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from riscouple.impedance import ImpedanceBlocks, assemble_impedance_blocks
from riscouple.loads import load_network
from riscouple.optimizer import (NoFeasibleStart, OptimizationProblem, compare_coupling_awareness,
                                 decouple_ris, gradient_objective, hessian_diagonal, objective_value,
                                 objective_vlos_power, optimize_ris_loads)

from conftest import random_network, sec5_scenario, synthetic_blocks


@pytest.fixture(scope="module")
def single():
    return assemble_impedance_blocks(sec5_scenario(1))


@pytest.fixture(scope="module")
def quad():
    # Tx and Rx on the RIS normal through its centre: all four elements are equivalent
    s = sec5_scenario(2, spacing="lambda/8", tx=(0.0, 3.0, 0.0), rx=(0.0, 5.0, 0.0))
    return s, assemble_impedance_blocks(s)


@pytest.fixture(scope="module")
def generic():
    s = sec5_scenario(2, spacing="lambda/8", tx=(3.0, 0.0, 1.0), rx=(3.0, 0.0, -1.0))
    return s, assemble_impedance_blocks(s)


def test_single_element_closed_form(single):
    b = single
    z = 1.0 + 20j
    expected = abs(b.RS[0, 0]) ** 2 * abs(b.ST[0, 0]) ** 2 / abs(z + b.SS[0, 0]) ** 2
    assert objective_vlos_power([z], b) == pytest.approx(expected, rel=1e-12)
    assert objective_vlos_power([1e20], b) < 1e-40


def test_gradient_zero_at_single_optimum(single):
    x_star = -single.SS[0, 0].imag
    g = gradient_objective([1 + 1j * x_star], single)
    f = objective_vlos_power([1 + 1j * x_star], single)
    assert abs(g[0]) < 1e-12 * f


@pytest.mark.parametrize("objective", ["vlos_power", "e2e_entry_power"])
def test_gradient_matches_central_differences(objective, rng):
    b = synthetic_blocks(rng, 2, 4, 2)
    n = random_network(rng, 2, 4, 2)
    h = 1e-3
    for _ in range(10):
        x = rng.uniform(-30, 30, 4)
        r = rng.uniform(0.5, 2, 4)
        g = gradient_objective(r + 1j * x, b, objective, n, (1, 0))
        fd = np.array([(objective_value(r + 1j * (x + h * e), b, objective, n, (1, 0))
                        - objective_value(r + 1j * (x - h * e), b, objective, n, (1, 0))) / (2 * h)
                       for e in np.eye(4)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * np.max(np.abs(fd)))


@pytest.mark.parametrize("objective", ["vlos_power", "e2e_entry_power"])
def test_hessian_diagonal_matches_differences(objective, rng):
    b = synthetic_blocks(rng, 1, 3, 2)
    n = random_network(rng, 1, 3, 2)
    x, r, h = rng.uniform(-10, 10, 3), np.ones(3), 1e-3
    hd = hessian_diagonal(r + 1j * x, b, objective, n, (1, 0))
    fd = np.array([(gradient_objective(r + 1j * (x + h * e), b, objective, n, (1, 0))
                    - gradient_objective(r + 1j * (x - h * e), b, objective, n, (1, 0)))[i] / (2 * h)
                   for i, e in enumerate(np.eye(3))])
    np.testing.assert_allclose(hd, fd, rtol=1e-5, atol=1e-6 * np.max(np.abs(fd)))


@given(st.floats(-3000, 3000))
@settings(max_examples=10, deadline=None)
def test_single_optimum_from_any_start(single, x0):
    x_star = -single.SS[0, 0].imag
    p = OptimizationProblem(1, 1.0, -3000, 3000, n_starts=1, x0=(x0,))
    res = optimize_ris_loads(p, single)
    assert res.reactances[0] == pytest.approx(x_star, abs=1e-6)
    assert res.converged


def test_trajectory_monotone_and_deterministic(generic):
    _, b = generic
    p = OptimizationProblem(4, 1.0, -2000, 2000, seed=7)
    r1 = optimize_ris_loads(p, b)
    r2 = optimize_ris_loads(p, b)
    assert np.all(np.diff(r1.trajectory) >= 0)
    np.testing.assert_array_equal(r1.reactances, r2.reactances)
    assert r1.trajectory == r2.trajectory


def test_symmetric_geometry_gives_equal_reactances(quad):
    _, b = quad
    p = OptimizationProblem(4, 1.0, -2000, 2000, seed=3)
    res = optimize_ris_loads(p, b)
    np.testing.assert_allclose(res.reactances, res.reactances.mean(), atol=1e-4)

    # oracle: one shared reactance, searched in 1-D
    def neg(x):
        return -objective_vlos_power(np.full(4, 1 + 1j * x), b)

    grid = np.linspace(-2000, 2000, 4001)
    x0 = grid[np.argmin([neg(x) for x in grid])]
    best = minimize_scalar(neg, bounds=(x0 - 1, x0 + 1), method="bounded",
                           options={"xatol": 1e-9})
    assert res.reactances.mean() == pytest.approx(best.x, abs=1e-3)
    # away from the optimum, equivalent elements still see equal gradient components
    g = gradient_objective(np.full(4, 1 + 100j), b)
    np.testing.assert_allclose(g, g[0], rtol=1e-9)


def test_reoptimization_is_stable(generic):
    _, b = generic
    p = OptimizationProblem(4, 1.0, -2000, 2000)
    r1 = optimize_ris_loads(p, b)
    assert r1.converged
    r2 = optimize_ris_loads(replace(p, x0=tuple(r1.reactances), n_starts=1), b)
    assert abs(r2.objective - r1.objective) <= p.obj_tol * r1.objective * 10


def test_coupling_aware_beats_unaware(generic):
    _, b = generic
    cmp = compare_coupling_awareness(OptimizationProblem(4, 1.0, -2000, 2000), b)
    assert cmp.aware_objective >= cmp.unaware_objective
    assert cmp.unaware_objective == pytest.approx(objective_vlos_power(cmp.unaware.loads, b))


def test_decouple_only_touches_ris_block(quad):
    _, b = quad
    d = decouple_ris(b)
    np.testing.assert_array_equal(d.SS, np.diag(np.diag(b.SS)))
    np.testing.assert_array_equal(d.TS, b.TS)


def test_inductance_mode_keeps_positive_reactance(quad):
    s, b = quad
    p = OptimizationProblem(4, 1.0, -2000, 2000, parameterization="inductance",
                            omega=s.constants.omega)
    res = optimize_ris_loads(p, b)
    assert np.all(res.reactances >= 0)
    np.testing.assert_allclose(res.inductances * s.constants.omega, res.reactances)


def test_e2e_objective_runs(quad):
    s, b = quad
    p = OptimizationProblem(4, 1.0, objective="e2e_entry_power", network=load_network(s), n_starts=2)
    res = optimize_ris_loads(p, b)
    assert np.all(np.diff(res.trajectory) >= 0)


def test_no_feasible_start():
    Z = np.full((3, 3), np.nan, complex)
    with pytest.raises(NoFeasibleStart):
        optimize_ris_loads(OptimizationProblem(1, n_starts=3), ImpedanceBlocks(Z, 1, 1, 1))


@pytest.mark.parametrize("kw", [dict(x_min=1, x_max=0), dict(x_max=np.inf),
                                dict(resistance=-1.0), dict(parameterization="inductance"),
                                dict(objective="snr")])
def test_problem_validation(kw):
    with pytest.raises(ValueError):
        OptimizationProblem(1, **kw)
