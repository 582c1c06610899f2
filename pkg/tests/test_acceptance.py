"""Acceptance checks: each test prints one ``criterion N: PASS/FAIL: ...`` line.

The lines are also repeated in the pytest terminal summary.
"""

import os
import time

import numpy as np
import pytest

from riscouple.channel import e2e_closed_form, e2e_matrix_direct, far_field_siso
from riscouple.impedance import (assemble_impedance_blocks, mutual_impedance,
                                 mutual_impedance_field_oracle)
from riscouple.loads import load_network
from riscouple.optimizer import (OptimizationProblem, compare_coupling_awareness, decouple_ris,
                                 gradient_objective, objective_value, objective_vlos_power,
                                 optimize_ris_loads)
from riscouple.scenario import (PhysicalConstants, Role, WireElement, build_scenario,
                                config_from_dict)

from conftest import random_network, report, sec5_dict, sec5_scenario, synthetic_blocks
from oracles import two_port_symbolic

C = PhysicalConstants.from_frequency(28e9)
LAM, K0, ETA = C.wavelength, C.k0, C.eta0


def _element(rng, lo=1 / 40, hi=0.9):
    return WireElement(tuple(rng.uniform(-2, 2, 3) * LAM), rng.uniform(lo, hi) * LAM,
                       LAM / 500, Role.SCATTERER)


def _rel(a, b):
    return abs(a - b) / abs(b)


def test_criterion_1_reciprocity():
    rng = np.random.default_rng(101)
    worst, n, t0 = 0.0, 0, time.perf_counter()
    while n < 200:
        p, q = _element(rng), _element(rng)
        if np.linalg.norm(np.subtract(p.position, q.position)) < LAM / 10:
            continue
        a = mutual_impedance(p, q, K0, ETA).value
        b = mutual_impedance(q, p, K0, ETA).value
        worst = max(worst, _rel(a, b))
        n += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 60
    assert report(1, ok, f"max asymmetry {worst:.2e} over 200 pairs in {elapsed:.1f} s")


def test_criterion_2_classical_dipole():
    def dip(x):
        return WireElement((x * LAM, 0.0, 0.0), LAM / 2, LAM / 500, Role.SCATTERER)

    z11 = mutual_impedance(dip(0), dip(0), K0, ETA).value
    z12 = mutual_impedance(dip(0), dip(0.5), K0, ETA).value
    e_self = _rel(z11.real, 73.1)
    e_mut = _rel(z12, -12.5 - 29.9j)
    ok = e_self < 0.05 and e_mut < 0.05
    assert report(2, ok, f"Re Z11 = {z11.real:.2f} ohm ({e_self:.1%} off), "
                         f"Z12(lambda/2) = {z12:.2f} ohm ({e_mut:.1%} off)")


def test_criterion_3_dual_path():
    rng = np.random.default_rng(303)
    worst = 0.0
    for i in range(50):
        p, q = _element(rng), _element(rng)
        if i % 5 == 0:
            q = p
        a = mutual_impedance(p, q, K0, ETA).value
        b = mutual_impedance_field_oracle(p, q, K0, ETA).value
        worst = max(worst, _rel(a, b))
    assert report(3, worst < 1e-6, f"max disagreement {worst:.2e} on 50 pairs (10 self terms)")


def _random_physical(rng):
    rows, cols = rng.integers(1, 9, 2)
    spacing = LAM * rng.uniform(1 / 16, 1 / 2)
    n_t, n_r = rng.integers(1, 5, 2)

    def array(sign):
        base = np.array([rng.uniform(2, 6), sign * rng.uniform(2, 6), rng.uniform(-2, 2)])
        return [list(base + [0.0, 0.0, 0.3 * i]) for i in range(n_t if sign < 0 else n_r)]

    elem = {"length": "lambda/32", "radius": "lambda/500"}
    d = {"system": {"frequency_hz": 28e9},
         "transmitter": {"positions": array(-1), **elem},
         "receiver": {"positions": array(1), **elem},
         "ris": {"rows": int(rows), "cols": int(cols), "spacing": spacing, **elem,
                 "load": {"mode": "series", "resistance": float(rng.uniform(0.5, 3)),
                          "inductance": float(rng.uniform(0, 3e-9))}}}
    s = build_scenario(config_from_dict(d))
    return assemble_impedance_blocks(s), load_network(s)


def test_criterion_4_closed_form_equivalence():
    rng = np.random.default_rng(404)
    worst = 0.0
    for i in range(100):
        if i % 2:
            n_t, n_r = rng.integers(1, 5, 2)
            n_s = int(rng.integers(0, 65))
            b, n = synthetic_blocks(rng, n_t, n_s, n_r), random_network(rng, n_t, n_s, n_r)
        else:
            b, n = _random_physical(rng)
        d = e2e_matrix_direct(b, n).h_e2e
        c = e2e_closed_form(b, n).h_e2e
        worst = max(worst, float(np.max(np.abs(c - d) / np.abs(d))))
    assert report(4, worst < 1e-10, f"max entrywise discrepancy {worst:.2e} on 100 scenarios "
                                    f"(50 physical, 50 synthetic)")


def test_criterion_5_far_field_form():
    u_t = np.array([1.0, -1.0, 0.3]) / np.linalg.norm([1.0, -1.0, 0.3])
    u_r = np.array([1.0, 1.0, 0.1]) / np.linalg.norm([1.0, 1.0, 0.1])
    errs = []
    for D in (10, 30, 100, 300):
        s = sec5_scenario(4, spacing="lambda/4", tx=tuple(D * LAM * u_t), rx=tuple(D * LAM * u_r))
        b, n = assemble_impedance_blocks(s), load_network(s)
        d = e2e_matrix_direct(b, n).h_e2e[0, 0]
        errs.append(_rel(far_field_siso(b, n).h_e2e[0, 0], d))
    monotone = all(x > y for x, y in zip(errs, errs[1:]))
    ok = monotone and max(errs[2:]) < 0.01
    assert report(5, ok, "discrepancy at 10/30/100/300 lambda: "
                         + ", ".join(f"{e:.1e}" for e in errs))


def test_criterion_6_decay_laws():
    p = WireElement((0.0, 0.0, 0.0), LAM / 32, LAM / 500, Role.SCATTERER)
    d = np.geomspace(10, 1000, 9)
    z = [abs(mutual_impedance(p, WireElement((x * LAM, 0, 0), LAM / 32, LAM / 500,
                                             Role.SCATTERER), K0, ETA).value) for x in d]
    slope = np.polyfit(np.log(d), np.log(z), 1)[0]

    u_t = np.array([1.0, -0.7, 0.2]) / np.linalg.norm([1.0, -0.7, 0.2])
    u_r = np.array([1.0, 0.9, -0.1]) / np.linalg.norm([1.0, 0.9, -0.1])

    def vlos(D):
        s = sec5_scenario(2, spacing="lambda/8", tx=tuple(D * LAM * u_t), rx=tuple(D * LAM * u_r))
        b, n = assemble_impedance_blocks(s), load_network(s)
        return abs(e2e_matrix_direct(b, n).h_vlos[0, 0])

    ratio = vlos(50) / vlos(100)
    ok = abs(slope + 1) <= 0.05 and abs(ratio / 4 - 1) <= 0.02
    assert report(6, ok, f"|Z| slope {slope:.4f}, |H_VLOS| shrink factor {ratio:.4f} on doubling")


def test_criterion_7_two_port():
    il_fn, vl_fn = two_port_symbolic()
    rng = np.random.default_rng(707)
    worst = 0.0
    cases = [(synthetic_blocks(rng, 1, 0, 1), random_network(rng, 1, 0, 1)) for _ in range(5)]
    s = build_scenario(config_from_dict(sec5_dict(0)))
    cases.append((assemble_impedance_blocks(s), load_network(s)))
    for b, n in cases:
        args = (n.z_g[0], n.z_l[0], b.TT[0, 0], b.RR[0, 0], b.RT[0, 0], n.v_g[0])
        ref = complex(vl_fn(*args)) / n.v_g[0]
        for h in (e2e_matrix_direct(b, n).h_e2e, e2e_closed_form(b, n).h_e2e):
            worst = max(worst, _rel(h[0, 0], ref))
    assert report(7, worst < 1e-12, f"max deviation from the symbolic solution {worst:.2e} "
                                     f"on {len(cases)} two-ports")


def test_criterion_8_coupling_matters():
    gaps = []
    for sp in ("lambda/16", "lambda/8", "lambda/4", "lambda/2"):
        s = sec5_scenario(8, spacing=sp)
        b, n = assemble_impedance_blocks(s), load_network(s)
        c = objective_vlos_power(n.z_ris, b)
        u = objective_vlos_power(n.z_ris, decouple_ris(b))
        gaps.append(abs(c - u) / c)
    shrinking = all(x > y for x, y in zip(gaps, gaps[1:]))
    ok = gaps[0] > 1e-3 and shrinking
    assert report(8, ok, "relative |H_VLOS|^2 gap at lambda/16, /8, /4, /2: "
                         + ", ".join(f"{g:.2e}" for g in gaps))


def test_criterion_9_optimizer():
    single = assemble_impedance_blocks(sec5_scenario(1))
    x_star = -single.SS[0, 0].imag
    res = optimize_ris_loads(OptimizationProblem(1, 1.0, -3000, 3000), single)
    opt_err = abs(res.reactances[0] - x_star)

    rng = np.random.default_rng(909)
    gen = assemble_impedance_blocks(sec5_scenario(2, spacing="lambda/8", tx=(3.0, 0.0, 1.0),
                                                  rx=(3.0, 0.0, -1.0)))
    syn, net = synthetic_blocks(rng, 2, 4, 2), random_network(rng, 2, 4, 2)
    grad_err = 0.0
    for i in range(10):
        if i % 2:
            b, obj, x, r = syn, "e2e_entry_power", rng.uniform(-30, 30, 4), rng.uniform(0.5, 2, 4)
        else:
            b, obj, x, r = gen, "vlos_power", rng.uniform(-500, 500, 4), np.ones(4)
        h = 1e-3
        g = gradient_objective(r + 1j * x, b, obj, net, (1, 0))
        fd = np.array([(objective_value(r + 1j * (x + h * e), b, obj, net, (1, 0))
                        - objective_value(r + 1j * (x - h * e), b, obj, net, (1, 0))) / (2 * h)
                       for e in np.eye(4)])
        grad_err = max(grad_err, float(np.max(np.abs(g - fd)) / np.max(np.abs(fd))))

    wins = 0
    for _ in range(10):
        tx = (rng.uniform(1, 5), rng.uniform(-4, 4), rng.uniform(-2, 2))
        rx = (rng.uniform(1, 5), rng.uniform(-4, 4), rng.uniform(-2, 2))
        sp = LAM * rng.uniform(1 / 16, 1 / 4)
        b = assemble_impedance_blocks(sec5_scenario(2, spacing=sp, tx=tx, rx=rx))
        cmp = compare_coupling_awareness(OptimizationProblem(4, 1.0, -2000, 2000, n_starts=4), b)
        wins += cmp.aware_objective >= cmp.unaware_objective
    ok = opt_err < 1e-6 and grad_err < 1e-5 and wins == 10
    assert report(9, ok, f"N_ris=1 optimum error {opt_err:.1e} ohm, max gradient error "
                         f"{grad_err:.1e}, aware >= unaware in {wins}/10 scenarios")


@pytest.mark.slow
def test_criterion_10_performance():
    s = sec5_scenario(32)
    t0 = time.perf_counter()
    b = assemble_impedance_blocks(s)
    t_asm1 = time.perf_counter() - t0
    e2e_matrix_direct(b, load_network(s))
    t_total = time.perf_counter() - t0

    t0 = time.perf_counter()
    b8 = assemble_impedance_blocks(s, jobs=8)
    t_asm8 = time.perf_counter() - t0
    np.testing.assert_array_equal(b8.full, b.full)
    efficiency = t_asm1 / (8 * t_asm8)
    ok = t_total < 600 and efficiency >= 0.5
    assert report(10, ok, f"N_ris=1024 pipeline {t_total:.1f} s; assembly 1 worker "
                          f"{t_asm1:.2f} s, 8 workers {t_asm8:.2f} s, efficiency "
                          f"{efficiency:.2f} with {os.cpu_count()} CPU(s) available")
