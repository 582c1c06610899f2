import math

import numpy as np
import pytest

from riscouple.impedance import (ImpedanceBlocks, assemble_impedance_blocks, cache_key,
                                 cached_impedance_blocks, enforce_reciprocity, load_blocks,
                                 mutual_impedance, mutual_impedance_field_oracle, save_blocks)
from riscouple.quadrature import QuadratureError, QuadratureSpec
from riscouple.scenario import PhysicalConstants, Role, WireElement

from conftest import sec5_scenario
from oracles import half_wave_self_resistance, half_wave_side_by_side_mutual

C = PhysicalConstants.from_frequency(28e9)
LAM, K0, ETA = C.wavelength, C.k0, C.eta0


def el(pos, l=LAM / 2, a=LAM / 500, i=0):
    return WireElement(tuple(float(v) * LAM for v in pos), l, a, Role.SCATTERER, i)


def Z(p, q, **kw):
    return mutual_impedance(p, q, K0, ETA, QuadratureSpec(**kw)).value


def test_half_wave_self_resistance():
    z = Z(el((0, 0, 0)), el((0, 0, 0)))
    assert z.real == pytest.approx(half_wave_self_resistance(ETA), rel=2e-3)
    # thin-wire reactance is close to the classical 42.5 ohm
    assert 38 < z.imag < 45


@pytest.mark.parametrize("d", [0.5, 1.0, 2.0])
def test_half_wave_mutual_side_by_side(d):
    z = Z(el((0, 0, 0)), el((d, 0, 0)))
    ref = half_wave_side_by_side_mutual(d, ETA)
    assert abs(z - ref) < 1e-3 * abs(ref) + 1e-3


def test_reciprocity_of_single_pair():
    p, q = el((0, 0, 0), LAM / 3), el((0.4, 0.3, 0.7), LAM / 5)
    a, b = Z(p, q), Z(q, p)
    assert abs(a - b) < 1e-12 * abs(a)


def test_translation_invariance():
    p, q = el((0, 0, 0), LAM / 32), el((0.2, 0, 0.1), LAM / 32)
    shift = np.array([3.0, -1.0, 2.0]) * LAM
    assert Z(p, q) == pytest.approx(Z(p.translated(shift), q.translated(shift)), rel=1e-12)


def test_dual_path_self_and_collinear():
    for p, q in [(el((0, 0, 0), LAM / 32), el((0, 0, 0), LAM / 32)),
                 (el((0, 0, 0), LAM / 32), el((0, 0, 1 / 16), LAM / 32)),
                 (el((0, 0, 0), LAM / 32), el((1 / 16, 0, 0), LAM / 32))]:
        a = Z(p, q)
        b = mutual_impedance_field_oracle(p, q, K0, ETA).value
        assert abs(a - b) < 1e-8 * abs(a)


def test_small_element_self_impedance_is_capacitive():
    z = Z(el((0, 0, 0), LAM / 32), el((0, 0, 0), LAM / 32))
    assert 0 < z.real < 1 and z.imag < -1000


def test_far_decay_slope():
    p = el((0, 0, 0), LAM / 32)
    d = np.array([10, 100, 1000])
    z = np.array([abs(Z(p, el((x, 0, 0), LAM / 32))) for x in d])
    slope = np.polyfit(np.log(d), np.log(z), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.01)


def test_quadrature_failure_is_reported():
    with pytest.raises(QuadratureError):
        Z(el((0, 0, 0)), el((0.3, 0, 0)), order=2, rtol=1e-15, max_subdivisions=0)


@pytest.fixture(scope="module")
def blocks9():
    return assemble_impedance_blocks(sec5_scenario(3, spacing="lambda/8"))


def test_blocks_shapes_and_symmetry(blocks9):
    b = blocks9
    assert b.shape == (1, 9, 1)
    assert b.TS.shape == (1, 9) and b.SS.shape == (9, 9) and b.RS.shape == (1, 9)
    np.testing.assert_array_equal(b.full, b.full.T)
    np.testing.assert_array_equal(b.ST, b.TS.T)
    assert b.meta["geometry_hash"]


def test_dedupe_and_jobs_do_not_change_values(blocks9):
    s = sec5_scenario(3, spacing="lambda/8")
    plain = assemble_impedance_blocks(s, dedupe=False)
    np.testing.assert_allclose(plain.full, blocks9.full, rtol=1e-12)
    par = assemble_impedance_blocks(s, jobs=2)
    np.testing.assert_array_equal(par.full, blocks9.full)


def test_from_blocks_and_select(blocks9):
    b = blocks9
    again = ImpedanceBlocks.from_blocks({x + y: b.block(x, y) for x in "TSR" for y in "TSR"}, 1, 9, 1)
    np.testing.assert_array_equal(again.full, b.full)
    sub = b.select_ris([4])
    assert sub.shape == (1, 1, 1)
    assert sub.SS[0, 0] == b.SS[4, 4]


def test_enforce_reciprocity():
    Zm = np.array([[1, 2 + 1e-9], [2, 3]], complex)
    b, asym = enforce_reciprocity(ImpedanceBlocks(Zm, 1, 0, 1))
    assert asym == pytest.approx(1e-9)
    np.testing.assert_array_equal(b.full, b.full.T)


def test_cache_round_trip(tmp_path, blocks9):
    s = sec5_scenario(3, spacing="lambda/8")
    q = QuadratureSpec()
    b1, hit1 = cached_impedance_blocks(s, q, tmp_path)
    b2, hit2 = cached_impedance_blocks(s, q, tmp_path)
    assert (hit1, hit2) == (False, True)
    np.testing.assert_array_equal(b1.full, b2.full)
    assert cache_key(s, q) != cache_key(s, q.with_rtol(1e-6))
    save_blocks(tmp_path / "x.npz", b1, {"a": 1})
    b3, header = load_blocks(tmp_path / "x.npz")
    assert header == {"a": 1} and b3.shape == b1.shape
