import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powerconsensus import AlgebraicSolveError, VoltageCollapseError, ZipLoadBank, build_laplacian
from powerconsensus.loadmodel import (
    LoadFlowSolver,
    current_mismatch,
    load_current,
    load_current_jacobian,
    solve_load_voltages,
    zi_load_voltages,
)

from conftest import random_network, random_zip_bank, seeds


@pytest.mark.parametrize(
    "bank,Vl,expected",
    [
        ((0.0, 0.0, 0.0), 31.0, 0.0),
        ((-1.0, 0.0, 0.0), 47.5, -1.0),
        ((0.0, 0.0, -35.0), 48.0, -35.0 / 48.0),
        ((0.0, 2.0, 0.0), 10.0, -20.0),
        ((-1.0, 0.5, -10.0), 20.0, -1.0 - 10.0 - 0.5),
    ],
)
def test_load_current_examples(bank, Vl, expected):
    b = ZipLoadBank(*([x] for x in bank))
    assert load_current(b, [Vl])[0] == pytest.approx(expected, rel=1e-15)


def test_table_value():
    assert load_current(ZipLoadBank([0], [0], [-35]), [48.0])[0] == pytest.approx(-0.729167, abs=1e-6)


@pytest.mark.parametrize("Vl", [1.0, 12.0, 48.0])
def test_pure_z_slope_is_constant(Vl):
    J = load_current_jacobian(ZipLoadBank([0], [2.0], [0]), [Vl])
    assert J.tolist() == [[-2.0]]


def test_pure_p_slope_by_hand():
    J = load_current_jacobian(ZipLoadBank([0], [0], [-35.0]), [48.0])
    assert J[0, 0] == pytest.approx(35 / 2304, rel=1e-14)
    assert J[0, 0] == pytest.approx(0.0151909, abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(seed=seeds, n=st.integers(1, 6))
def test_jacobian_matches_finite_differences(seed, n):
    rng = np.random.default_rng(seed)
    bank = random_zip_bank(rng, n)
    V = rng.uniform(5, 60, n)
    J = load_current_jacobian(bank, V)
    assert np.count_nonzero(J - np.diag(np.diag(J))) == 0
    h = 1e-6 * V
    fd = (load_current(bank, V + h) - load_current(bank, V - h)) / (2 * h)
    np.testing.assert_allclose(np.diag(J), fd, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("field,value", [("Istar", 0.1), ("Ystar", -0.1), ("Pstar", 1.0)])
def test_sign_conventions_enforced(field, value):
    kw = dict(Istar=[0.0], Ystar=[0.0], Pstar=[0.0])
    kw[field] = [value]
    with pytest.raises(ValueError):
        ZipLoadBank(**kw)


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        ZipLoadBank([0, 0], [0], [0])


def test_nonpositive_voltage_is_collapse():
    with pytest.raises(VoltageCollapseError) as err:
        load_current(ZipLoadBank([0, 0], [0, 0], [-1, -1]), [3.0, 0.0])
    assert err.value.bus == 1


def test_bank_helpers():
    b = ZipLoadBank([-1, 0], [0.1, 0], [-5, -7])
    assert not b.is_zi and b.without_power().is_zi
    np.testing.assert_array_equal(b.scaled_power(2).Pstar, [-10, -14])
    assert ZipLoadBank.zeros(3).n_loads == 3


def test_unloaded_t_network_equalizes(tblocks):
    Vl = solve_load_voltages(tblocks, ZipLoadBank.zeros(1), [48.0, 48.0])
    assert Vl[0] == pytest.approx(48.0, abs=1e-12)


def test_constant_current_by_hand(tblocks):
    # 2 Vl - 96 = -1
    Vl = solve_load_voltages(tblocks, ZipLoadBank([-1.0], [0.0], [0.0]), [48.0, 48.0])
    assert Vl[0] == pytest.approx(47.5, abs=1e-12)


def test_constant_power_quadratic_oracle(tblocks):
    # 2 Vl² - 96 Vl + 35 = 0, larger root
    root = (96 + math.sqrt(96**2 - 8 * 35)) / 4
    Vl = solve_load_voltages(tblocks, ZipLoadBank([0.0], [0.0], [-35.0]), [48.0, 48.0])
    assert Vl[0] == pytest.approx(root, abs=1e-10)
    # the commonly quoted 47.6315 is a rounding slip; the exact root is 47.63260
    assert Vl[0] == pytest.approx(47.6315, abs=1.5e-3)


def test_solver_returns_high_voltage_root_from_low_guess(tblocks):
    root = (96 + math.sqrt(96**2 - 8 * 35)) / 4
    Vl = solve_load_voltages(tblocks, ZipLoadBank([0.0], [0.0], [-35.0]), [48.0, 48.0], guess=[40.0])
    assert Vl[0] == pytest.approx(root, abs=1e-10)


def test_infeasible_load_flow_raises(tblocks):
    # 2 Vl² - 96 Vl + 5000 has no real root
    with pytest.raises((AlgebraicSolveError, VoltageCollapseError)):
        solve_load_voltages(tblocks, ZipLoadBank([0.0], [0.0], [-5000.0]), [48.0, 48.0])


@settings(max_examples=40, deadline=None)
@given(seed=seeds, ns=st.integers(1, 3), nl=st.integers(1, 5))
def test_zi_closed_form_satisfies_balance(seed, ns, nl):
    rng = np.random.default_rng(seed)
    b = build_laplacian(random_network(rng, ns, nl))
    bank = ZipLoadBank(-rng.uniform(0, 1, nl), rng.uniform(0, 0.3, nl), np.zeros(nl))
    Vs = rng.uniform(40, 50, ns)
    Vl = zi_load_voltages(b, bank, Vs)
    np.testing.assert_allclose(current_mismatch(b, bank, Vs, Vl), 0.0, atol=1e-10)
    np.testing.assert_allclose(solve_load_voltages(b, bank, Vs), Vl, rtol=1e-13)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, ns=st.integers(1, 3), nl=st.integers(1, 5))
def test_zip_newton_residual_below_tolerance(seed, ns, nl):
    rng = np.random.default_rng(seed)
    b = build_laplacian(random_network(rng, ns, nl, gmin=1.0))
    bank = random_zip_bank(rng, nl, pmax=20.0)
    Vs = rng.uniform(45, 50, ns)
    Vl = solve_load_voltages(b, bank, Vs)
    assert np.max(np.abs(current_mismatch(b, bank, Vs, Vl))) < 1e-10
    assert np.all(Vl > 0)


def test_solver_object_reuse_is_consistent(belk_blocks):
    bank = ZipLoadBank(np.zeros(7), np.zeros(7), np.full(7, -35.0))
    solver = LoadFlowSolver(belk_blocks, bank)
    first = solver.solve(np.full(3, 48.0))
    again = solver.solve(np.full(3, 48.0), guess=first)
    np.testing.assert_array_equal(first, again)


def test_solver_without_loads():
    from powerconsensus import MicrogridNetwork

    b = build_laplacian(MicrogridNetwork(2, 0, [(0, 1, 1.0)], [(0, 1)]))
    assert solve_load_voltages(b, ZipLoadBank.zeros(0), [48.0, 47.0]).shape == (0,)
