import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powerconsensus import (
    ControllerParams,
    MicrogridNetwork,
    ZipLoadBank,
    build_laplacian,
    capacitive_load_rhs,
    consensus_rhs,
    constant_voltage_rhs,
    dapi_rhs,
    source_powers,
)
from powerconsensus.controllers import consensus_log_rate, source_currents
from powerconsensus.loadmodel import current_mismatch, solve_load_voltages
from powerconsensus.netmodel import comm_laplacian

from conftest import belk10_network, random_network, random_zip_bank, seeds


@pytest.fixture
def tparams(tnet):
    return ControllerParams([1.0, 1.0], comm_laplacian(tnet), D=[0.5, 0.5])


def test_flat_unloaded_profile_has_zero_power(tblocks):
    np.testing.assert_array_equal(source_powers(tblocks, [48.0, 48.0], [48.0]), [0.0, 0.0])


def test_t_network_powers_by_hand(tblocks):
    np.testing.assert_allclose(source_powers(tblocks, [48.0, 48.0], [47.5]), [24.0, 24.0], rtol=1e-15)


def test_proportional_powers_are_stationary():
    C = np.array([0.04, 0.08, 0.04])
    params = ControllerParams(C, comm_laplacian(belk10_network()))
    np.testing.assert_allclose(consensus_log_rate(params, C * 17.0), 0.0, atol=1e-12)


def test_single_source_rhs_is_zero():
    net = MicrogridNetwork(1, 1, [(0, 1, 1.0)])
    params = ControllerParams([2.0], comm_laplacian(net))
    b = build_laplacian(net)
    assert consensus_rhs(b, params, [48.0], [40.0]).tolist() == [0.0]


def test_constant_voltage_symmetric_point_is_stationary(tblocks, tparams):
    np.testing.assert_allclose(constant_voltage_rhs(tblocks, tparams, [48.0, 48.0], [47.5]), 0.0, atol=1e-14)


def test_constant_voltage_asymmetric_rhs(tblocks, tparams):
    Vs = np.array([49.0, 47.0])
    rhs = constant_voltage_rhs(tblocks, tparams, Vs, [47.5])
    assert rhs[0] < 0 < rhs[1]
    # C1 dV1 = -V1 (P1/C1 - P2/C2), C2 dV2 = -V2 (P2/C2 - P1/C1)
    C = tparams.C
    assert rhs[0] == pytest.approx(-rhs[1] * (Vs[0] * C[1]) / (Vs[1] * C[0]), rel=1e-12)
    P = source_powers(tblocks, Vs, [47.5])
    assert rhs[0] == pytest.approx(-Vs[0] * (P[0] - P[1]), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, ns=st.integers(2, 4), nl=st.integers(1, 4))
def test_consensus_preserves_weighted_log_sum(seed, ns, nl):
    rng = np.random.default_rng(seed)
    net = random_network(rng, ns, nl)
    C = rng.uniform(0.1, 2, ns)
    params = ControllerParams(C, comm_laplacian(net))
    Vs, Vl = rng.uniform(30, 60, ns), rng.uniform(30, 60, nl)
    rhs = consensus_rhs(build_laplacian(net), params, Vs, Vl)
    # d/dt sum C ln V = sum C Vdot / V = -1ᵀ Lc (...) = 0
    scale = np.max(np.abs(C * rhs / Vs))
    assert abs(np.sum(C * rhs / Vs)) <= 1e-12 * max(scale, 1.0)


def test_dapi_steady_state(tblocks, tparams):
    Vs, Vl = np.array([48.0, 48.0]), np.array([47.5])
    p = source_currents(tblocks, Vs, Vl)
    dV, dp = dapi_rhs(tblocks, tparams, Vs, Vl, p)
    np.testing.assert_allclose(dV, 0.0, atol=1e-14)
    np.testing.assert_allclose(dp, 0.0, atol=1e-12)


def test_dapi_by_hand(tblocks, tparams):
    Vs, Vl, p = np.array([49.0, 47.0]), np.array([47.5]), np.array([1.0, 0.0])
    I = source_currents(tblocks, Vs, Vl)
    dV, dp = dapi_rhs(tblocks, tparams, Vs, Vl, p)
    np.testing.assert_allclose(dV, (p - I) / 1.0)
    w = Vs * p
    np.testing.assert_allclose(dp, (I - p + np.array([w[1] - w[0], w[0] - w[1]])) / 0.5)


def test_dapi_requires_d(tblocks, tnet):
    with pytest.raises(ValueError):
        dapi_rhs(tblocks, ControllerParams([1, 1], comm_laplacian(tnet)), [48, 48], [47], [0, 0])


def test_capacitive_flat_profile(tblocks):
    Cl = 1e-3
    d = capacitive_load_rhs(tblocks, ZipLoadBank([-1.0], [0.0], [0.0]), [Cl], [48.0, 48.0], [48.0])
    assert d[0] == pytest.approx(-1.0 / Cl)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, ns=st.integers(1, 3), nl=st.integers(1, 4))
def test_capacitive_rhs_vanishes_on_constraint(seed, ns, nl):
    rng = np.random.default_rng(seed)
    b = build_laplacian(random_network(rng, ns, nl, gmin=1.0))
    bank = random_zip_bank(rng, nl, pmax=10.0)
    Vs = rng.uniform(45, 50, ns)
    Vl = solve_load_voltages(b, bank, Vs)
    np.testing.assert_allclose(capacitive_load_rhs(b, bank, np.ones(nl), Vs, Vl), 0.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, ns=st.integers(1, 3), nl=st.integers(1, 4), bump=st.floats(0.01, 1.0))
def test_capacitive_rhs_is_restoring(seed, ns, nl, bump):
    rng = np.random.default_rng(seed)
    b = build_laplacian(random_network(rng, ns, nl, gmin=1.0))
    bank = random_zip_bank(rng, nl, pmax=10.0)
    Vs = rng.uniform(45, 50, ns)
    Vl = solve_load_voltages(b, bank, Vs)
    Cl = rng.uniform(1e-4, 1e-2, nl)
    up = capacitive_load_rhs(b, bank, Cl, Vs, Vl + bump)
    down = capacitive_load_rhs(b, bank, Cl, Vs, Vl - bump)
    # uniform upward displacement gives a net downward pull, and vice versa
    assert np.sum(Cl * up) < 0 < np.sum(Cl * down)
    np.testing.assert_allclose(current_mismatch(b, bank, Vs, Vl + bump), Cl * up, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize(
    "C,Lc,D",
    [([1, -1], np.eye(2), None), ([1, 1], np.eye(3), None), ([1, 1], np.eye(2), [1, 0]), ([1, 1], np.eye(2), [1])],
)
def test_invalid_controller_params(C, Lc, D):
    with pytest.raises(ValueError):
        ControllerParams(C, Lc, D)
