from dataclasses import replace

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given
from hypothesis import strategies as st

from ccsocopf.network import BusKind, make_ybus
from ccsocopf.powerflow import (
    PowerFlowModel,
    PowerFlowSeed,
    RecoveryError,
    injection_mismatch,
    recover_feasible,
    solve_power_flow,
)
from ccsocopf.socopf import solve_sequential, state_to_seed

from .conftest import fixture_case


def _fsolve_oracle(case, p_gen, q_gen, v_set):
    """Independent polar solve with scipy: unknowns are the PQ magnitudes and
    non-slack angles, written straight from S = V conj(Y V)."""
    ybus = make_ybus(case)[0].toarray()
    kinds = case.kinds
    ref = case.slack
    non_ref = [i for i in range(case.n_bus) if i != ref]
    pq = [i for i in range(case.n_bus) if kinds[i] == BusKind.PQ]
    sched = case.gen_matrix @ (p_gen + 1j * q_gen) + case.wind_matrix @ case.p_forecast
    sched = np.asarray(sched).ravel() - (case.p_load + 1j * case.q_load)

    def unpack(x):
        va = np.zeros(case.n_bus)
        vm = v_set.copy()
        va[non_ref] = x[: len(non_ref)]
        vm[pq] = x[len(non_ref):]
        return vm * np.exp(1j * va)

    def resid(x):
        v = unpack(x)
        mis = v * np.conj(ybus @ v) - sched
        return np.r_[mis.real[non_ref], mis.imag[pq]]

    x0 = np.r_[np.zeros(len(non_ref)), np.ones(len(pq))]
    x = scipy.optimize.fsolve(resid, x0, xtol=1e-13)
    return unpack(x)


def test_case2_against_fsolve(case2):
    seed = PowerFlowSeed.flat(case2)
    sol = solve_power_flow(case2, seed)
    assert sol.converged and sol.max_mismatch < 1e-8
    v = _fsolve_oracle(case2, seed.p_gen, seed.q_gen, seed.v_mag)
    np.testing.assert_allclose(sol.v_mag, np.abs(v), atol=1e-9)
    np.testing.assert_allclose(sol.v_ang, np.angle(v), atol=1e-9)


def test_case3_against_fsolve(case3):
    p_gen = np.array([1.0, 0.9])
    seed = PowerFlowSeed.flat(case3, p_gen=p_gen)
    sol = solve_power_flow(case3, seed)
    v = _fsolve_oracle(case3, p_gen, seed.q_gen, seed.v_mag)
    np.testing.assert_allclose(sol.v_mag * np.exp(1j * sol.v_ang), v, atol=1e-8)
    # PV generator keeps its schedule, slack covers the rest
    assert sol.p_gen[1] == pytest.approx(0.9)


def test_power_balance(case3):
    sol = solve_power_flow(case3, PowerFlowSeed.flat(case3, p_gen=np.array([1.0, 0.9])))
    losses = (sol.branch_flows[:, 0] + sol.branch_flows[:, 2]).sum()
    gen = sol.p_gen.sum() + sol.p_wind.sum()
    assert gen - case3.p_load.sum() == pytest.approx(losses, abs=1e-9)
    assert losses > 0


def test_mismatch_zero_at_solution(case3):
    sol = solve_power_flow(case3, PowerFlowSeed.flat(case3, p_gen=np.array([1.0, 0.9])))
    seed = PowerFlowSeed(sol.v_mag, sol.v_ang, sol.p_gen, sol.q_gen, sol.slack_bus, sol.p_wind, sol.q_wind)
    dp, dq = injection_mismatch(case3, seed)
    assert np.abs(dp).max() < 1e-8 and np.abs(dq).max() < 1e-8


def _with_pmax(case, *p_max):
    gens = tuple(replace(g, p_max=p) for g, p in zip(case.generators, p_max))
    return replace(case, generators=gens)


def test_nonconvergence_reported():
    base = fixture_case("case2")
    # 5000 MW over a 0.1 p.u. reactance has no solution
    heavy = replace(base, buses=(base.buses[0], replace(base.buses[1], p_load=50.0)))
    model = PowerFlowModel(heavy)
    seed = PowerFlowSeed.flat(heavy)
    sol = model.solve(seed, max_iter=10)
    assert not sol.converged


def test_seed_validation(case2):
    with pytest.raises(ValueError):
        PowerFlowSeed(np.array([1.0, 0.0]), np.zeros(2), np.zeros(1), np.zeros(1), 0)


def test_pq_conversion_on_q_limit(triangle):
    """The triangle's generators cannot absorb the capacitive load, so both
    PV buses hit q_min and the slack absorbs what the clamp leaves."""
    seed = PowerFlowSeed.flat(triangle, p_gen=np.array([0.5, 0.5]))
    rec = recover_feasible(triangle, seed)
    clamped = {c["bus"] for c in rec.report.q_clamps}
    assert 2 in clamped
    assert all(c["bound"] == "q_min" for c in rec.report.q_clamps)
    assert rec.solution.q_gen[1] == pytest.approx(-0.1)
    assert rec.solution.kinds[1] == BusKind.PQ


def test_slack_relocation():
    # 50 MW slack cannot cover the load
    case = _with_pmax(fixture_case("case3"), 0.5, 1.5)
    seed = PowerFlowSeed.flat(case, p_gen=np.array([0.4, 0.2]))
    rec = recover_feasible(case, seed)
    assert rec.report.slack_changes and rec.report.slack_changes[0]["to_bus"] == 2
    assert rec.solution.p_gen[0] == pytest.approx(0.5)
    assert not rec.report.p_violations


def test_slack_without_headroom():
    case = _with_pmax(fixture_case("case3"), 0.5, 0.6)
    seed = PowerFlowSeed.flat(case, p_gen=np.array([0.4, 0.6]))
    with pytest.raises(RecoveryError, match="headroom"):
        recover_feasible(case, seed)


def test_recovery_from_tight_relaxation(case3):
    """A tight relaxation point is already AC-feasible: recovery leaves it alone."""
    state = solve_sequential(case3)
    rec = recover_feasible(case3, state_to_seed(case3, state))
    assert rec.report.empty
    assert rec.cost == pytest.approx(state.objective, rel=1e-6)
    np.testing.assert_allclose(rec.solution.v_mag, state.v_mag, atol=1e-5)


@given(st.floats(0.2, 1.2), st.floats(0.1, 1.0))
def test_hypothesis_case3_converges(p1, p2):
    case = fixture_case("case3")
    seed = PowerFlowSeed.flat(case, p_gen=np.array([p1, p2]))
    sol = PowerFlowModel(case).solve(seed)
    assert sol.converged
    dp, dq = injection_mismatch(
        case, PowerFlowSeed(sol.v_mag, sol.v_ang, sol.p_gen, sol.q_gen, sol.slack_bus)
    )
    assert max(np.abs(dp).max(), np.abs(dq).max()) < 1e-7
