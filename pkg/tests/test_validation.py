import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccsocopf.chance import UncertaintySpec
from ccsocopf.driver import solve_cc
from ccsocopf.powerflow import recover_feasible
from ccsocopf.socopf import solve_sequential, state_to_seed
from ccsocopf.validation import ScenarioPolicy, evaluate_policy, sample_wind


@pytest.fixture(scope="module")
def screen_points():
    from .conftest import fixture_case

    case = fixture_case("case3_screen", [(3, 40.0, 6.0)])
    spec = UncertaintySpec.from_case(case)
    det = recover_feasible(case, state_to_seed(case, solve_sequential(case)))
    cc = solve_cc(case, spec).recovered
    return case, spec, ScenarioPolicy.from_solution(case, det.solution, spec.gamma), \
        ScenarioPolicy.from_solution(case, cc.solution, spec.gamma)


def test_sampling_moments():
    sigma = np.array([[4.0, 1.2], [1.2, 1.0]])
    x = sample_wind(sigma, 200_000, 3)
    np.testing.assert_allclose(np.cov(x.T), sigma, rtol=0.02, atol=0.02)
    np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=0.02)


def test_sampling_singular_covariance():
    sigma = np.array([[1.0, 1.0], [1.0, 1.0]])
    x = sample_wind(sigma, 1000, 0)
    np.testing.assert_allclose(x[:, 0], x[:, 1], atol=1e-12)


def test_sampling_seeded():
    a = sample_wind(np.eye(2), 50, 7)
    assert np.array_equal(a, sample_wind(np.eye(2), 50, 7))
    assert not np.array_equal(a, sample_wind(np.eye(2), 50, 8))


def test_zero_deviation_scores_zero(screen_points):
    case, _, _, cc = screen_points
    rep = evaluate_policy(case, cc, np.zeros((5, 1)))
    assert rep.joint == 0 and rep.diverged == 0
    assert rep.max_per_constraint == 0


def test_joint_dominates_classes(screen_points):
    case, spec, det, _ = screen_points
    rep = evaluate_policy(case, det, sample_wind(spec.sigma, 400, 11))
    assert rep.joint >= rep.max_per_constraint
    assert rep.joint <= rep.gen_p.sum() + rep.bus_v.sum() + rep.flow.sum() + 1e-12


def test_cc_point_beats_deterministic(screen_points):
    case, spec, det, cc = screen_points
    dev = sample_wind(spec.sigma, 2000, 5)
    r_det = evaluate_policy(case, det, dev)
    r_cc = evaluate_policy(case, cc, dev)
    assert r_cc.flow[2, 0] < r_det.flow[2, 0]
    assert r_cc.max_per_constraint <= spec.epsilon + 3 * float(r_cc.std_error(spec.epsilon))


def test_worker_invariance(screen_points):
    case, spec, det, _ = screen_points
    dev = sample_wind(spec.sigma, 90, 2)
    one = evaluate_policy(case, det, dev, workers=1)
    three = evaluate_policy(case, det, dev, workers=3)
    assert one.to_dict() == three.to_dict()


def test_policy_validation(screen_points):
    case, *_ = screen_points
    with pytest.raises(ValueError):
        ScenarioPolicy(np.ones(3), np.zeros(3), np.zeros(2), np.zeros(2), [0.5, 0.6], np.zeros(1), 0)


def test_policy_from_dict(screen_points):
    case, spec, det, _ = screen_points
    sol = recover_feasible(case, state_to_seed(case, solve_sequential(case))).solution
    again = ScenarioPolicy.from_dict(case, sol.to_dict(), spec.gamma)
    dev = sample_wind(spec.sigma, 40, 9)
    assert evaluate_policy(case, again, dev).to_dict() == evaluate_policy(case, det, dev).to_dict()


def test_column_mismatch(screen_points):
    case, _, det, _ = screen_points
    with pytest.raises(ValueError, match="columns"):
        evaluate_policy(case, det, np.zeros((3, 2)))


@settings(max_examples=10)
@given(st.integers(1, 60))
def test_frequency_bounds(screen_points, n):
    case, spec, det, _ = screen_points
    rep = evaluate_policy(case, det, sample_wind(spec.sigma, n, n))
    d = rep.to_dict()
    assert d["samples"] == n
    for v in [rep.joint, *rep.per_class_max.values()]:
        assert 0 <= v <= 1
        assert (v * n) == pytest.approx(round(v * n))
