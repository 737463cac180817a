import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccsocopf.chance import (
    CriticalLineSet,
    UncertaintyError,
    UncertaintySpec,
    box_vertices,
    gaussian_quantile,
    margins,
    participation_factors,
    screen_critical_lines,
    tighten_bounds,
    two_sided_flow_margins,
    uncertainty_margin,
    vertex_injections,
)
from ccsocopf.sensitivities import ptdf
from ccsocopf.socopf import solve_sequential


def _erf_quantile(p):
    """Bisection on the erf-based CDF."""
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _spec(sigma, eps=0.05, **kw):
    sigma = np.atleast_2d(sigma)
    gamma = kw.pop("gamma", np.full(2, 0.5))
    return UncertaintySpec(sigma=sigma, epsilon=eps, gamma=gamma, **kw)


@pytest.mark.parametrize("p", [0.5, 0.9, 0.95, 0.975, 0.99, 0.999])
def test_quantile_matches_erf_bisection(p):
    assert gaussian_quantile(p) == pytest.approx(_erf_quantile(p), abs=1e-12)


def test_quantile_95_frozen():
    # [DERIVED] erf bisection
    assert gaussian_quantile(0.95) == pytest.approx(1.6448536269514722, abs=1e-14)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_quantile_domain(p):
    with pytest.raises(ValueError):
        gaussian_quantile(p)


def test_margin_by_hand():
    sigma = np.array([[4.0, 1.0], [1.0, 9.0]])
    spec = _spec(sigma)
    row = np.array([0.5, -2.0])
    var = 0.25 * 4 + 2 * 0.5 * -2.0 * 1.0 + 4 * 9
    assert uncertainty_margin(row, spec) == pytest.approx(gaussian_quantile(0.95) * math.sqrt(var))
    np.testing.assert_allclose(margins(np.vstack([row, 2 * row]), spec)[1], 2 * uncertainty_margin(row, spec))


def test_margin_shape_errors():
    spec = _spec(np.eye(2))
    with pytest.raises(UncertaintyError):
        uncertainty_margin(np.ones(3), spec)
    with pytest.raises(UncertaintyError):
        margins(np.ones((4, 3)), spec)


@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    st.floats(0.001, 0.4),
    st.floats(0.001, 0.4),
)
def test_margin_monotone_in_epsilon(row, e1, e2):
    spec = _spec(np.array([[1.0, 0.3], [0.3, 2.0]]))
    a = uncertainty_margin(row, spec, min(e1, e2))
    b = uncertainty_margin(row, spec, max(e1, e2))
    assert a >= b >= 0


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.floats(-5, 5))
def test_margin_homogeneous(row, k):
    spec = _spec(np.diag([0.5, 1.5]))
    assert uncertainty_margin(np.array(row) * k, spec) == pytest.approx(
        abs(k) * uncertainty_margin(row, spec), rel=1e-9, abs=1e-12
    )


def test_zero_covariance_gives_zero_margins():
    spec = _spec(np.zeros((2, 2)))
    assert np.all(margins(np.random.default_rng(0).normal(size=(5, 2)), spec) == 0)


def test_two_sided_split():
    spec = _spec(np.eye(2))
    up, uq = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    p_none, q_none = two_sided_flow_margins(up, uq, spec, None)
    assert p_none == pytest.approx(gaussian_quantile(0.95))
    assert q_none == pytest.approx(gaussian_quantile(0.95))
    p_half, q_half = two_sided_flow_margins(up, uq, spec, 0.5)
    assert p_half == pytest.approx(gaussian_quantile(0.975))
    assert p_half > p_none and q_half > q_none
    p8, q8 = two_sided_flow_margins(up, uq, spec, 0.8)
    assert p8 < p_half < q8  # larger budget on P, smaller on Q
    with pytest.raises(UncertaintyError):
        two_sided_flow_margins(up, uq, spec, 1.0)


@pytest.mark.parametrize(
    "kw, match",
    [
        (dict(sigma=np.array([[1.0, 0.5], [0.0, 1.0]])), "symmetric"),
        (dict(sigma=np.array([[1.0, 2.0], [2.0, 1.0]])), "semidefinite"),
        (dict(sigma=np.eye(2), eps=1.0), "epsilon"),
        (dict(sigma=np.eye(2), gamma=np.array([0.5, 0.6])), "sum"),
        (dict(sigma=np.eye(2), beta={(0, "forward"): 1.2}), "beta"),
    ],
)
def test_spec_validation(kw, match):
    with pytest.raises(UncertaintyError, match=match):
        _spec(**kw)


def test_spec_from_case(case3):
    spec = UncertaintySpec.from_case(case3, 0.05, beta={(2, "forward"): 0.7})
    assert spec.sigma[0, 0] == pytest.approx(0.06**2)
    np.testing.assert_allclose(spec.gamma, participation_factors(case3))
    np.testing.assert_allclose(spec.gamma, [200 / 350, 150 / 350])
    assert spec.beta_for(2, "forward") == 0.7
    assert spec.beta_for(2, "reverse") == 0.5
    assert spec.with_(default_beta=None).beta_for(0, "forward") is None


def test_tighten_bounds():
    lo, hi = tighten_bounds([0, -1], [1, 1], [0.25, 0.5])
    np.testing.assert_allclose(lo, [0.25, -0.5])
    np.testing.assert_allclose(hi, [0.75, 0.5])
    with pytest.raises(UncertaintyError):
        tighten_bounds([0], [1], [-0.1])


def test_box_vertices():
    spec = _spec(np.diag([4.0, 1.0]))
    v = box_vertices(spec)
    r = gaussian_quantile(0.975)
    assert v.shape == (4, 2)
    assert set(map(tuple, np.round(v / r, 12))) == {(-2, -1), (-2, 1), (2, -1), (2, 1)}


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(0.1, 3), min_size=3, max_size=3))
def test_box_covers_ellipsoid(a, sd):
    """Diagonal case: the worst corner dominates the worst ellipsoid point along any direction."""
    sigma = np.diag(np.square(sd))
    spec = UncertaintySpec(sigma=sigma, epsilon=0.05, gamma=np.array([1.0]))
    a = np.array(a)
    r = gaussian_quantile(0.975)
    assert (box_vertices(spec) @ a).max() >= r * math.sqrt(a @ sigma @ a) - 1e-9


def test_vertex_injections_balance(case3):
    spec = UncertaintySpec.from_case(case3)
    inj = vertex_injections(case3, spec, box_vertices(spec))
    np.testing.assert_allclose(inj.sum(axis=1), 0.0, atol=1e-12)


def test_screening_flags_only_loaded_end(case3_screen):
    """Branch 1-3 carries about 64 MVA on a 68 MVA rating; the box pushes the
    sending end over while the receiving end stays below."""
    spec = UncertaintySpec.from_case(case3_screen)
    state = solve_sequential(case3_screen)
    found = screen_critical_lines(case3_screen, state, spec, ptdf(case3_screen))
    assert found.sorted() == [(2, "forward")]
    assert found.last_added == ((2, "forward"),)
    again = screen_critical_lines(case3_screen, state, spec, ptdf(case3_screen), found)
    assert again.last_added == () and len(again) == 1


def test_screening_without_uncertainty(case3_screen):
    spec = UncertaintySpec.from_case(case3_screen).with_(sigma=np.zeros((1, 1)))
    state = solve_sequential(case3_screen)
    assert len(screen_critical_lines(case3_screen, state, spec, ptdf(case3_screen))) == 0


def test_critical_set_monotone():
    s = CriticalLineSet().union([(3, "reverse"), (1, "forward")]).union([(1, "forward"), (0, "forward")])
    assert s.sorted() == [(0, "forward"), (1, "forward"), (3, "reverse")]
    assert s.history == (((1, "forward"), (3, "reverse")), ((0, "forward"),))
    assert list(s) == s.sorted() and (3, "reverse") in s
