import json
import math

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given
from hypothesis import strategies as st

from ccsocopf.conic import (
    ConicBuildError,
    ConicProgram,
    Expr,
    SolveStatus,
    add_rotated_soc,
    check_solution,
    lin_sum,
    solve,
)


def test_expr_algebra():
    p = ConicProgram()
    x, y = p.add_var("x"), p.add_var("y")
    e = 2 * x - y / 2 + 3
    assert e.terms == {0: 2.0, 1: -0.5} and e.const == 3
    assert (e - e).value(np.array([7.0, -3.0])) == 0.0
    assert lin_sum([x, y, 1.0]).value(np.array([2.0, 5.0])) == 8.0
    assert (-x).value(np.array([4.0, 0.0])) == -4.0


def test_build_errors():
    p = ConicProgram()
    with pytest.raises(ConicBuildError):
        p.add_var("x", 1.0, 0.0)
    x = p.add_var("x")
    with pytest.raises(ConicBuildError):
        p.add_eq(Expr({5: 1.0}))
    with pytest.raises(ConicBuildError):
        p.add_quad_le([x], -1.0)
    with pytest.raises(ConicBuildError):
        add_rotated_soc(p, [], x, x)


def test_soc_projection():
    """min t s.t. ||(x - 3, y - 4)|| <= t has t = 0; with x + y = 0 the
    distance from (3, 4) to the line is 7 / sqrt 2."""
    p = ConicProgram()
    x, y, t = p.add_var("x"), p.add_var("y"), p.add_var("t")
    p.add_soc([x - 3, y - 4], t)
    p.add_eq(x + y)
    p.minimize(t)
    sol = solve(p)
    assert sol.optimal
    assert sol.objective_value == pytest.approx(7 / math.sqrt(2), abs=1e-7)
    assert sol.value(x) == pytest.approx(-0.5, abs=1e-6)


def test_rotated_cone_geometric_mean():
    """max z s.t. z^2 <= u v, u + v = 2 gives u = v = 1, z = 1."""
    p = ConicProgram()
    u, v, z = p.add_var("u", 0), p.add_var("v", 0), p.add_var("z")
    add_rotated_soc(p, [z], u, v)
    p.add_eq(u + v, 2.0)
    p.minimize(-z)
    sol = solve(p)
    assert sol.value(z) == pytest.approx(1.0, abs=1e-6)
    rep = check_solution(p, sol.x)
    assert rep.max_violation < 1e-7
    assert rep.rotated_slack[0] == pytest.approx(0.0, abs=1e-6)


def test_quad_ineq():
    p = ConicProgram()
    x, y = p.add_var("x"), p.add_var("y")
    p.add_quad_le([x, y], 4.0)
    p.minimize(-x - y)
    sol = solve(p)
    assert sol.objective_value == pytest.approx(-2 * math.sqrt(2), abs=1e-7)


def test_infeasible_and_unbounded():
    p = ConicProgram()
    x = p.add_var("x", 0, 1)
    p.add_le(2 - x)
    p.minimize(x)
    assert solve(p).status is SolveStatus.INFEASIBLE

    q = ConicProgram()
    y = q.add_var("y")
    q.minimize(y)
    assert solve(q).status is SolveStatus.UNBOUNDED


def test_check_solution_signs():
    p = ConicProgram()
    x = p.add_var("x", 0, 1)
    t = p.add_var("t")
    p.add_soc([x], t, name="c")
    p.add_eq(x - 0.5, name="e")
    rep = check_solution(p, np.array([2.0, 1.0]))
    d = {(k, n): r for k, n, r in rep.entries}
    assert d[("ub", "x")] == pytest.approx(1.0)
    assert d[("eq", "e")] == pytest.approx(1.5)
    assert d[("soc", "c")] == pytest.approx(1.0)
    assert [e[1] for e in rep.violated(0.9)] == ["x", "e", "c"]
    with pytest.raises(ValueError):
        check_solution(p, np.zeros(3))


def test_dumps_is_stable():
    def build():
        p = ConicProgram()
        x, y = p.add_vars("x", 2, lb=[0, -1], ub=[1, math.inf])
        p.add_soc([x, y], x + 2)
        p.minimize(x + y)
        return p

    a, b = build().dumps(), build().dumps()
    assert a == b
    assert json.loads(a)["variables"][1] == {"name": "x[1]", "lb": -1.0, "ub": None}


@given(st.integers(0, 2**31 - 1))
def test_random_lp_matches_linprog(seed):
    """Bounded random LPs agree with HiGHS through scipy."""
    rng = np.random.default_rng(seed)
    n, m = 4, 3
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(-1, 1, n)
    b = A @ x0 + rng.uniform(0.1, 1, m)  # x0 strictly feasible
    c = rng.normal(size=n)
    ref = scipy.optimize.linprog(c, A_ub=A, b_ub=b, bounds=[(-2, 2)] * n, method="highs")
    p = ConicProgram()
    xs = p.add_vars("x", n, -2, 2)
    for i in range(m):
        p.add_le(lin_sum(A[i, k] * xs[k] for k in range(n)), b[i])
    p.minimize(lin_sum(c[k] * xs[k] for k in range(n)))
    sol = solve(p)
    assert sol.optimal
    assert sol.objective_value == pytest.approx(ref.fun, abs=1e-6)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=5))
def test_norm_minimization(point):
    """min ||x - a|| + ||x|| is attained anywhere on the segment: value ||a||."""
    a = np.array(point)
    p = ConicProgram()
    xs = p.add_vars("x", len(a))
    t1, t2 = p.add_var("t1"), p.add_var("t2")
    p.add_soc([x - ai for x, ai in zip(xs, a)], t1)
    p.add_soc(xs, t2)
    p.minimize(t1 + t2)
    sol = solve(p)
    assert sol.objective_value == pytest.approx(np.linalg.norm(a), abs=1e-6)
