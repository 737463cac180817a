"""Acceptance criteria 1-10, one test each.

Every test stores a one-line verdict in ``conftest.ACCEPTANCE_LINES``; the
lines are echoed in the pytest terminal summary.
"""

import math
import os
import subprocess
import sys

import numpy as np
import pytest

from ccsocopf.chance import UncertaintySpec, screen_critical_lines, two_sided_flow_margins, uncertainty_margin
from ccsocopf.driver import solve_cc
from ccsocopf.powerflow import recover_feasible
from ccsocopf.sensitivities import build_psi, compute_sensitivities, nonlinear_response, ptdf, soc_jacobian, soc_residuals
from ccsocopf.socopf import cone_slacks, solve_sequential, state_to_seed
from ccsocopf.validation import ScenarioPolicy, evaluate_policy, sample_wind

from . import conftest
from .conftest import CONFIGS, CONFIG_LOSS_WEIGHT, fixture_case


def record(k, ok, detail):
    line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES[k] = line
    print(line)
    assert ok, line


def _binom_se(p, n):
    return math.sqrt(p * (1 - p) / n)


# 1 ---------------------------------------------------------------------------


def test_c1_linear_cc_exactness():
    rng = np.random.default_rng(2024)
    n = 100_000
    worst = 0.0
    misses = []
    for trial in range(50):
        w = int(rng.integers(1, 5))
        eps = float(rng.choice([0.01, 0.05, 0.1]))
        A = rng.normal(size=(w, w))
        sigma = A @ A.T * rng.uniform(0.01, 1.0)
        gamma = np.ones(1)
        spec = UncertaintySpec(sigma=sigma, epsilon=eps, gamma=gamma)
        ups = rng.normal(size=w)
        bound = rng.uniform(-1, 1)
        y0 = bound - uncertainty_margin(ups, spec)  # tightened bound held with equality
        xi = rng.multivariate_normal(np.zeros(w), sigma, size=n, method="cholesky")
        p = float(np.mean(y0 + xi @ ups > bound))
        z = abs(p - eps) / _binom_se(eps, n)
        worst = max(worst, z)
        if z > 3:
            misses.append((trial, eps, p))
    record(1, not misses, f"50 triples x 100k samples, worst deviation {worst:.2f} binomial SE (limit 3)")


# 2 ---------------------------------------------------------------------------


FLOW_FIXTURES = [
    # (P0, Q0, upsilon_P, upsilon_Q, sigma): flows several sigma away from zero
    (0.8, 0.3, np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.diag([0.01, 0.004])),
    (0.6, -0.4, np.array([0.7, 0.2]), np.array([-0.1, 0.5]), np.array([[0.010, 0.002], [0.002, 0.008]])),
    (-0.9, 0.5, np.array([0.4, -0.9]), np.array([0.3, 0.3]), np.diag([0.005, 0.006])),
    (1.2, 0.2, np.array([1.0, 1.0]), np.array([0.2, -0.2]), np.diag([0.02, 0.02])),
]


def _union_violation(p0, q0, up, uq, spec, beta, n, seed):
    op, oq = two_sided_flow_margins(up, uq, spec, beta)
    kp, kq = abs(p0) + op, abs(q0) + oq  # both tightened constraints active
    xi = sample_wind(spec.sigma, n, seed)
    p = p0 + xi @ up
    q = q0 + xi @ uq
    return float(np.mean((np.abs(p) > kp) | (np.abs(q) > kq)))


def test_c2_two_sided_bounds():
    eps, n = 0.05, 200_000
    with_beta, without = [], []
    for k, (p0, q0, up, uq, sigma) in enumerate(FLOW_FIXTURES):
        spec = UncertaintySpec(sigma=sigma, epsilon=eps, gamma=np.ones(1))
        with_beta.append(_union_violation(p0, q0, up, uq, spec, 0.5, n, k))
        without.append(_union_violation(p0, q0, up, uq, spec, None, n, k))
    limit = eps + 3 * _binom_se(eps, n)
    ok = max(with_beta) <= limit and max(without) > eps
    record(
        2, ok,
        f"beta=0.5 union max {max(with_beta):.4f} (limit {limit:.4f}); "
        f"no-beta union max {max(without):.4f} (> {eps} required)",
    )


# 3 ---------------------------------------------------------------------------


def _fd_check(case, state, h=1e-6):
    n, nl = case.n_bus, case.n_branch
    y = np.concatenate([state.u, state.c, state.s, state.theta])
    J = soc_jacobian(case, state.u, state.c, state.s).matrix.toarray()

    def r(v):
        return soc_residuals(case, v[:n], v[n:n + nl], v[n + nl:n + 2 * nl], v[n + 2 * nl:])

    worst = 0.0
    for k in range(y.size):
        e = np.zeros(y.size)
        e[k] = h
        fd = (r(y + e) - r(y - e)) / (2 * h)
        err = np.abs(fd - J[:, k]) / np.maximum(np.abs(J[:, k]), 1e-9)
        worst = max(worst, float(err[np.abs(J[:, k]) + np.abs(fd) > 0].max(initial=0.0)))
    return worst


@pytest.mark.slow
def test_c3_jacobian(case2, case3, det118, case118):
    res = {
        "2-bus": _fd_check(case2, solve_sequential(case2)),
        "3-bus": _fd_check(case3, solve_sequential(case3)),
        "case118": _fd_check(case118, det118[0]),
    }
    ok = max(res.values()) <= 1e-5
    record(3, ok, "max relative FD error " + ", ".join(f"{k} {v:.1e}" for k, v in res.items()) + " (limit 1e-5)")


# 4 ---------------------------------------------------------------------------


def test_c4_first_order_accuracy(case3):
    spec = UncertaintySpec.from_case(case3)
    state = solve_sequential(case3)
    bundle = compute_sensitivities(case3, state, spec)
    psi = build_psi(case3, spec, state.lambda_ratio)
    deltas = [1e-3, 5e-4, 2.5e-4]
    errs = []
    for d in deltas:
        dy, _ = nonlinear_response(case3, state.u, state.c, state.s, state.theta, psi, np.array([d]))
        errs.append(float(np.abs(dy - bundle.upsilon_yhat[:, 0] * d).max()))
    # error per unit deviation; a first-order model leaves e(d)/d = O(d)
    norm = [e / d for e, d in zip(errs, deltas)]
    ratios = [norm[i] / norm[i + 1] for i in range(len(norm) - 1)]
    raw = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    ok = all(abs(r - 2.0) <= 0.4 for r in ratios)
    record(
        4, ok,
        f"normalized-error ratios {', '.join(f'{r:.3f}' for r in ratios)} (2.0 +- 0.4); "
        f"raw-error ratios {', '.join(f'{r:.3f}' for r in raw)}",
    )


# 5 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c5_relaxation_bound(det118, case118):
    rows = []
    for name, wind in [("case2", None), ("case3", [(3, 40.0, 6.0)]), ("case3_screen", [(3, 40.0, 6.0)]),
                       ("triangle_lossless", None)]:
        case = fixture_case(name, wind)
        state = solve_sequential(case)
        rec = recover_feasible(case, state_to_seed(case, state))
        rows.append((name, state.objective, rec.cost, rec.report.within_limits))
    state, rec = det118
    rows.append(("case118", state.objective, rec.cost, rec.report.within_limits))
    checked = [(n, o, c) for n, o, c, within in rows if within]
    bad = [n for n, o, c in checked if o > c * (1 + 1e-6)]
    skipped = [n for n, _, _, within in rows if not within]
    record(
        5, bool(checked) and not bad,
        f"objective <= recovered cost on {', '.join(n for n, _, _ in checked)}"
        + (f"; not within limits, skipped: {', '.join(skipped)}" if skipped else ""),
    )


# 6 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c6_loose_cone_phenomenon(triangle, case118):
    plain = solve_sequential(case118)
    slack118 = cone_slacks(plain, case118)
    info = (f"case118 variant: objective {plain.objective:,.2f} EUR/h vs 37,692.03, "
            f"{int((np.abs(slack118) > 1e-6).sum())} loose cones")
    state = solve_sequential(triangle)
    rec = recover_feasible(triangle, state_to_seed(triangle, state))
    gap = abs(rec.cost - state.objective) / abs(state.objective)
    slack = float(cone_slacks(state, triangle).max())
    ok = gap < 1e-6 and slack > 1e-6
    record(6, ok, f"substitute (lossless triangle): gap {gap:.1e}, max cone slack {slack:.3f}; {info}")


# 7 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c7_cc_convergence(cc118, case118, spec118):
    rep, wall = cc118
    zero = solve_cc(case118, spec118.with_(sigma=np.zeros_like(spec118.sigma)),
                    loss_weight=CONFIG_LOSS_WEIGHT, recover=False)
    ok = rep.converged and len(rep.iterations) <= 8 and wall <= 60 and len(zero.iterations) == 1
    record(
        7, ok,
        f"case118 {len(rep.iterations)} passes in {wall:.1f} s (limits 8, 60 s), "
        f"Sigma=0 {len(zero.iterations)} pass; loss_weight {CONFIG_LOSS_WEIGHT:g}",
    )


# 8 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c8_screening(case3_screen, cc118, case118, spec118):
    spec = UncertaintySpec.from_case(case3_screen)
    found = screen_critical_lines(case3_screen, solve_sequential(case3_screen), spec, ptdf(case3_screen))
    rep, _ = cc118
    first = screen_critical_lines(case118, rep.initial_state, spec118, ptdf(case118))
    ok = found.sorted() == [(2, "forward")]
    record(
        8, ok,
        f"3-bus fixture flags {found.sorted()}; case118 variant flags "
        f"{[f'{l + 1}:{d}' for l, d in first.sorted()]} (1-based; reference lists 100 both ways, 37 forward)",
    )


# 9 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c9_monte_carlo_endpoints(case118, spec118, det118, cc118):
    n = 10_000
    dev = sample_wind(spec118.sigma, n, 2019)
    _, det_rec = det118
    det = evaluate_policy(case118, ScenarioPolicy.from_solution(case118, det_rec.solution, spec118.gamma), dev)
    rep, _ = cc118
    assert rep.recovered is not None, rep.recovery_error
    cc = evaluate_policy(case118, ScenarioPolicy.from_solution(case118, rep.recovered.solution, spec118.gamma), dev)
    cmax = cc.per_class_max
    ok = det.joint >= 0.95 and max(cmax.values()) <= spec118.epsilon + 0.02
    record(
        9, ok,
        f"deterministic joint {det.joint:.4f} (>= 0.95); CC class max "
        + ", ".join(f"{k} {v:.4f}" for k, v in cmax.items()) + " (<= 0.07)",
    )


# 10 --------------------------------------------------------------------------


@pytest.mark.slow
def test_c10_determinism(tmp_path):
    cfg = CONFIGS / "case118.toml"
    env = dict(os.environ)
    names = ("cc_report.json", "margins.csv", "dispatch.csv", "recovered_dispatch.csv",
             "validation.json", "violations.csv")
    for run in ("a", "b"):
        out = tmp_path / run
        for cmd in ("cc-solve", "validate"):
            proc = subprocess.run(
                [sys.executable, "-m", "ccsocopf.cli", cmd, str(cfg), "--out", str(out), "--samples", "500"],
                capture_output=True, text=True, env=env,
            )
            assert proc.returncode == 0, proc.stderr
    diff = [n for n in names if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    record(10, not diff, f"{len(names)} artifacts compared byte for byte" + (f"; differ: {diff}" if diff else ""))
