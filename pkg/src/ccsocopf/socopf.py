"""Lifted-variable OPF with the cone relaxation and sequential angle linearization.

Variables per bus are ``u = V^2`` and ``theta``; per branch ``c = V_i V_j cos``
and ``s = -V_i V_j sin`` of the angle difference ``theta_i - theta_j``.  The
coupling ``c^2 + s^2 = u_i u_j`` is relaxed to a rotated cone and the angle
equation ``theta_j - theta_i = atan(s / c)`` is linearized about the previous
iterate until ``c`` and ``s`` settle.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .chance import DIRECTIONS, FORWARD, CrossedBoundsError, tighten_bounds
from .conic import ConicProgram, ConicSolution, Expr, add_rotated_soc, lin_sum, solve
from .network import BranchAdmittances, NetworkCase, branch_admittances, lifted_flows
from .powerflow import PowerFlowSeed

log = logging.getLogger(__name__)

ANGLE_TOL = 1e-6


class SocOpfError(RuntimeError):
    pass


class SocSolveError(SocOpfError):
    def __init__(self, status, message=""):
        self.status = status
        super().__init__(f"SOC-OPF solve ended with status {status.value}{': ' + message if message else ''}")


class LinearizationError(SocOpfError):
    pass


class AngleLoopError(SocOpfError):
    def __init__(self, msg, history):
        self.history = history
        super().__init__(msg)


@dataclass
class SocState:
    p_gen: np.ndarray
    q_gen: np.ndarray
    q_wind: np.ndarray
    u: np.ndarray
    c: np.ndarray
    s: np.ndarray
    theta: np.ndarray
    objective: float
    p_wind: np.ndarray = field(default_factory=lambda: np.zeros(0))
    k_p: dict = field(default_factory=dict)
    k_q: dict = field(default_factory=dict)
    inner_iterations: int = 1
    loss_penalty: float = 0.0

    @property
    def v_mag(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.u, 0.0))

    @property
    def lambda_ratio(self) -> np.ndarray:
        """Wind reactive/active ratio at this point."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.p_wind != 0, self.q_wind / np.where(self.p_wind != 0, self.p_wind, 1.0), 0.0)

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "p_gen": self.p_gen.tolist(),
            "q_gen": self.q_gen.tolist(),
            "p_wind": self.p_wind.tolist(),
            "q_wind": self.q_wind.tolist(),
            "u": self.u.tolist(),
            "c": self.c.tolist(),
            "s": self.s.tolist(),
            "theta": self.theta.tolist(),
            "k_p": {f"{l}:{d}": v for (l, d), v in sorted(self.k_p.items())},
            "k_q": {f"{l}:{d}": v for (l, d), v in sorted(self.k_q.items())},
            "inner_iterations": self.inner_iterations,
            "loss_penalty": self.loss_penalty,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SocState":
        def keyed(m):
            out = {}
            for k, v in m.items():
                l, direction = k.split(":")
                out[(int(l), direction)] = v
            return out

        arr = {k: np.asarray(d[k], float) for k in ("p_gen", "q_gen", "p_wind", "q_wind", "u", "c", "s", "theta")}
        return cls(
            objective=float(d["objective"]), k_p=keyed(d.get("k_p", {})), k_q=keyed(d.get("k_q", {})),
            inner_iterations=int(d.get("inner_iterations", 1)),
            loss_penalty=float(d.get("loss_penalty", 0.0)), **arr,
        )


@dataclass
class FlowMargin:
    omega_p: float
    omega_q: float
    beta: float | None = None


@dataclass
class TighteningSet:
    """Uncertainty margins per bounded quantity, in that quantity's units.

    Each array entry shrinks both sides of the matching bound.  ``lines``
    holds the two-sided flow margins of critical ``(branch, direction)`` pairs.
    """

    gen_p: np.ndarray
    gen_q: np.ndarray
    wind_q: np.ndarray
    u: np.ndarray
    c: np.ndarray
    s: np.ndarray
    lines: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, case: NetworkCase) -> "TighteningSet":
        return cls(
            gen_p=np.zeros(case.n_gen), gen_q=np.zeros(case.n_gen), wind_q=np.zeros(case.n_wind),
            u=np.zeros(case.n_bus), c=np.zeros(case.n_branch), s=np.zeros(case.n_branch),
        )

    def __post_init__(self):
        for name in ("gen_p", "gen_q", "wind_q", "u", "c", "s"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0):
                raise ValueError(f"negative margin in {name}")
            setattr(self, name, arr)

    def flat(self) -> dict[str, float]:
        """All margins under stable keys, for iteration-to-iteration comparison."""
        out = {}
        for name in ("gen_p", "gen_q", "wind_q", "u", "c", "s"):
            for k, v in enumerate(getattr(self, name)):
                out[f"{name}[{k}]"] = float(v)
        for (l, d), m in sorted(self.lines.items()):
            out[f"line[{l},{d}].p"] = float(m.omega_p)
            out[f"line[{l},{d}].q"] = float(m.omega_q)
        return out

    def to_dict(self) -> dict:
        return {
            **{n: getattr(self, n).tolist() for n in ("gen_p", "gen_q", "wind_q", "u", "c", "s")},
            "lines": {
                f"{l}:{d}": {"omega_p": m.omega_p, "omega_q": m.omega_q, "beta": m.beta}
                for (l, d), m in sorted(self.lines.items())
            },
        }


def margin_delta(new: TighteningSet, old: TighteningSet | None) -> float:
    """``||Omega_new - Omega_old||_inf`` over the union of keys; new keys count in full."""
    a = new.flat()
    b = {} if old is None else old.flat()
    keys = set(a) | set(b)
    return max((abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys), default=0.0)


# ---------------------------------------------------------------------------
# program builder


@dataclass
class SocProgram:
    program: ConicProgram
    p_gen: list
    q_gen: list
    q_wind: list
    u: list
    c: list
    s: list
    theta: list | None
    k_p: dict
    k_q: dict
    cost_scale: float
    penalty: Expr | None = None

    def decode(self, case: NetworkCase, sol: ConicSolution) -> SocState:
        val = sol.values
        u, c, s = val(self.u), val(self.c), val(self.s)
        theta = val(self.theta) if self.theta is not None else recover_angles(case, c, s)
        pen = sol.value(self.penalty) if self.penalty is not None else 0.0
        return SocState(
            p_gen=val(self.p_gen), q_gen=val(self.q_gen), q_wind=val(self.q_wind),
            u=u, c=c, s=s, theta=theta, objective=sol.objective_value - pen,
            p_wind=case.p_forecast.copy(),
            k_p={k: sol.value(e) for k, e in self.k_p.items()},
            k_q={k: sol.value(e) for k, e in self.k_q.items()},
            loss_penalty=pen,
        )


def _flow_exprs(adm: BranchAdmittances, l: int, ui: Expr, uj: Expr, c: Expr, s: Expr):
    G, B, Bsh = -adm.g[l], -adm.b[l], adm.b_sh[l] / 2
    return {
        FORWARD: (-G * ui + G * c - B * s, (B - Bsh) * ui - B * c - G * s),
        "reverse": (-G * uj + G * c + B * s, (B - Bsh) * uj - B * c + G * s),
    }


def build_soc_opf(
    case: NetworkCase,
    anchor: SocState | None = None,
    tightenings: TighteningSet | None = None,
    loss_weight: float = 0.0,
) -> SocProgram:
    """Assemble the SOC-OPF; the angle equations appear only when ``anchor`` is given.

    ``loss_weight`` (cost units per p.u.) prices the series reactive loss
    ``B (u_i + u_j - 2c)`` of every branch.  Loose cones inflate that term,
    so a positive weight steers the relaxation toward tight cones.  The
    reported objective excludes it.
    """
    tg = TighteningSet.zeros(case) if tightenings is None else tightenings
    adm = branch_admittances(case)
    gens, n, nl = case.generators, case.n_bus, case.n_branch
    f, t = case.f, case.t
    prog = ConicProgram()

    gl = [f"gen {k} P" for k in range(case.n_gen)]
    p_lo, p_hi = tighten_bounds([g.p_min for g in gens], [g.p_max for g in gens], tg.gen_p, gl)
    q_lo, q_hi = tighten_bounds(
        [g.q_min for g in gens], [g.q_max for g in gens], tg.gen_q, [f"gen {k} Q" for k in range(case.n_gen)]
    )
    lam = np.array([w.lambda_max for w in case.wind_farms])
    wq = lam * np.abs(case.p_forecast)
    wq_lo, wq_hi = tighten_bounds(-wq, wq, tg.wind_q, [f"wind {k} Q" for k in range(case.n_wind)])
    u_lo, u_hi = tighten_bounds(case.v_min**2, case.v_max**2, tg.u, [f"bus {b.id} u" for b in case.buses])
    cs = case.v_max[f] * case.v_max[t]
    c_lo, c_hi = tighten_bounds(-cs, cs, tg.c, [f"branch {l} c" for l in range(nl)])
    s_lo, s_hi = tighten_bounds(-cs, cs, tg.s, [f"branch {l} s" for l in range(nl)])

    pg = prog.add_vars("p_gen", case.n_gen, p_lo, p_hi)
    qg = prog.add_vars("q_gen", case.n_gen, q_lo, q_hi)
    qw = prog.add_vars("q_wind", case.n_wind, wq_lo, wq_hi)
    u = prog.add_vars("u", n, u_lo, u_hi)
    c = prog.add_vars("c", nl, c_lo, c_hi)
    s = prog.add_vars("s", nl, s_lo, s_hi)

    # nodal balances
    G, B = -adm.g, -adm.b
    p_net = [[] for _ in range(n)]
    q_net = [[] for _ in range(n)]
    for i in range(n):
        p_net[i].append(adm.g_ii[i] * u[i])
        q_net[i].append(-adm.b_ii[i] * u[i])
    for l in range(nl):
        i, j = f[l], t[l]
        p_net[i].append(G[l] * c[l] - B[l] * s[l])
        p_net[j].append(G[l] * c[l] + B[l] * s[l])
        q_net[i].append(-(B[l] * c[l] + G[l] * s[l]))
        q_net[j].append(-(B[l] * c[l] - G[l] * s[l]))
    p_inj = [[] for _ in range(n)]
    q_inj = [[] for _ in range(n)]
    for k, g in enumerate(gens):
        p_inj[g.bus].append(pg[k])
        q_inj[g.bus].append(qg[k])
    for k, w in enumerate(case.wind_farms):
        p_inj[w.bus].append(Expr({}, w.p_forecast))
        q_inj[w.bus].append(qw[k])
    for i in range(n):
        bid = case.buses[i].id
        prog.add_eq(lin_sum(p_inj[i]) - case.p_load[i] - lin_sum(p_net[i]), name=f"P balance bus {bid}")
        prog.add_eq(lin_sum(q_inj[i]) - case.q_load[i] - lin_sum(q_net[i]), name=f"Q balance bus {bid}")

    for l in range(nl):
        add_rotated_soc(prog, [c[l], s[l]], u[f[l]], u[t[l]], name=f"cone branch {l}")

    theta = None
    if anchor is not None:
        theta = prog.add_vars("theta", n)
        ref = case.slack
        prog.lb[next(iter(theta[ref].terms))] = 0.0
        prog.ub[next(iter(theta[ref].terms))] = 0.0
        for l in range(nl):
            cb, sb = float(anchor.c[l]), float(anchor.s[l])
            if abs(cb) < 1e-12:
                raise LinearizationError(f"anchor has c = 0 on branch {l}; atan(s/c) has no expansion there")
            r2 = cb * cb + sb * sb
            rhs = math.atan(sb / cb)
            lhs = theta[t[l]] - theta[f[l]] - (cb / r2) * s[l] + (sb / r2) * c[l]
            prog.add_eq(lhs, rhs, name=f"angle branch {l}")

    # apparent-flow limits, two-sided margins on critical entries
    k_p, k_q = {}, {}
    for l in range(nl):
        rating = case.rating[l]
        if rating <= 0:
            continue
        fl = _flow_exprs(adm, l, u[f[l]], u[t[l]], c[l], s[l])
        for d in DIRECTIONS:
            fp, fq = fl[d]
            m = tg.lines.get((l, d))
            if m is None:
                prog.add_quad_le([fp, fq], rating**2, name=f"flow {l} {d}")
                continue
            if m.omega_p**2 + m.omega_q**2 > rating**2:
                raise CrossedBoundsError(f"branch {l} {d} flow margins", math.hypot(m.omega_p, m.omega_q), rating)
            kp = prog.add_var(f"k_p[{l},{d}]", m.omega_p, rating)
            kq = prog.add_var(f"k_q[{l},{d}]", m.omega_q, rating)
            k_p[(l, d)], k_q[(l, d)] = kp, kq
            prog.add_le(fp + m.omega_p - kp, name=f"P upper {l} {d}")
            prog.add_le(-fp + m.omega_p - kp, name=f"P lower {l} {d}")
            prog.add_le(fq + m.omega_q - kq, name=f"Q upper {l} {d}")
            prog.add_le(-fq + m.omega_q - kq, name=f"Q lower {l} {d}")
            prog.add_quad_le([kp, kq], rating**2, name=f"k circle {l} {d}")

    cost = case.base_mva * np.array([g.cost_linear for g in gens])
    obj = lin_sum(cost[k] * pg[k] for k in range(case.n_gen)) + sum(g.cost_offset for g in gens)
    penalty = None
    if loss_weight:
        penalty = lin_sum(loss_weight * B[l] * (u[f[l]] + u[t[l]] - 2 * c[l]) for l in range(nl))
        obj = obj + penalty
    prog.minimize(obj)
    return SocProgram(prog, pg, qg, qw, u, c, s, theta, k_p, k_q, float(np.abs(cost).max(initial=1.0)), penalty)


def recover_angles(case: NetworkCase, c, s) -> np.ndarray:
    """Angles along a BFS spanning tree from the reference, using ``atan2(s, c)``."""
    adj = [[] for _ in range(case.n_bus)]
    for l, (i, j) in enumerate(zip(case.f, case.t)):
        adj[i].append((j, l, 1.0))
        adj[j].append((i, l, -1.0))
    theta = np.full(case.n_bus, np.nan)
    theta[case.slack] = 0.0
    queue = deque([case.slack])
    while queue:
        i = queue.popleft()
        for j, l, sign in adj[i]:
            if np.isnan(theta[j]):
                theta[j] = theta[i] + sign * math.atan2(s[l], c[l])
                queue.append(j)
    return theta


def solve_soc_opf(case, anchor=None, tightenings=None, backend=None, loss_weight: float = 0.0) -> SocState:
    built = build_soc_opf(case, anchor, tightenings, loss_weight)
    sol = solve(built.program, backend)
    if not sol.optimal:
        raise SocSolveError(sol.status, sol.message)
    return built.decode(case, sol)


def solve_sequential(
    case: NetworkCase,
    tightenings: TighteningSet | None = None,
    angle_tol: float = ANGLE_TOL,
    max_outer: int = 50,
    backend=None,
    loss_weight: float = 0.0,
) -> SocState:
    """Relaxation first, then re-linearize the angle equations until ``c, s`` settle.

    Radial networks stop after the first pass.
    """
    state = solve_soc_opf(case, None, tightenings, backend, loss_weight)
    if case.is_radial():
        state.inner_iterations = 1
        return state
    history = [state]
    for it in range(2, max_outer + 1):
        new = solve_soc_opf(case, state, tightenings, backend, loss_weight)
        delta = max(np.abs(new.c - state.c).max(initial=0.0), np.abs(new.s - state.s).max(initial=0.0))
        log.debug("angle pass %d: max change in c, s = %.3e", it, delta)
        history.append(new)
        state = new
        if delta <= angle_tol:
            state.inner_iterations = it
            return state
    raise AngleLoopError(f"angle linearization did not settle in {max_outer} passes", history)


def extract_flows(state: SocState, case: NetworkCase) -> np.ndarray:
    """Per-branch ``P_ij, Q_ij, P_ji, Q_ji`` at the lifted point."""
    return lifted_flows(case, state.u, state.c, state.s)


def cone_slacks(state: SocState, case: NetworkCase) -> np.ndarray:
    """``u_i u_j - c^2 - s^2`` per branch; zero when the relaxation is tight."""
    return state.u[case.f] * state.u[case.t] - state.c**2 - state.s**2


def state_to_seed(case: NetworkCase, state: SocState) -> PowerFlowSeed:
    return PowerFlowSeed(
        v_mag=state.v_mag, v_ang=state.theta, p_gen=state.p_gen, q_gen=state.q_gen,
        slack_bus=case.slack, p_wind=state.p_wind if state.p_wind.size else None, q_wind=state.q_wind,
    )
