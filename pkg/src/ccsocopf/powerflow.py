"""Polar Newton-Raphson AC power flow and warm-started feasibility recovery."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .network import BusKind, NetworkCase, make_ybus

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8


class PowerFlowError(RuntimeError):
    pass


class SingularJacobianError(PowerFlowError):
    pass


class RecoveryError(PowerFlowError):
    pass


@dataclass
class PowerFlowSeed:
    """Starting point and injections for a power flow.

    ``p_wind``/``q_wind`` default to the forecast infeed at unity power factor.
    """

    v_mag: np.ndarray
    v_ang: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    slack_bus: int
    p_wind: np.ndarray | None = None
    q_wind: np.ndarray | None = None

    def __post_init__(self):
        self.v_mag = np.asarray(self.v_mag, dtype=float)
        self.v_ang = np.asarray(self.v_ang, dtype=float)
        if np.any(self.v_mag <= 0) or not np.all(np.isfinite(self.v_ang)):
            raise ValueError("seed voltages must be positive with finite angles")

    @classmethod
    def flat(cls, case: NetworkCase, p_gen=None, q_gen=None) -> "PowerFlowSeed":
        v = np.ones(case.n_bus)
        for g in case.generators:
            if case.buses[g.bus].kind != BusKind.PQ:
                v[g.bus] = g.v_set
        return cls(
            v_mag=v,
            v_ang=np.zeros(case.n_bus),
            p_gen=np.array([g.p_init for g in case.generators]) if p_gen is None else p_gen,
            q_gen=np.array([g.q_init for g in case.generators]) if q_gen is None else q_gen,
            slack_bus=case.slack,
        )


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    p_wind: np.ndarray
    q_wind: np.ndarray
    branch_flows: np.ndarray  # columns P_ij, Q_ij, P_ji, Q_ji, S_ij, S_ji
    converged: bool
    iterations: int
    max_mismatch: float
    slack_bus: int
    kinds: np.ndarray

    @property
    def s_from(self) -> np.ndarray:
        return self.branch_flows[:, 4]

    @property
    def s_to(self) -> np.ndarray:
        return self.branch_flows[:, 5]

    def to_dict(self) -> dict:
        return {
            "v_mag": self.v_mag.tolist(),
            "v_ang": self.v_ang.tolist(),
            "p_gen": self.p_gen.tolist(),
            "q_gen": self.q_gen.tolist(),
            "p_wind": self.p_wind.tolist(),
            "q_wind": self.q_wind.tolist(),
            "branch_flows": self.branch_flows.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "max_mismatch": self.max_mismatch,
            "slack_bus": self.slack_bus,
            "kinds": [int(k) for k in self.kinds],
        }


class _JacobianPattern:
    """Scatter map from bus-admittance nonzeros to Newton Jacobian entries
    for a fixed (ref, pv, pq) partition."""

    DENSE_MAX = 1500

    def __init__(self, ybus, pv, pq):
        n = ybus.shape[0]
        coo = (ybus + sp.diags(np.full(n, 1e-300))).tocoo()
        self.i, self.j, self.y = coo.row, coo.col, coo.data
        pvpq = np.r_[pv, pq]
        self.pvpq, self.pq = pvpq, pq
        self.m = len(pvpq) + len(pq)
        ra = np.full(n, -1)
        ra[pvpq] = np.arange(len(pvpq))
        rm = np.full(n, -1)
        rm[pq] = len(pvpq) + np.arange(len(pq))
        i, j = self.i, self.j
        self.blocks = []
        for rmap, cmap, part in ((ra, ra, "Pa"), (ra, rm, "Pm"), (rm, ra, "Qa"), (rm, rm, "Qm")):
            mask = (rmap[i] >= 0) & (cmap[j] >= 0)
            self.blocks.append((mask, rmap[i[mask]], cmap[j[mask]], part))
        self.dense = self.m <= self.DENSE_MAX

    def jacobian(self, v, ibus):
        vi, vj = v[self.i], v[self.j]
        dsm = vi * np.conj(self.y) * np.conj(vj) / np.abs(vj)
        dsa = -1j * vi * np.conj(self.y * vj)
        diag = self.i == self.j
        d = self.i[diag]
        dsm[diag] += np.conj(ibus[d]) * v[d] / np.abs(v[d])
        dsa[diag] += 1j * v[d] * np.conj(ibus[d])
        rows, cols, vals = [], [], []
        for mask, r, c, part in self.blocks:
            src = dsa if part[1] == "a" else dsm
            val = src[mask].real if part[0] == "P" else src[mask].imag
            rows.append(r)
            cols.append(c)
            vals.append(val)
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        if self.dense:
            J = np.zeros((self.m, self.m))
            J[rows, cols] = vals
            return J
        return sp.csc_matrix((vals, (rows, cols)), shape=(self.m, self.m))


def _solve_linear(J, rhs):
    if isinstance(J, np.ndarray):
        try:
            lu = scipy.linalg.lu_factor(J, check_finite=False)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise SingularJacobianError(f"power flow Jacobian is singular: {exc}") from exc
        if np.any(np.abs(np.diag(lu[0])) < 1e-14 * max(1.0, np.abs(lu[0]).max())):
            raise SingularJacobianError("power flow Jacobian is singular")
        return scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    try:
        return splu(J).solve(rhs)
    except RuntimeError as exc:
        raise SingularJacobianError(f"power flow Jacobian is singular: {exc}") from exc


def newton_raphson(ybus, sbus, v0, ref, pv, pq, tol=DEFAULT_TOL, max_iter=30, pattern=None):
    """Core polar Newton iteration on complex ``V``.

    Returns ``(V, converged, iterations, max_mismatch)``.  Steps that increase
    the mismatch norm are halved up to four times before being accepted.
    """
    if pattern is None:
        pattern = _JacobianPattern(ybus, pv, pq)
    v = v0.astype(complex).copy()
    vm, va = np.abs(v), np.angle(v)
    pvpq = pattern.pvpq
    npvpq = len(pvpq)

    def mismatch(v):
        ibus = ybus @ v
        mis = v * np.conj(ibus) - sbus
        return np.r_[mis[pvpq].real, mis[pq].imag], ibus

    F, ibus = mismatch(v)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while norm > tol and it < max_iter:
        it += 1
        dx = _solve_linear(pattern.jacobian(v, ibus), -F)
        step = 1.0
        for _ in range(5):
            va_new, vm_new = va.copy(), vm.copy()
            va_new[pvpq] += step * dx[:npvpq]
            vm_new[pq] += step * dx[npvpq:]
            v_new = vm_new * np.exp(1j * va_new)
            F_new, ibus_new = mismatch(v_new)
            norm_new = np.max(np.abs(F_new))
            if norm_new <= norm or not np.isfinite(norm_new):
                break
            step *= 0.5
        if not np.isfinite(norm_new):
            return v_new, False, it, float("inf")
        va, vm, v, F, ibus, norm = va_new, vm_new, v_new, F_new, ibus_new, norm_new
    return v, bool(norm <= tol), it, float(norm)


class PowerFlowModel:
    """Admittance data and bookkeeping for repeated solves on one case."""

    def __init__(self, case: NetworkCase):
        self.case = case
        self.ybus, self.yf, self.yt = make_ybus(case)
        self.cg = case.gen_matrix
        self.cw = case.wind_matrix
        self.q_range = np.array([g.q_max - g.q_min for g in case.generators])
        self.has_gen = np.asarray(self.cg.sum(axis=1)).ravel() > 0
        self._patterns = {}

    def pattern(self, kinds):
        key = kinds.tobytes()
        if key not in self._patterns:
            pv = np.flatnonzero(kinds == BusKind.PV)
            pq = np.flatnonzero(kinds == BusKind.PQ)
            self._patterns[key] = _JacobianPattern(self.ybus, pv, pq)
        return self._patterns[key]

    def effective_kinds(self, slack_bus, pq_forced=()):
        kinds = self.case.kinds.copy()
        kinds[kinds == BusKind.SLACK] = BusKind.PV
        kinds[~self.has_gen] = BusKind.PQ
        kinds[list(pq_forced)] = BusKind.PQ
        kinds[slack_bus] = BusKind.SLACK
        return kinds

    def solve(self, seed: PowerFlowSeed, kinds=None, q_fixed=None, tol=DEFAULT_TOL, max_iter=30):
        case = self.case
        if kinds is None:
            kinds = self.effective_kinds(seed.slack_bus)
        p_wind = case.p_forecast if seed.p_wind is None else np.asarray(seed.p_wind, float)
        q_wind = np.zeros(case.n_wind) if seed.q_wind is None else np.asarray(seed.q_wind, float)
        p_gen = np.asarray(seed.p_gen, float)
        q_gen = np.asarray(seed.q_gen, float).copy()
        q_fixed = {} if q_fixed is None else q_fixed
        for k, val in q_fixed.items():
            q_gen[k] = val

        sbus = (
            self.cg @ (p_gen + 1j * q_gen)
            + self.cw @ (p_wind + 1j * q_wind)
            - (case.p_load + 1j * case.q_load)
        )
        ref = np.flatnonzero(kinds == BusKind.SLACK)
        pv = np.flatnonzero(kinds == BusKind.PV)
        pq = np.flatnonzero(kinds == BusKind.PQ)
        v0 = seed.v_mag * np.exp(1j * seed.v_ang)
        v, ok, it, mis = newton_raphson(
            self.ybus, sbus, v0, ref, pv, pq, tol, max_iter, pattern=self.pattern(kinds)
        )
        return self._package(v, ok, it, mis, seed.slack_bus, kinds, p_gen, q_gen, p_wind, q_wind, q_fixed)

    def _package(self, v, ok, it, mis, slack, kinds, p_gen, q_gen, p_wind, q_wind, q_fixed):
        case = self.case
        s = v * np.conj(self.ybus @ v)
        p_gen = p_gen.copy()
        q_gen = q_gen.copy()
        wind_p_bus = self.cw @ p_wind
        wind_q_bus = self.cw @ q_wind
        # slack generator absorbs the active-power residual
        gens_slack = case.gens_at(slack)
        others = sum(p_gen[k] for k in gens_slack[1:])
        p_gen[gens_slack[0]] = s.real[slack] + case.p_load[slack] - wind_p_bus[slack] - others
        # voltage-controlling buses share reactive output by capability range
        free = np.ones(case.n_gen, dtype=bool)
        free[list(q_fixed)] = False
        ctrl = (kinds != BusKind.PQ)[case.gen_bus] & free
        n = case.n_bus
        fixed_q = np.bincount(case.gen_bus[~free], q_gen[~free], minlength=n)
        total = s.imag + case.q_load - wind_q_bus - fixed_q
        w = np.where(ctrl, self.q_range, 0.0)
        wsum = np.bincount(case.gen_bus, w, minlength=n)
        cnt = np.bincount(case.gen_bus, ctrl.astype(float), minlength=n)
        gb = case.gen_bus
        share = np.where(wsum[gb] > 0, w / np.where(wsum[gb] > 0, wsum[gb], 1.0), 1.0 / np.maximum(cnt[gb], 1))
        q_gen = np.where(ctrl, total[gb] * share, q_gen)
        sf = v[case.f] * np.conj(self.yf @ v)
        st = v[case.t] * np.conj(self.yt @ v)
        flows = np.column_stack([sf.real, sf.imag, st.real, st.imag, np.abs(sf), np.abs(st)])
        return PowerFlowSolution(
            v_mag=np.abs(v),
            v_ang=np.angle(v),
            p_inj=s.real,
            q_inj=s.imag,
            p_gen=p_gen,
            q_gen=q_gen,
            p_wind=p_wind,
            q_wind=q_wind,
            branch_flows=flows,
            converged=ok,
            iterations=it,
            max_mismatch=mis,
            slack_bus=slack,
            kinds=kinds,
        )


def solve_power_flow(case, seed, tol=DEFAULT_TOL, max_iter=30) -> PowerFlowSolution:
    """Solve the AC power flow from ``seed``.

    Non-convergence returns the last iterate with ``converged=False``; a
    singular Jacobian raises :class:`SingularJacobianError`.
    """
    return PowerFlowModel(case).solve(seed, tol=tol, max_iter=max_iter)


def injection_mismatch(case: NetworkCase, seed: PowerFlowSeed):
    """Nodal (dP, dQ) between network injections at the seed voltages and
    the scheduled generation, wind and load of the seed."""
    ybus, _, _ = make_ybus(case)
    v = seed.v_mag * np.exp(1j * seed.v_ang)
    p_wind = case.p_forecast if seed.p_wind is None else seed.p_wind
    q_wind = np.zeros(case.n_wind) if seed.q_wind is None else seed.q_wind
    sched = (
        case.gen_matrix @ (seed.p_gen + 1j * seed.q_gen)
        + case.wind_matrix @ (p_wind + 1j * q_wind)
        - (case.p_load + 1j * case.q_load)
    )
    mis = v * np.conj(ybus @ v) - sched
    return mis.real, mis.imag


# ---------------------------------------------------------------------------
# feasibility recovery


@dataclass
class LimitReport:
    q_clamps: list = field(default_factory=list)
    slack_changes: list = field(default_factory=list)
    p_violations: list = field(default_factory=list)
    q_violations: list = field(default_factory=list)
    v_violations: list = field(default_factory=list)
    flow_violations: list = field(default_factory=list)
    rounds: int = 0

    @property
    def within_limits(self) -> bool:
        return not (self.p_violations or self.q_violations or self.v_violations or self.flow_violations)

    @property
    def empty(self) -> bool:
        return self.within_limits and not (self.q_clamps or self.slack_changes)

    def to_dict(self) -> dict:
        return {
            "within_limits": self.within_limits,
            "rounds": self.rounds,
            "q_clamps": self.q_clamps,
            "slack_changes": self.slack_changes,
            "p_violations": self.p_violations,
            "q_violations": self.q_violations,
            "v_violations": self.v_violations,
            "flow_violations": self.flow_violations,
        }


@dataclass
class Recovery:
    solution: PowerFlowSolution
    report: LimitReport
    cost: float

    def to_dict(self) -> dict:
        return {"cost": self.cost, "report": self.report.to_dict(), "solution": self.solution.to_dict()}


def recover_feasible(
    case: NetworkCase,
    seed: PowerFlowSeed,
    limits_tol: float = 1e-6,
    tol: float = DEFAULT_TOL,
    max_iter: int = 30,
    switch_budget: int = 20,
) -> Recovery:
    """Warm-started power flow with generator Q limits and slack P limits enforced.

    Buses whose generators leave their reactive range are converted to PQ
    with the generators clamped at the violated bound, and the flow is
    re-solved until no further switching occurs.  If the slack generator ends
    outside its active range it is clamped and the reference moves to the
    generator with the most headroom in the required direction.
    """
    model = PowerFlowModel(case)
    gens = case.generators
    slack = seed.slack_bus
    p_gen = np.asarray(seed.p_gen, float).copy()
    pq_forced: set[int] = set()
    q_fixed: dict[int, float] = {}
    report = LimitReport()
    cur = seed
    for rnd in range(1, switch_budget + 1):
        report.rounds = rnd
        kinds = model.effective_kinds(slack, pq_forced)
        run_seed = PowerFlowSeed(
            v_mag=cur.v_mag, v_ang=cur.v_ang, p_gen=p_gen, q_gen=seed.q_gen,
            slack_bus=slack, p_wind=seed.p_wind, q_wind=seed.q_wind,
        )
        sol = model.solve(run_seed, kinds=kinds, q_fixed=q_fixed, tol=tol, max_iter=max_iter)
        if not sol.converged:
            raise RecoveryError(f"power flow did not converge in recovery round {rnd}")
        changed = False
        for i in np.flatnonzero(kinds == BusKind.PV):
            ks = case.gens_at(i)
            q_tot = sol.q_gen[ks].sum()
            lo = sum(gens[k].q_min for k in ks)
            hi = sum(gens[k].q_max for k in ks)
            if q_tot > hi + limits_tol or q_tot < lo - limits_tol:
                bound = "q_max" if q_tot > hi else "q_min"
                for k in ks:
                    q_fixed[k] = getattr(gens[k], bound)
                    report.q_clamps.append(
                        {"generator": k, "bus": case.buses[i].id, "bound": bound,
                         "q_before": float(sol.q_gen[k]), "q_after": q_fixed[k]}
                    )
                pq_forced.add(int(i))
                changed = True
        k0 = case.gens_at(slack)[0]
        p_s = sol.p_gen[k0]
        if p_s > gens[k0].p_max + limits_tol or p_s < gens[k0].p_min - limits_tol:
            up = p_s > gens[k0].p_max
            p_gen = sol.p_gen.copy()
            p_gen[k0] = gens[k0].p_max if up else gens[k0].p_min
            cand = [
                (gens[k].p_max - p_gen[k]) if up else (p_gen[k] - gens[k].p_min)
                for k in range(case.n_gen)
            ]
            order = [
                k for k in np.argsort(cand)[::-1]
                if gens[k].bus != slack and gens[k].bus not in pq_forced and cand[k] > limits_tol
            ]
            if not order:
                raise RecoveryError("slack generator outside its active limits and no generator has headroom")
            new = gens[order[0]].bus
            report.slack_changes.append(
                {"from_bus": case.buses[slack].id, "to_bus": case.buses[new].id,
                 "slack_p_before": float(p_s), "clamped_to": float(p_gen[k0])}
            )
            slack = int(new)
            changed = True
        else:
            p_gen = sol.p_gen.copy()
        cur = sol
        if not changed:
            break
    else:
        raise RecoveryError(f"PV/PQ switching did not settle within {switch_budget} rounds")

    _audit_limits(case, sol, report, limits_tol, pq_forced)
    return Recovery(solution=sol, report=report, cost=case.dispatch_cost(sol.p_gen))


def _audit_limits(case, sol, report, tol, pq_forced):
    for k, g in enumerate(case.generators):
        p = sol.p_gen[k]
        if p > g.p_max + tol or p < g.p_min - tol:
            report.p_violations.append({"generator": k, "p": float(p), "p_min": g.p_min, "p_max": g.p_max})
    for i in np.flatnonzero(sol.kinds != BusKind.PQ):
        ks = case.gens_at(i)
        q = sol.q_gen[ks].sum()
        lo = sum(case.generators[k].q_min for k in ks)
        hi = sum(case.generators[k].q_max for k in ks)
        if q > hi + tol or q < lo - tol:
            report.q_violations.append({"bus": case.buses[i].id, "q": float(q), "q_min": lo, "q_max": hi})
    for i, b in enumerate(case.buses):
        vm = sol.v_mag[i]
        if vm > b.v_max + tol or vm < b.v_min - tol:
            report.v_violations.append({"bus": b.id, "v": float(vm), "v_min": b.v_min, "v_max": b.v_max})
    for l, br in enumerate(case.branches):
        if not br.limited:
            continue
        for end, s in (("from", sol.s_from[l]), ("to", sol.s_to[l])):
            if s > br.s_rating + tol:
                report.flow_violations.append(
                    {"branch": l, "end": end, "s": float(s), "rating": br.s_rating}
                )
