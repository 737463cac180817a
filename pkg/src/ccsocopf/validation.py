"""Monte-Carlo scoring of an operating policy under Gaussian wind deviations."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .network import BusKind, NetworkCase
from .powerflow import DEFAULT_TOL, PowerFlowModel, PowerFlowSeed, PowerFlowSolution

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 10_000
SWEEP_SAMPLES = 2_000
LIMITS_TOL = 1e-6

SCORING_NOTE = (
    "generator P clamped at its bounds counts as a P violation; "
    "diverged power flows count as joint violations; "
    "PV buses hold base-point voltages; generator Q is audited, not scored"
)


def sample_wind(sigma, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. rows from ``N(0, sigma)``; eigen factor if Cholesky fails."""
    sigma = np.atleast_2d(np.asarray(getattr(sigma, "sigma", sigma), dtype=float))
    w = sigma.shape[0]
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(sigma)
        L = vecs * np.sqrt(np.clip(vals, 0.0, None))
    z = np.random.default_rng(seed).standard_normal((n, w))
    return z @ L.T


@dataclass
class ScenarioPolicy:
    """Base point plus the linear response used to build each scenario.

    ``q_fixed`` pins generator Q at buses that the recovery turned PQ.
    """

    v_mag: np.ndarray
    v_ang: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    gamma: np.ndarray
    lambda_ratio: np.ndarray
    slack_bus: int
    kinds: np.ndarray | None = None
    q_fixed: dict | None = None

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, float)
        if abs(self.gamma.sum() - 1.0) > 1e-10:
            raise ValueError(f"participation factors sum to {self.gamma.sum():.12g}, expected 1")

    @classmethod
    def from_solution(cls, case: NetworkCase, sol: PowerFlowSolution, gamma, q_fixed=None) -> "ScenarioPolicy":
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(sol.p_wind != 0, sol.q_wind / np.where(sol.p_wind != 0, sol.p_wind, 1.0), 0.0)
        if q_fixed is None:
            pq_gen = sol.kinds[case.gen_bus] == BusKind.PQ
            q_fixed = {int(k): float(sol.q_gen[k]) for k in np.flatnonzero(pq_gen)}
        return cls(sol.v_mag, sol.v_ang, sol.p_gen, sol.q_gen, gamma, lam, sol.slack_bus, sol.kinds, q_fixed)

    @classmethod
    def from_dict(cls, case: NetworkCase, d: dict, gamma) -> "ScenarioPolicy":
        """From a serialized power-flow solution (see ``PowerFlowSolution.to_dict``)."""
        arr = {k: np.asarray(d[k], float) for k in ("v_mag", "v_ang", "p_gen", "q_gen", "p_wind", "q_wind")}
        kinds = np.asarray(d["kinds"], int)
        with np.errstate(divide="ignore", invalid="ignore"):
            pw = arr["p_wind"]
            lam = np.where(pw != 0, arr["q_wind"] / np.where(pw != 0, pw, 1.0), 0.0)
        pq_gen = kinds[case.gen_bus] == BusKind.PQ
        q_fixed = {int(k): float(arr["q_gen"][k]) for k in np.flatnonzero(pq_gen)}
        return cls(arr["v_mag"], arr["v_ang"], arr["p_gen"], arr["q_gen"], gamma, lam,
                   int(d["slack_bus"]), kinds, q_fixed)

    @classmethod
    def from_state(cls, case: NetworkCase, state, gamma) -> "ScenarioPolicy":
        return cls(state.v_mag, state.theta, state.p_gen, state.q_gen, gamma, state.lambda_ratio, case.slack)


@dataclass
class ViolationReport:
    samples: int
    gen_p: np.ndarray  # violation frequency per generator
    gen_q: np.ndarray  # audit only
    bus_v: np.ndarray
    flow: np.ndarray  # (L, 2): sending and receiving end
    joint: float
    diverged: int

    @property
    def per_class_max(self) -> dict[str, float]:
        return {
            "gen_p": float(self.gen_p.max(initial=0.0)),
            "bus_v": float(self.bus_v.max(initial=0.0)),
            "flow_s": float(self.flow.max(initial=0.0)),
        }

    def std_error(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        return np.sqrt(p * (1 - p) / max(self.samples, 1))

    @property
    def max_per_constraint(self) -> float:
        return max(self.per_class_max.values())

    def to_dict(self) -> dict:
        def table(arr):
            return [{"index": int(i), "p": float(v), "se": float(self.std_error(v))} for i, v in enumerate(arr) if v > 0]

        flows = [
            {"branch": int(l), "end": ("from", "to")[e], "p": float(self.flow[l, e]),
             "se": float(self.std_error(self.flow[l, e]))}
            for l, e in zip(*np.nonzero(self.flow))
        ]
        return {
            "samples": self.samples,
            "scoring": SCORING_NOTE,
            "per_class_max": self.per_class_max,
            "per_class_max_se": {k: float(self.std_error(v)) for k, v in self.per_class_max.items()},
            "joint": self.joint,
            "joint_se": float(self.std_error(self.joint)),
            "diverged": self.diverged,
            "gen_p": table(self.gen_p),
            "gen_q_audit": table(self.gen_q),
            "bus_v": table(self.bus_v),
            "flow_s": flows,
        }


def _score_chunk(args):
    case, policy, deviations, limits_tol, pf_tol = args
    model = PowerFlowModel(case)
    gens = case.generators
    p_min = np.array([g.p_min for g in gens])
    p_max = np.array([g.p_max for g in gens])
    q_min = np.array([g.q_min for g in gens])
    q_max = np.array([g.q_max for g in gens])
    rating = case.rating
    limited = rating > 0
    kinds = policy.kinds if policy.kinds is not None else model.effective_kinds(policy.slack_bus)
    ctrl = kinds[case.gen_bus] != BusKind.PQ
    n_s = deviations.shape[0]
    cnt_p = np.zeros(case.n_gen)
    cnt_q = np.zeros(case.n_gen)
    cnt_v = np.zeros(case.n_bus)
    cnt_f = np.zeros((case.n_branch, 2))
    joint = 0
    diverged = 0
    for xi in deviations:
        p_wind = case.p_forecast + xi
        q_wind = policy.lambda_ratio * p_wind
        p_gen = policy.p_gen - policy.gamma * xi.sum()
        clamped = (p_gen < p_min - limits_tol) | (p_gen > p_max + limits_tol)
        p_gen = np.clip(p_gen, p_min, p_max)
        seed = PowerFlowSeed(policy.v_mag, policy.v_ang, p_gen, policy.q_gen, policy.slack_bus, p_wind, q_wind)
        try:
            sol = model.solve(seed, kinds=kinds, q_fixed=policy.q_fixed, tol=pf_tol)
        except Exception as exc:  # singular Jacobian and the like
            log.debug("scenario failed: %s", exc)
            sol = None
        if sol is None or not sol.converged:
            diverged += 1
            joint += 1
            continue
        vp = clamped | (sol.p_gen < p_min - limits_tol) | (sol.p_gen > p_max + limits_tol)
        vq = ctrl & ((sol.q_gen < q_min - limits_tol) | (sol.q_gen > q_max + limits_tol))
        vv = (sol.v_mag < case.v_min - limits_tol) | (sol.v_mag > case.v_max + limits_tol)
        vf = np.column_stack([sol.s_from, sol.s_to]) > (rating + limits_tol)[:, None]
        vf &= limited[:, None]
        cnt_p += vp
        cnt_q += vq
        cnt_v += vv
        cnt_f += vf
        joint += bool(vp.any() or vv.any() or vf.any())
    return cnt_p, cnt_q, cnt_v, cnt_f, joint, diverged, n_s


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CCSOCOPF_WORKERS", "1")))
    except ValueError:
        return 1


def evaluate_policy(
    case: NetworkCase,
    policy: ScenarioPolicy,
    deviations,
    limits_tol: float = LIMITS_TOL,
    pf_tol: float = DEFAULT_TOL,
    workers: int | None = None,
) -> ViolationReport:
    """Run one AC power flow per deviation row and count limit violations.

    Chunks are contiguous and summed in order, so the report does not
    depend on the worker count.
    """
    dev = np.atleast_2d(np.asarray(deviations, float))
    if dev.shape[1] != case.n_wind:
        raise ValueError(f"deviations have {dev.shape[1]} columns, case has {case.n_wind} wind farms")
    workers = worker_count() if workers is None else workers
    chunks = np.array_split(dev, max(1, min(workers, len(dev))))
    jobs = [(case, policy, ch, limits_tol, pf_tol) for ch in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_score_chunk, jobs))
    else:
        parts = [_score_chunk(j) for j in jobs]
    cp, cq, cv, cf, joint, div, n = (sum(x) for x in zip(*parts))
    n = max(int(n), 1)
    return ViolationReport(
        samples=int(n), gen_p=cp / n, gen_q=cq / n, bus_v=cv / n, flow=cf / n,
        joint=joint / n, diverged=int(div),
    )
