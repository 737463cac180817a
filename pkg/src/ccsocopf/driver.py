"""Outer chance-constrained loop: solve, re-linearize, tighten, repeat."""

from __future__ import annotations

import csv
import itertools
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .chance import CriticalLineSet, UncertaintySpec, margins, screen_critical_lines, two_sided_flow_margins
from .network import NetworkCase
from .powerflow import Recovery, RecoveryError, recover_feasible
from .sensitivities import LooseConeWarning, SensitivityBundle, compute_sensitivities, flow_rows, ptdf
from .socopf import (
    ANGLE_TOL, FlowMargin, SocState, TighteningSet, margin_delta, solve_sequential, state_to_seed,
)
from .validation import SWEEP_SAMPLES, ScenarioPolicy, evaluate_policy, sample_wind, worker_count

log = logging.getLogger(__name__)

DEFAULT_RHO = 1e-5
DEFAULT_MAX_OUTER = 30


class CcConvergenceError(RuntimeError):
    def __init__(self, msg, history):
        self.history = history
        super().__init__(msg)


@dataclass
class IterationRecord:
    """One outer pass: the state solved under the previous margins, re-evaluated."""

    index: int
    state: SocState
    margins: TighteningSet
    margin_delta: float
    critical_added: tuple
    objective: float
    inner_iterations: int

    def summary(self) -> dict:
        return {
            "index": self.index,
            "objective": self.objective,
            "margin_delta": self.margin_delta,
            "critical_added": [f"{l}:{d}" for l, d in self.critical_added],
            "inner_iterations": self.inner_iterations,
        }


@dataclass
class CcSolveReport:
    iterations: list
    converged: bool
    initial_state: SocState
    final_state: SocState
    final_margins: TighteningSet
    critical: CriticalLineSet
    recovered: Recovery | None
    recovery_error: str | None = None
    runtime: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def cost_cc(self) -> float:
        return self.final_state.objective

    @property
    def cost_recovered(self) -> float | None:
        return None if self.recovered is None else self.recovered.cost

    def to_dict(self, include_states: bool = True) -> dict:
        """Serializable view.  Wall-clock time is left out so artifacts stay reproducible."""
        out = {
            "converged": self.converged,
            "n_iterations": len(self.iterations),
            "iterations": [r.summary() for r in self.iterations],
            "cost_cc": self.cost_cc,
            "cost_recovered": self.cost_recovered,
            "critical_lines": [f"{l}:{d}" for l, d in self.critical.sorted()],
            "final_margins": self.final_margins.to_dict(),
            "recovery": None if self.recovered is None else self.recovered.report.to_dict(),
            "recovery_error": self.recovery_error,
            "notes": list(self.notes),
        }
        if include_states:
            out["initial_state"] = self.initial_state.to_dict()
            out["final_state"] = self.final_state.to_dict()
            out["recovered_solution"] = None if self.recovered is None else self.recovered.solution.to_dict()
        return out


def compute_margins(
    case: NetworkCase,
    state: SocState,
    spec: UncertaintySpec,
    critical=(),
    bundle: SensitivityBundle | None = None,
) -> tuple[TighteningSet, SensitivityBundle]:
    """Margins for every bounded quantity at ``state``; flow margins only on ``critical``."""
    if bundle is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LooseConeWarning)
            bundle = compute_sensitivities(case, state, spec)
    lines = {}
    for l, d in sorted(critical):
        beta = spec.beta_for(l, d)
        up, uq = flow_rows(bundle, l, d)
        op, oq = two_sided_flow_margins(up, uq, spec, beta)
        lines[(l, d)] = FlowMargin(op, oq, beta)
    tg = TighteningSet(
        gen_p=margins(bundle.gen_p, spec),
        gen_q=margins(bundle.gen_q, spec),
        # wind reactive output follows its P/Q ratio and is left untightened
        wind_q=np.zeros(case.n_wind),
        u=margins(bundle.du, spec),
        c=margins(bundle.dc, spec),
        s=margins(bundle.ds, spec),
        lines=lines,
    )
    return tg, bundle


def solve_cc(
    case: NetworkCase,
    spec: UncertaintySpec,
    rho: float = DEFAULT_RHO,
    max_outer: int = DEFAULT_MAX_OUTER,
    angle_tol: float = ANGLE_TOL,
    loss_weight: float = 0.0,
    recover: bool = True,
    backend=None,
) -> CcSolveReport:
    """Iterate tightened SOC-OPF solves until the margins settle, then recover.

    A pass screens for critical lines at the current point, solves under the
    current margins, and re-evaluates the margins at the new point.  The
    change is measured against the margins before screening, so lines added
    in a pass count with their full margin.
    """
    t0 = time.perf_counter()
    H = ptdf(case)
    state = solve_sequential(case, None, angle_tol, backend=backend, loss_weight=loss_weight)
    initial = state
    critical = CriticalLineSet()
    omega, bundle = compute_margins(case, state, spec, critical)
    notes = list(bundle.warnings)
    records: list[IterationRecord] = []
    converged = False
    for nu in range(max_outer):
        critical = screen_critical_lines(case, state, spec, H, critical)
        added = critical.last_added
        if added:
            log.info("pass %d: critical lines added %s", nu, added)
            use, _ = compute_margins(case, state, spec, critical, bundle)
        else:
            use = omega
        state = solve_sequential(case, use, angle_tol, backend=backend, loss_weight=loss_weight)
        new_omega, bundle = compute_margins(case, state, spec, critical)
        delta = margin_delta(new_omega, omega)
        records.append(IterationRecord(nu, state, new_omega, delta, added, state.objective, state.inner_iterations))
        log.info("pass %d: objective %.4f, margin change %.3e", nu, state.objective, delta)
        omega = new_omega
        if delta <= rho:
            converged = True
            break
    if not converged:
        raise CcConvergenceError(f"margins still moving after {max_outer} passes", records)

    recovered, err = None, None
    if recover:
        try:
            recovered = recover_feasible(case, state_to_seed(case, state))
        except RecoveryError as exc:
            err = str(exc)
            log.warning("recovery failed: %s", exc)
    return CcSolveReport(
        iterations=records, converged=converged, initial_state=initial, final_state=state,
        final_margins=omega, critical=critical, recovered=recovered, recovery_error=err,
        runtime=time.perf_counter() - t0, notes=notes,
    )


def write_margin_csv(report: CcSolveReport, path) -> None:
    """One row per pass and margin key."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "quantity", "omega"])
        for rec in report.iterations:
            for k, v in rec.margins.flat().items():
                w.writerow([rec.index, k, repr(v)])


def beta_grid(axes: dict) -> list[dict]:
    """Cartesian product of per-line beta axes.

    Keys are ``(branch, direction)`` pairs or a bare branch index, the latter
    meaning one shared beta for both directions.
    """
    keys = list(axes)
    combos = []
    for values in itertools.product(*(axes[k] for k in keys)):
        beta = {}
        for k, v in zip(keys, values):
            if isinstance(k, tuple):
                beta[k] = float(v)
            else:
                beta[(int(k), "forward")] = float(v)
                beta[(int(k), "reverse")] = float(v)
        combos.append(beta)
    return combos


def _sweep_row(args):
    case, spec, beta, deviations, cc_kw = args
    row = {"beta": {f"{l}:{d}": v for (l, d), v in sorted(beta.items())}}
    try:
        rep = solve_cc(case, spec.with_(beta=beta), **cc_kw)
    except Exception as exc:  # infeasible tightening, non-convergence
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return row
    row.update(status="ok", iterations=len(rep.iterations), cost_cc=rep.cost_cc,
               cost_recovered=rep.cost_recovered)
    if rep.recovered is None:
        row.update(status="recovery_failed", error=rep.recovery_error)
        return row
    pol = ScenarioPolicy.from_solution(case, rep.recovered.solution, spec.gamma)
    vr = evaluate_policy(case, pol, deviations, workers=1)
    row.update(
        within_limits=rep.recovered.report.within_limits,
        per_class_max=vr.per_class_max, joint=vr.joint, diverged=vr.diverged,
    )
    return row


def sweep_beta(
    case: NetworkCase,
    spec: UncertaintySpec,
    axes: dict,
    mc_samples: int = SWEEP_SAMPLES,
    seed: int = 0,
    workers: int | None = None,
    **cc_kw,
) -> list[dict]:
    """Run the CC loop, recovery and Monte-Carlo scoring for every beta combination.

    All combinations share one deviation sample, so rows differ only
    through beta.  Rows come back in grid order whatever the worker count.
    """
    deviations = sample_wind(spec.sigma, mc_samples, seed)
    jobs = [(case, spec, beta, deviations, cc_kw) for beta in beta_grid(axes)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sweep_row, jobs))
    return [_sweep_row(j) for j in jobs]
