"""End-to-end 118-bus run: deterministic point, CC loop, and Monte-Carlo on both.

    python scripts/run_case118.py [--config configs/case118.toml] [--samples 10000]

Set CCSOCOPF_WORKERS to spread the Monte-Carlo over processes.
"""

import argparse
import time
from pathlib import Path

from ccsocopf.cli import RunConfig
from ccsocopf.driver import solve_cc
from ccsocopf.powerflow import recover_feasible
from ccsocopf.socopf import cone_slacks, solve_sequential, state_to_seed
from ccsocopf.validation import ScenarioPolicy, evaluate_policy, sample_wind

ROOT = Path(__file__).resolve().parents[1]


def show(label, rep):
    m = rep.per_class_max
    print(f"{label:<14} P {m['gen_p']:7.2%}  V {m['bus_v']:7.2%}  S {m['flow_s']:7.2%}  joint {rep.joint:7.2%}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "case118.toml"))
    ap.add_argument("--samples", type=int)
    args = ap.parse_args()

    cfg = RunConfig.load(args.config)
    case = cfg.build_case()
    spec = cfg.build_spec(case)
    kw = cfg.cc_kwargs()
    mc = cfg.section("mc")
    n = args.samples or int(mc["samples"])

    state = solve_sequential(case, loss_weight=kw["loss_weight"])
    det = recover_feasible(case, state_to_seed(case, state))
    print(f"SOC objective       {state.objective:,.2f} EUR/h, max cone slack {cone_slacks(state, case).max():.1e}")
    print(f"recovered cost      {det.cost:,.2f} EUR/h, within limits {det.report.within_limits}")

    t0 = time.perf_counter()
    rep = solve_cc(case, spec, **kw)
    print(f"CC passes           {len(rep.iterations)} in {time.perf_counter() - t0:.1f} s")
    print(f"critical lines      {', '.join(f'{l}:{d}' for l, d in rep.critical.sorted()) or 'none'}")
    print(f"CC cost             {rep.cost_cc:,.2f} EUR/h, recovered {rep.cost_recovered:,.2f} EUR/h")

    dev = sample_wind(spec.sigma, n, int(mc["seed"]))
    print(f"\nMonte-Carlo, {n} samples")
    show("deterministic", evaluate_policy(case, ScenarioPolicy.from_solution(case, det.solution, spec.gamma), dev))
    show("CC", evaluate_policy(case, ScenarioPolicy.from_solution(case, rep.recovered.solution, spec.gamma), dev))


if __name__ == "__main__":
    main()
