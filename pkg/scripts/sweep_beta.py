"""Beta sweep on the config's ``[sweep.beta]`` axes, printed as a table.

    python scripts/sweep_beta.py [--config configs/case118.toml] [--samples 2000] [--csv out.csv]

Each row is a full CC solve, recovery and Monte-Carlo run, so the default
11-point axis takes a few minutes on one core.  CCSOCOPF_WORKERS spreads
the rows over processes.
"""

import argparse
import csv
from pathlib import Path

from ccsocopf.cli import RunConfig
from ccsocopf.driver import sweep_beta

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "case118.toml"))
    ap.add_argument("--samples", type=int)
    ap.add_argument("--csv")
    args = ap.parse_args()

    cfg = RunConfig.load(args.config)
    case = cfg.build_case()
    spec = cfg.build_spec(case)
    samples = args.samples or int(cfg.section("sweep")["samples"])
    rows = sweep_beta(case, spec, cfg.sweep_axes(), samples, int(cfg.section("mc")["seed"]), **cfg.cc_kwargs())

    keys = sorted({k for r in rows for k in r["beta"]})
    print("  ".join(f"{k:>10}" for k in keys) + "      cost_cc   P max   V max   S max   joint")
    for r in rows:
        head = "  ".join(f"{r['beta'][k]:>10.2f}" for k in keys)
        if r["status"] != "ok":
            print(f"{head}  {r['status']}: {r.get('error', '')}")
            continue
        m = r["per_class_max"]
        print(f"{head}  {r['cost_cc']:>11,.2f}  {m['gen_p']:6.2%}  {m['bus_v']:6.2%}  {m['flow_s']:6.2%}  {r['joint']:6.2%}")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys + ["status", "cost_cc", "gen_p", "bus_v", "flow_s", "joint"])
            for r in rows:
                m = r.get("per_class_max", {})
                w.writerow([r["beta"][k] for k in keys] + [r["status"], r.get("cost_cc"), m.get("gen_p"),
                                                          m.get("bus_v"), m.get("flow_s"), r.get("joint")])


if __name__ == "__main__":
    main()
