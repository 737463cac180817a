"""Command line: solve, cc-solve, recover, validate, sweep-beta, screen.

Every subcommand reads a TOML run config.  ``--set section.key=value``
overrides any entry; a few common ones also have their own flags.
Artifacts are JSON (sorted keys) and CSV, stamped with the config hash.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import DATA_DIR, __version__
from .chance import CrossedBoundsError, UncertaintyError, UncertaintySpec, screen_critical_lines
from .driver import CcConvergenceError, solve_cc, sweep_beta, write_margin_csv
from .network import CaseError, NetworkCase, WindAddition, apply_modifiers, load_case
from .powerflow import PowerFlowError, injection_mismatch, recover_feasible
from .sensitivities import SensitivityError, ptdf
from .socopf import SocOpfError, SocState, cone_slacks, solve_sequential, state_to_seed
from .validation import ScenarioPolicy, evaluate_policy, sample_wind

log = logging.getLogger("ccsocopf")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "case": {"path": None, "rating_scale": 1.0, "wind": []},
    "uncertainty": {"epsilon": 0.05, "default_beta": 0.5, "beta": {}, "correlation": None, "gamma": None},
    "solver": {
        "rho": 1e-5, "angle_tol": 1e-6, "max_outer": 30, "pf_tol": 1e-8,
        "limits_tol": 1e-6, "loss_weight": 0.0,
    },
    "mc": {"samples": 10_000, "seed": 0},
    "sweep": {"samples": 2_000, "beta": {}},
    "output": {"dir": "out"},
}


def _merge(base: dict, new: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("beta",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _line_key(key: str):
    """``"37:forward"`` -> (37, "forward"); ``"37"`` -> 37 (both directions)."""
    parts = str(key).split(":")
    try:
        l = int(parts[0])
    except ValueError:
        raise ConfigError(f"bad line key {key!r}; use '<branch>' or '<branch>:forward|reverse'") from None
    if len(parts) == 1:
        return l
    if parts[1] not in ("forward", "reverse"):
        raise ConfigError(f"bad direction in {key!r}")
    return (l, parts[1])


@dataclass
class RunConfig:
    raw: dict
    source: Path | None = None
    case_file: Path = field(init=False)

    def __post_init__(self):
        c = self.raw
        path = c["case"]["path"]
        if not path:
            raise ConfigError("case.path is required")
        if str(path).startswith("builtin:"):
            p = DATA_DIR / str(path).split(":", 1)[1]
        else:
            p = Path(path)
            if not p.is_absolute() and self.source is not None:
                p = self.source.parent / p
        if not p.exists():
            raise ConfigError(f"case file not found: {p}")
        self.case_file = p
        s = c["solver"]
        for k in ("rho", "angle_tol", "pf_tol", "limits_tol"):
            if not float(s[k]) > 0:
                raise ConfigError(f"solver.{k} must be positive")
        if float(s["loss_weight"]) < 0:
            raise ConfigError("solver.loss_weight must be nonnegative")
        if int(c["mc"]["samples"]) < 1:
            raise ConfigError("mc.samples must be at least 1")

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            data = tomli.load(fh)
        return cls.from_dict(data, overrides, source=path)

    @classmethod
    def from_dict(cls, data: dict, overrides=(), source=None) -> "RunConfig":
        raw = _merge(DEFAULTS, data)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, val = item.split("=", 1)
            *head, last = key.strip().split(".")
            node = raw
            for h in head:
                node = node.setdefault(h, {})
            node[last] = _parse_value(val.strip())
        return cls(raw, source)

    def section(self, name) -> dict:
        return self.raw[name]

    def config_hash(self) -> str:
        """sha256 over the canonical config (minus output dir) and the case file bytes."""
        body = copy.deepcopy(self.raw)
        body.pop("output", None)
        body["case"]["path"] = hashlib.sha256(self.case_file.read_bytes()).hexdigest()
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def build_case(self) -> NetworkCase:
        c = self.raw["case"]
        adds = []
        for w in c.get("wind", []):
            p = float(w["p_mw"])
            sigma = float(w["sigma_mw"]) if "sigma_mw" in w else float(w.get("sigma_frac", 0.0)) * p
            adds.append(WindAddition(int(w["bus"]), p, sigma, float(w.get("pf_min", 0.95))))
        return apply_modifiers(load_case(self.case_file), float(c["rating_scale"]), adds)

    def build_spec(self, case: NetworkCase) -> UncertaintySpec:
        u = self.raw["uncertainty"]
        db = u["default_beta"]
        db = None if db in (None, "none") else float(db)
        beta = {}
        for k, v in u.get("beta", {}).items():
            key = _line_key(k)
            keys = [key] if isinstance(key, tuple) else [(key, "forward"), (key, "reverse")]
            for kk in keys:
                beta[kk] = float(v)
        kw = {"beta": beta, "default_beta": db}
        if u.get("gamma") is not None:
            kw["gamma"] = np.asarray(u["gamma"], float)
        return UncertaintySpec.from_case(case, float(u["epsilon"]), u.get("correlation"), **kw)

    def cc_kwargs(self) -> dict:
        s = self.raw["solver"]
        return {
            "rho": float(s["rho"]), "max_outer": int(s["max_outer"]),
            "angle_tol": float(s["angle_tol"]), "loss_weight": float(s["loss_weight"]),
        }

    def sweep_axes(self) -> dict:
        axes = {}
        for k, vals in self.raw["sweep"].get("beta", {}).items():
            vals = [float(v) for v in vals]
            if not all(0 < v < 1 for v in vals):
                raise ConfigError(f"sweep beta values for {k!r} must lie in (0, 1)")
            axes[_line_key(k)] = vals
        if not axes:
            raise ConfigError("sweep.beta has no axes")
        return axes

    def out_dir(self) -> Path:
        d = Path(self.raw["output"]["dir"])  # relative to the working directory
        d.mkdir(parents=True, exist_ok=True)
        return d


# ---------------------------------------------------------------------------
# artifacts


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=1, sort_keys=True) + "\n")


def _stamp(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "config_hash": cfg.config_hash(), "seed": int(cfg.raw["mc"]["seed"]),
            "version": __version__}


def _dispatch_rows(case: NetworkCase, p_gen, q_gen):
    base = case.base_mva
    for k, g in enumerate(case.generators):
        yield [k, case.buses[g.bus].id, f"{p_gen[k] * base:.6f}", f"{q_gen[k] * base:.6f}"]


def write_dispatch_csv(path: Path, case: NetworkCase, p_gen, q_gen) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gen", "bus", "p_mw", "q_mvar"])
        w.writerows(_dispatch_rows(case, p_gen, q_gen))


def _load_artifact_state(path: Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"artifact not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"artifact {path} is not JSON: {exc}") from None
    return data


def _state_from_artifact(data: dict) -> SocState:
    for key in ("final_state", "state"):
        if data.get(key):
            return SocState.from_dict(data[key])
    raise ConfigError("artifact holds no SOC state ('state' or 'final_state')")


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(cfg: RunConfig, args) -> int:
    case = cfg.build_case()
    s = cfg.section("solver")
    state = solve_sequential(case, None, float(s["angle_tol"]), loss_weight=float(s["loss_weight"]))
    slack = cone_slacks(state, case)
    dP, dQ = injection_mismatch(case, state_to_seed(case, state))
    out = cfg.out_dir()
    loose = np.flatnonzero(slack > 1e-6)
    top = np.argsort(-np.hypot(dP, dQ))[:5]
    write_json(out / "solve.json", {
        **_stamp(cfg, "solve"),
        "objective_eur_per_h": state.objective,
        "loss_penalty": state.loss_penalty,
        "inner_iterations": state.inner_iterations,
        "loose_cones": [{"branch": int(l), "slack": float(slack[l])} for l in loose],
        "mismatch": {
            "max_p_mw": float(np.abs(dP).max() * case.base_mva),
            "max_q_mvar": float(np.abs(dQ).max() * case.base_mva),
            "worst_buses": [case.buses[i].id for i in top],
        },
        "state": state.to_dict(),
    })
    write_dispatch_csv(out / "dispatch.csv", case, state.p_gen, state.q_gen)
    with open(out / "cones.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["branch", "from_bus", "to_bus", "slack_pu2"])
        for l in range(case.n_branch):
            w.writerow([l, case.buses[case.f[l]].id, case.buses[case.t[l]].id, f"{slack[l]:.3e}"])
    print(f"SOC-OPF objective  {state.objective:,.2f} EUR/h  ({state.inner_iterations} angle passes)")
    print(f"loose cones        {len(loose)}  max slack {slack.max(initial=0):.3e} p.u.^2")
    print(f"max mismatch       {np.abs(dP).max() * case.base_mva:.4f} MW, {np.abs(dQ).max() * case.base_mva:.4f} Mvar")
    print(f"artifacts in       {out}")
    return EXIT_OK


def _recover_and_write(cfg, case, state, out, name="recovery.json"):
    s = cfg.section("solver")
    rec = recover_feasible(case, state_to_seed(case, state), limits_tol=float(s["limits_tol"]), tol=float(s["pf_tol"]))
    write_json(out / name, {**_stamp(cfg, "recover"), **rec.to_dict()})
    return rec


def cmd_recover(cfg: RunConfig, args) -> int:
    case = cfg.build_case()
    if args.state:
        state = _state_from_artifact(_load_artifact_state(args.state))
    else:
        s = cfg.section("solver")
        state = solve_sequential(case, None, float(s["angle_tol"]), loss_weight=float(s["loss_weight"]))
    out = cfg.out_dir()
    rec = _recover_and_write(cfg, case, state, out)
    write_dispatch_csv(out / "recovered_dispatch.csv", case, rec.solution.p_gen, rec.solution.q_gen)
    tag = "inside limits" if rec.report.within_limits else "limits violated"
    print(f"recovered cost     {rec.cost:,.2f} EUR/h  ({tag}, {rec.report.rounds} rounds)")
    print(f"artifacts in       {out}")
    return EXIT_OK


def cmd_cc_solve(cfg: RunConfig, args) -> int:
    case = cfg.build_case()
    spec = cfg.build_spec(case)
    t0 = time.perf_counter()
    rep = solve_cc(case, spec, **cfg.cc_kwargs())
    wall = time.perf_counter() - t0
    out = cfg.out_dir()
    write_json(out / "cc_report.json", {**_stamp(cfg, "cc-solve"), **rep.to_dict()})
    write_margin_csv(rep, out / "margins.csv")
    write_dispatch_csv(out / "dispatch.csv", case, rep.final_state.p_gen, rep.final_state.q_gen)
    if rep.recovered is not None:
        write_dispatch_csv(out / "recovered_dispatch.csv", case, rep.recovered.solution.p_gen,
                           rep.recovered.solution.q_gen)
    print(f"{'pass':>4} {'objective EUR/h':>16} {'margin change':>14} {'angle passes':>12}  added")
    for r in rep.iterations:
        added = ", ".join(f"{l}:{d}" for l, d in r.critical_added)
        print(f"{r.index:>4} {r.objective:>16,.2f} {r.margin_delta:>14.3e} {r.inner_iterations:>12}  {added}")
    print(f"critical lines     {', '.join(f'{l}:{d}' for l, d in rep.critical.sorted()) or 'none'}")
    print(f"CC cost            {rep.cost_cc:,.2f} EUR/h")
    if rep.recovered is not None:
        tag = "inside limits" if rep.recovered.report.within_limits else "limits violated"
        print(f"recovered cost     {rep.cost_recovered:,.2f} EUR/h  ({tag})")
    else:
        print(f"recovery failed    {rep.recovery_error}")
    print(f"wall time          {wall:.2f} s")
    print(f"artifacts in       {out}")
    return EXIT_OK


def _policy_for(cfg, case, spec, args):
    """Base point for validation: an artifact, or a fresh deterministic / CC run."""
    if args.source:
        data = _load_artifact_state(args.source)
        if data.get("recovered_solution"):
            return ScenarioPolicy.from_dict(case, data["recovered_solution"], spec.gamma), Path(args.source).name
        if data.get("solution"):
            return ScenarioPolicy.from_dict(case, data["solution"], spec.gamma), Path(args.source).name
        state = _state_from_artifact(data)
        rec = recover_feasible(case, state_to_seed(case, state))
        return ScenarioPolicy.from_solution(case, rec.solution, spec.gamma), Path(args.source).name
    s = cfg.section("solver")
    if args.point == "deterministic":
        state = solve_sequential(case, None, float(s["angle_tol"]), loss_weight=float(s["loss_weight"]))
        rec = recover_feasible(case, state_to_seed(case, state))
    else:
        rec = solve_cc(case, spec, **cfg.cc_kwargs()).recovered
        if rec is None:
            raise PowerFlowError("CC point could not be recovered; nothing to validate")
    return ScenarioPolicy.from_solution(case, rec.solution, spec.gamma), args.point


def print_table(report) -> None:
    pcm = report.per_class_max
    se = {k: report.std_error(v) for k, v in pcm.items()}
    print(f"{'constraint class':<34} {'max violation':>14} {'std. error':>11}")
    for label, key in (("Generator active power limits", "gen_p"), ("Bus voltage limits", "bus_v"),
                       ("Apparent power line flow limits", "flow_s")):
        print(f"{label:<34} {100 * pcm[key]:>13.2f}% {100 * se[key]:>10.2f}%")
    print(f"{'Joint violation probability':<34} {100 * report.joint:>13.2f}% {100 * report.std_error(report.joint):>10.2f}%")
    print(f"samples {report.samples}, diverged {report.diverged}")


def cmd_validate(cfg: RunConfig, args) -> int:
    case = cfg.build_case()
    spec = cfg.build_spec(case)
    policy, base = _policy_for(cfg, case, spec, args)
    mc = cfg.section("mc")
    dev = sample_wind(spec.sigma, int(mc["samples"]), int(mc["seed"]))
    s = cfg.section("solver")
    rep = evaluate_policy(case, policy, dev, limits_tol=float(s["limits_tol"]), pf_tol=float(s["pf_tol"]))
    out = cfg.out_dir()
    write_json(out / "validation.json", {**_stamp(cfg, "validate"), "base": base, **rep.to_dict()})
    with open(out / "violations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "index", "end", "probability", "std_error"])
        for cls_name, arr in (("gen_p", rep.gen_p), ("gen_q_audit", rep.gen_q), ("bus_v", rep.bus_v)):
            for i in np.flatnonzero(arr):
                w.writerow([cls_name, i, "", f"{arr[i]:.6f}", f"{rep.std_error(arr[i]):.6f}"])
        for l, e in zip(*np.nonzero(rep.flow)):
            w.writerow(["flow_s", l, ("from", "to")[e], f"{rep.flow[l, e]:.6f}", f"{rep.std_error(rep.flow[l, e]):.6f}"])
    print_table(rep)
    print(f"artifacts in       {out}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    case = cfg.build_case()
    spec = cfg.build_spec(case)
    axes = cfg.sweep_axes()
    sw = cfg.section("sweep")
    rows = sweep_beta(case, spec, axes, int(sw["samples"]), int(cfg.section("mc")["seed"]), **cfg.cc_kwargs())
    out = cfg.out_dir()
    write_json(out / "sweep.json", {**_stamp(cfg, "sweep-beta"), "rows": rows})
    keys = sorted({k for r in rows for k in r["beta"]})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"beta[{k}]" for k in keys] + [
            "status", "iterations", "cost_cc_eur_h", "cost_recovered_eur_h", "within_limits",
            "max_gen_p", "max_bus_v", "max_flow_s", "joint"])
        for r in rows:
            pcm = r.get("per_class_max", {})
            w.writerow([r["beta"].get(k, "") for k in keys] + [
                r["status"], r.get("iterations", ""), r.get("cost_cc", ""), r.get("cost_recovered", ""),
                r.get("within_limits", ""), pcm.get("gen_p", ""), pcm.get("bus_v", ""), pcm.get("flow_s", ""),
                r.get("joint", "")])
    ok = sum(r["status"] == "ok" for r in rows)
    print(f"sweep rows         {len(rows)} ({ok} ok)")
    print(f"artifacts in       {out}")
    return EXIT_OK


def cmd_screen(cfg: RunConfig, args) -> int:
    case = cfg.build_case()
    spec = cfg.build_spec(case)
    if args.state:
        state = _state_from_artifact(_load_artifact_state(args.state))
    else:
        s = cfg.section("solver")
        state = solve_sequential(case, None, float(s["angle_tol"]), loss_weight=float(s["loss_weight"]))
    crit = screen_critical_lines(case, state, spec, ptdf(case))
    out = cfg.out_dir()
    lines = [{"branch": l, "direction": d, "from_bus": case.buses[case.f[l]].id,
              "to_bus": case.buses[case.t[l]].id, "rating_mva": float(case.rating[l] * case.base_mva)}
             for l, d in crit.sorted()]
    write_json(out / "screen.json", {**_stamp(cfg, "screen"), "critical": lines})
    for e in lines:
        print(f"branch {e['branch']:>4} ({e['from_bus']}-{e['to_bus']}) {e['direction']:<8} rating {e['rating_mva']:.1f} MVA")
    if not lines:
        print("no critical lines")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccsocopf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="TOML run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. solver.rho=1e-6")
        sp.add_argument("--out", help="output directory (output.dir)")
        sp.add_argument("--seed", type=int, help="Monte-Carlo seed (mc.seed)")
        sp.add_argument("--samples", type=int, help="Monte-Carlo samples (mc.samples)")
        sp.add_argument("--epsilon", type=float, help="violation level (uncertainty.epsilon)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("solve", help="deterministic SOC-OPF with the angle loop"))
    sp = common(sub.add_parser("recover", help="AC feasibility recovery from a SOC state"))
    sp.add_argument("--state", help="solve.json or cc_report.json to warm start from")
    common(sub.add_parser("cc-solve", help="chance-constrained outer loop plus recovery"))
    sp = common(sub.add_parser("validate", help="Monte-Carlo violation probabilities"))
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--point", choices=("deterministic", "cc"), default="cc")
    g.add_argument("--from", dest="source", help="artifact with a recovered solution or SOC state")
    common(sub.add_parser("sweep-beta", help="beta grid: CC solve, recovery and Monte-Carlo per point"))
    sp = common(sub.add_parser("screen", help="critical-line screening at a SOC state"))
    sp.add_argument("--state", help="solve.json or cc_report.json; default solves first")
    return p


COMMANDS = {
    "solve": cmd_solve, "recover": cmd_recover, "cc-solve": cmd_cc_solve,
    "validate": cmd_validate, "sweep-beta": cmd_sweep, "screen": cmd_screen,
}

INPUT_ERRORS = (ConfigError, CaseError, FileNotFoundError, tomli.TOMLDecodeError, UncertaintyError)
SOLVER_ERRORS = (SocOpfError, CcConvergenceError, CrossedBoundsError, PowerFlowError, SensitivityError)


def _fail(code: int, exc: BaseException, command: str | None) -> int:
    payload = {"status": "error", "exit_code": code, "command": command,
               "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, CrossedBoundsError):
        payload["quantity"] = exc.quantity
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    for flag, key in (("out", "output.dir"), ("seed", "mc.seed"), ("samples", "mc.samples"),
                      ("epsilon", "uncertainty.epsilon")):
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{key}={json.dumps(val)}")
    try:
        cfg = RunConfig.load(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except CrossedBoundsError as exc:  # subclass of UncertaintyError but an algorithm outcome
        return _fail(EXIT_FAIL, exc, args.command)
    except INPUT_ERRORS as exc:
        return _fail(EXIT_INPUT, exc, args.command)
    except SOLVER_ERRORS as exc:
        return _fail(EXIT_FAIL, exc, args.command)


if __name__ == "__main__":
    sys.exit(main())
