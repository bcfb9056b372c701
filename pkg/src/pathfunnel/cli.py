"""Command-line front end.

Subcommands: ``catalog``, ``synthesize``, ``verify``, ``simulate`` and
``export-plots``.  Exit codes: 0 success, 1 configuration or IO error,
2 infeasible synthesis or a verification that found violations,
3 synthesis budget exhausted.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .demo import MpcConfig
from .dynamics import InputBox
from .funnel import load_certificate, save_certificate
from .learn import SynthesisConfig, synthesize
from .reference import segment_from_dict
from .regions import RegionSpec, region_from_dict
from .scenarios import Scenario, builtin_segments, check_concatenation, get_scenario
from .sim import Disturbance, Leg, batch_experiment, chain_legs, initial_states
from .verify import certify_margin_profile, falsify, write_margin_profile

log = logging.getLogger("pathfunnel")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_BUDGET = 0, 1, 2, 3
OUTCOME_EXIT = {"found": EXIT_OK, "infeasible": EXIT_INFEASIBLE, "budget-exhausted": EXIT_BUDGET}
OVAL = ("oval-half-1", "oval-half-2")


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ config

_SYNTH_KEYS = {f.name for f in fields(SynthesisConfig)} - {"mode", "box", "mpc"}
_MPC_KEYS = {f.name for f in fields(MpcConfig)} - {"box"}
SCHEMA = {
    "scenario": str, "mode": str, "seed": int, "segment": dict,
    "regions": {"initial": dict, "goal": dict, "safe": dict, "safe_bounds": dict},
    "synthesis": {k: object for k in _SYNTH_KEYS},
    "mpc": {k: object for k in _MPC_KEYS},
    "box": {"u0": list, "gamma": list, "thrust": list, "wheelbase": float},
    "verify": {"budget": int, "grid": int, "per_theta": int},
    "sim": {"dt": float, "dt_ctrl": float, "horizon": float, "strategy": str, "runs": int,
            "laps": int, "init_scale": float, "disturbance": dict},
}


def _line_of(text: str, key: str, after: int = 0) -> int:
    lines = text.splitlines()
    for i in range(after, len(lines)):
        if f'"{key}"' in lines[i]:
            return i + 1
    return 1


def _check(obj: dict, schema: dict, text: str, path: str, path_line: int) -> None:
    for key, val in obj.items():
        line = _line_of(text, key, path_line - 1)
        where = f"{path}{key}"
        if key not in schema:
            known = ", ".join(sorted(schema))
            raise ConfigError(f"line {line}: unknown key {where!r} (allowed: {known})")
        kind = schema[key]
        if isinstance(kind, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"line {line}: {where!r} must be an object")
            _check(val, kind, text, where + ".", line)
        elif kind is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"line {line}: {where!r} must be a number")
        elif kind is not object and (not isinstance(val, kind) or isinstance(val, bool)):
            raise ConfigError(f"line {line}: {where!r} must be of type {kind.__name__}")


def load_config(path) -> dict:
    """Parse and schema-check a JSON config; errors carry the offending line."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: line 1: top level must be an object")
    try:
        _check(cfg, SCHEMA, text, "", 1)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


def build_box(cfg: dict) -> InputBox:
    b = cfg.get("box", {})
    d = InputBox().to_dict()
    d.update(b)
    try:
        return InputBox.from_dict(d)
    except (ValueError, TypeError, IndexError) as exc:
        raise ConfigError(f"box: {exc}") from None


def build_scenario(cfg: dict, name: str | None) -> Scenario:
    if "segment" in cfg:
        regs = cfg.get("regions", {})
        missing = {"initial", "goal", "safe"} - set(regs)
        if missing:
            raise ConfigError(f"inline segment needs regions {sorted(missing)}")
        try:
            seg = segment_from_dict(cfg["segment"])
            spec = RegionSpec(region_from_dict(regs["initial"]), region_from_dict(regs["goal"]),
                              region_from_dict(regs["safe"]),
                              region_from_dict(regs["safe_bounds"]) if "safe_bounds" in regs else None)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"inline scenario: {exc}") from None
        obstacle = spec.safe if getattr(spec.safe, "frame", "") == "inertial" else None
        return Scenario(name or cfg.get("scenario", "inline"), seg, spec, "inline", obstacle=obstacle)
    name = name or cfg.get("scenario")
    if not name:
        raise ConfigError("no scenario given (use --scenario or a config file)")
    try:
        return get_scenario(name)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None


def scenario_from_dict(d: dict) -> Scenario:
    """Rebuild the scenario stored in a certificate."""
    if d["name"] in builtin_segments():
        return get_scenario(d["name"])
    spec = RegionSpec(region_from_dict(d["initial"]), region_from_dict(d["goal"]),
                      region_from_dict(d["safe"]),
                      region_from_dict(d["safe_bounds"]) if "safe_bounds" in d else None)
    obstacle = spec.safe if getattr(spec.safe, "frame", "") == "inertial" else None
    return Scenario(d["name"], segment_from_dict(d["segment"]), spec, d.get("description", ""),
                    obstacle=obstacle)


def build_synthesis(cfg: dict, mode: str, scn: Scenario, iterations: int | None) -> SynthesisConfig:
    kw = dict(scn.overrides)
    kw.update(cfg.get("synthesis", {}))
    if iterations is not None:
        kw["max_iterations"] = iterations
    try:
        mpc = MpcConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in cfg.get("mpc", {}).items()})
        return SynthesisConfig(mode=mode, box=build_box(cfg), mpc=mpc, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthesis settings: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_catalog(args, cfg) -> int:
    cat = builtin_segments()
    if args.scenario:
        if args.scenario not in cat:
            raise ConfigError(f"unknown scenario {args.scenario!r}")
        print(json.dumps(cat[args.scenario].to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    for name, scn in cat.items():
        print(f"{name:22s} T={scn.segment.T:7.3f}  {scn.description}")
    print(f"{'oval':22s} both oval halves with the concatenation check")
    return EXIT_OK


def _synthesize_one(scn: Scenario, mode: str, cfg: dict, args, out: Path) -> str:
    scfg = build_synthesis(cfg, mode, scn, args.budget)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    log.info("synthesizing %s (%s), seed %d", scn.name, mode, seed)
    rep = synthesize(scn.spec, scn.segment, mode, scfg, seed=seed, scenario=scn.name)
    stem = f"{scn.name}-{mode}"
    rep.save(out / f"{stem}.log.json")
    if rep.outcome == "found":
        save_certificate(out / f"{stem}.cert.json", rep.funnel, scn.name, mode, scfg.box,
                         {"loop": scfg.loop_budget, "final": scfg.final_budget,
                          "final_seeds": scfg.final_seeds},
                         {"scenario_def": scn.to_dict(), "seed": seed, "iterations": rep.iterations})
    print(f"{scn.name} {mode}: {rep.outcome} after {rep.iterations} iterations")
    return rep.outcome


def cmd_synthesize(args, cfg) -> int:
    mode = args.mode or cfg.get("mode", "pf")
    if mode not in ("pf", "tt"):
        raise ConfigError(f"mode must be pf or tt, not {mode!r}")
    out = _out_dir(args)
    name = args.scenario or cfg.get("scenario")
    if name == "oval":
        halves = [get_scenario(n) for n in OVAL]
        # the halves only chain if each goal set fits inside the next initial set
        ok = (check_concatenation(halves[0], halves[1], n=1000, seed=0)
              and check_concatenation(halves[1], halves[0], n=1000, seed=1, dalpha=2 * math.pi))
        print(f"oval concatenation G1 in I2 and G2 in I1: {'ok' if ok else 'FAILED'}")
        if not ok:
            return EXIT_INFEASIBLE
        outcomes = [_synthesize_one(h, mode, cfg, args, out) for h in halves]
        return max(OUTCOME_EXIT[o] for o in outcomes)
    scn = build_scenario(cfg, name)
    return OUTCOME_EXIT[_synthesize_one(scn, mode, cfg, args, out)]


def _load_cert(path) -> tuple[dict, Scenario]:
    try:
        cert = load_certificate(path)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "scenario_def" in cert:
        scn = scenario_from_dict(cert["scenario_def"])
    else:
        try:
            scn = get_scenario(cert["scenario"])
        except KeyError as exc:
            raise ConfigError(f"{path}: {exc.args[0]}") from None
    return cert, scn


def cmd_verify(args, cfg) -> int:
    cert, scn = _load_cert(args.certificate)
    vcfg = cfg.get("verify", {})
    budget = args.budget or vcfg.get("budget", 200_000)
    seed = args.seed if args.seed is not None else cfg.get("seed", 1)
    box = cert["input_box"]
    if cert["mode"] == "tt":
        box = box.trajectory_tracking()
    res = falsify(cert["funnel"], scn.spec, scn.segment, box, budget=budget, seed=seed)
    out = _out_dir(args)
    stem = Path(args.certificate).name.replace(".cert.json", "").replace(".json", "")
    report = {"certificate": str(args.certificate), "budget": budget, "seed": seed, **res.to_dict()}
    (out / f"{stem}.verify.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    prof = certify_margin_profile(cert["funnel"], scn.spec, scn.segment, box,
                                  grid=vcfg.get("grid", 50), per_theta=vcfg.get("per_theta", 2000),
                                  seed=seed)
    write_margin_profile(out / f"{stem}.margin.csv", prof)
    print(f"{stem}: {'clean' if res.clean else 'VIOLATED'} at {budget} samples, "
          f"worst margins {json.dumps({k: round(v, 6) for k, v in res.worst.items()})}")
    return EXIT_OK if res.clean else EXIT_INFEASIBLE


def cmd_simulate(args, cfg) -> int:
    certs = [_load_cert(p) for p in args.certificate]
    modes = {c["mode"] for c, _ in certs}
    if len(modes) != 1:
        raise ConfigError("all certificates of one run must share a mode")
    mode = modes.pop()
    scfg = cfg.get("sim", {})
    laps = args.laps or scfg.get("laps", 1)
    runs = args.runs or scfg.get("runs", 10)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    try:
        dist = Disturbance.from_dict(scfg.get("disturbance", {"kind": "none"}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sim.disturbance: {exc}") from None
    legs = [Leg(scn.segment, c["funnel"], scn.spec) for c, scn in certs] * laps
    legs = chain_legs(legs)
    first = certs[0][1]
    x0s = initial_states(first.segment, first.spec.initial, runs, seed=seed,
                         scale=scfg.get("init_scale", 1.0))
    res = batch_experiment(legs, x0s, mode=mode, strategy=scfg.get("strategy", "min-norm-qp"),
                           box=certs[0][0]["input_box"], disturbance=dist, seed=seed,
                           horizon=scfg.get("horizon"), dt=scfg.get("dt", 0.01),
                           dt_ctrl=scfg.get("dt_ctrl", 0.01), obstacle=first.obstacle)
    out = _out_dir(args)
    tdir = out / "traces"
    tdir.mkdir(parents=True, exist_ok=True)
    for i, tr in enumerate(res["runs"]):
        tr.meta.update(scenario=first.name, laps=laps, seed=seed)
        tr.to_csv(tdir / f"run-{i:03d}.csv")
        tr.to_json(tdir / f"run-{i:03d}.json")
    (out / "summary.json").write_text(json.dumps(res["aggregate"], indent=2, sort_keys=True))
    agg = res["aggregate"]
    print(f"{first.name} {mode} x{len(legs)} legs: {agg['n']} runs, success {agg['success_rate']:.2f}, "
          f"safe {agg['safe_rate']:.2f}")
    return EXIT_OK


def cmd_export_plots(args, cfg) -> int:
    tdir = Path(args.traces)
    if (tdir / "traces").is_dir():
        tdir = tdir / "traces"
    files = sorted(tdir.glob("run-*.csv")) if tdir.is_dir() else []
    if not files:
        print(f"no traces in {args.traces}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args)
    series = {"xy-path.csv": ("x", "y"), "V-vs-t.csv": ("t", "V"), "v-vs-t.csv": ("t", "v")}
    writers, handles = {}, []
    for name, cols in series.items():
        fh = open(out / name, "w", newline="")
        handles.append(fh)
        writers[name] = csv.writer(fh)
        writers[name].writerow(["run", *cols] if "t" in cols else ["run", "t", *cols])
    try:
        for f in files:
            run = f.stem.split("-")[-1]
            data = np.atleast_1d(np.genfromtxt(f, delimiter=",", names=True))
            for k in range(len(data)):
                writers["xy-path.csv"].writerow([run, repr(float(data["t"][k])),
                                                 repr(float(data["x"][k])), repr(float(data["y"][k]))])
                writers["V-vs-t.csv"].writerow([run, repr(float(data["t"][k])), repr(float(data["V"][k]))])
                writers["v-vs-t.csv"].writerow([run, repr(float(data["t"][k])), repr(float(data["v"][k]))])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"malformed trace file: {exc}") from None
    finally:
        for fh in handles:
            fh.close()
    margins = sorted(Path(args.traces).glob("*.margin.csv"))
    for m in margins:
        (out / f"margin-profile-{m.name.replace('.margin.csv', '')}.csv").write_text(m.read_text())
    print(f"exported {len(files)} traces to {out}")
    return EXIT_OK


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"{out}: {exc.strerror}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathfunnel", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out-dir", default=".", help="output directory (default: .)")
        if seed:
            sp.add_argument("--seed", type=int, help="random seed")

    sp = sub.add_parser("catalog", help="list built-in scenarios")
    sp.add_argument("--scenario", help="print one scenario in full")
    sp.set_defaults(func=cmd_catalog, config=None)

    sp = sub.add_parser("synthesize", help="learn a funnel certificate")
    sp.add_argument("--scenario", help="scenario name ('oval' runs both halves)")
    sp.add_argument("--mode", choices=("pf", "tt"))
    sp.add_argument("--budget", type=int, help="maximum learner iterations")
    common(sp)
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("verify", help="falsify a certificate and write its margin profile")
    sp.add_argument("certificate")
    sp.add_argument("--budget", type=int, help="falsifier samples (default 200000)")
    common(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("simulate", help="closed-loop runs from the initial set")
    sp.add_argument("certificate", nargs="+", help="one certificate per leg, in order")
    sp.add_argument("--runs", type=int)
    sp.add_argument("--laps", type=int, help="repeat the legs this many times")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("export-plots", help="CSV bundles for plotting from simulated traces")
    sp.add_argument("traces", help="directory written by simulate")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_export_plots)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else {}
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
