"""Command-line entry point: ``stlswarm {specs,monitor,train,plan,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, region_table
from .env import NonFiniteError, load_trajectory
from .evaluation import results_csv, run_experiment, write_results
from .io import atomic_write_text, dumps_jsonl
from .planner import CheckpointError, PlannerConfig, inference_time, load_checkpoint, plan
from .stl import BUILTIN_NAMES, BoundError, HorizonError, SpecSyntaxError, builtin_spec, robustness_exact, to_text
from .stl.specs import UnknownSpecError, custom_spec
from .train import DivergenceError, train

log = logging.getLogger("stlswarm")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (
    ConfigError, SpecSyntaxError, BoundError, HorizonError, UnknownSpecError,
    CheckpointError, FileNotFoundError, json.JSONDecodeError,
)


class InputError(ValueError):
    pass


# -- specs -----------------------------------------------------------------------


def cmd_specs(args) -> int:
    for name in BUILTIN_NAMES:
        s = builtin_spec(name)
        print(f"{name:7s} T={s.T:<3d} k={s.k:<3d} T_h={s.eval_horizon:<5d} {to_text(s.formula)}")
    return EXIT_OK


# -- monitor ---------------------------------------------------------------------


def _monitor_spec(args):
    if not args.formula:
        return builtin_spec(args.spec)
    if args.T is None or args.k is None:
        raise InputError("--formula needs --T and --k")
    regions = region_table(json.loads(Path(args.regions).read_text()) if args.regions else None)
    return custom_spec(args.formula, regions, args.T, args.k, "inline")


def cmd_monitor(args) -> int:
    spec = _monitor_spec(args)
    traj, _, header = load_trajectory(args.trajectory)
    pos = traj.positions
    use_arrivals = args.sampling == "arrivals" or (args.sampling == "auto" and "arrivals" in header)
    if use_arrivals and "arrivals" not in header:
        raise InputError("trajectory header has no arrival times")
    stride = args.stride if args.stride is not None else spec.k
    if stride < 1:
        raise InputError("--stride must be >= 1")
    ok = True
    report = []
    for i in range(traj.n_agents):
        if use_arrivals:
            arr = np.asarray(header["arrivals"][i])
            if np.any(arr < 0):
                raise HorizonError(f"horizon: agent {i} did not reach all waypoints")
            sig = pos[arr, i]
        else:
            sig = pos[::stride, i]
        rho = robustness_exact(spec.formula, sig)
        sat = rho >= 0
        ok &= sat
        report.append({"agent": i, "robustness": rho, "satisfied": sat})
        print(f"agent {i}: robustness {rho:+.6f} {'SAT' if sat else 'VIOLATED'}")
    print("verdict:", "satisfied" if ok else "violated")
    if args.json:
        atomic_write_text(args.json, json.dumps(report, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_RUNTIME


# -- train / plan / eval -----------------------------------------------------------


def _resolved(args):
    overrides = {"output_dir": args.out} if getattr(args, "out", None) else None
    return load_config(args.config, overrides).resolve()


def cmd_train(args) -> int:
    r = _resolved(args)
    out = Path(r.raw.output_dir)
    _, h = r.write(out)
    log.info("config sha256 %s", h)
    try:
        res = train(r.env, r.spec, r.loss, r.planner, r.controller, out_dir=out,
                    on_epoch=lambda rec: log.info("epoch %(epoch)d loss %(loss).4f", rec))
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"trained {r.loss.epochs} epochs; final loss {res.curve[-1]['loss'] if res.curve else float('nan'):.4f}")
    print(f"checkpoint: {out / 'final.npz'}")
    return EXIT_OK


def _load_states(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    text = p.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        traj, _, _ = load_trajectory(p)
        return traj.states[0]
    if isinstance(data, dict):
        if data.get("header"):
            traj, _, _ = load_trajectory(p)
            return traj.states[0]
        data = data["states"]
    return np.asarray(data, dtype=np.float64)


def cmd_plan(args) -> int:
    r = _resolved(args)
    ckpt = args.checkpoint or r.checkpoint
    if not ckpt:
        raise InputError("no checkpoint given (--checkpoint or planner.checkpoint)")
    params, _ = load_checkpoint(ckpt)
    states = _load_states(args.states)
    if states.ndim != 2 or states.shape[1] != r.env.state_dim:
        raise InputError(f"states must be (N, {r.env.state_dim}), got {states.shape}")
    goals = plan(params, states, r.env, r.spec)
    secs = inference_time(params, states, r.env, r.spec, args.repetitions)
    out = Path(r.raw.output_dir)
    r.write(out)
    atomic_write_text(out / "plan.json", json.dumps(
        {"spec": r.spec.name, "plan": goals.tolist(), "planning_time_s": secs}) + "\n")
    print(f"planning time: {secs * 1000:.2f} ms per plan (N={states.shape[0]})")
    print(f"plan: {out / 'plan.json'}")
    return EXIT_OK


def _eval_one(job):
    label, planner, r = job
    return run_experiment(planner, r.env, r.spec, r.eval.N, r.eval.seeds, r.controller if planner != "nominal" else None,
                          base_seed=r.eval.base_seed, label=label)


def cmd_eval(args) -> int:
    r = _resolved(args)
    out = Path(r.raw.output_dir)
    r.write(out)
    jobs = []
    ckpt = args.checkpoint or (r.checkpoint if not args.baseline else None)
    if ckpt:
        params, _ = load_checkpoint(ckpt)
        jobs.append((params.config.mode, params, r))
    for b in args.baseline or []:
        if b == "nominal":
            jobs.append(("nominal", "nominal", r))
        elif b == "ode":
            if args.ode_checkpoint:
                params, _ = load_checkpoint(args.ode_checkpoint)
                if params.config.mode != "ode_only":
                    raise InputError(f"{args.ode_checkpoint} is a {params.config.mode} checkpoint")
            else:
                log.info("training an ode_only planner for the baseline")
                pcfg = PlannerConfig(**(r.planner.to_dict() | {"mode": "ode_only"}))
                params = train(r.env, r.spec, r.loss, pcfg, r.controller, out_dir=out / "ode_baseline").params
            jobs.append(("ode_only", params, r))
    if not jobs:
        raise InputError("nothing to evaluate: pass --checkpoint and/or --baseline")
    if r.eval.seeds == 0:
        results = [(None, []) for _ in jobs]
    elif args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_eval_one, jobs))
    else:
        results = [_eval_one(j) for j in jobs]
    rows = [row for row, _ in results]
    records = [rec for _, recs in results for rec in recs]
    table, _ = write_results(out, rows, records)
    sys.stdout.write(results_csv(rows))
    log.info("results: %s", table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stlswarm", description="Multi-agent STL planning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("specs", help="list builtin specifications")

    m = sub.add_parser("monitor", help="exact robustness of a trajectory file")
    g = m.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="builtin spec name")
    g.add_argument("--formula", help="inline spec-language formula")
    m.add_argument("--regions", help="JSON region table for --formula")
    m.add_argument("--T", type=int)
    m.add_argument("--k", type=int)
    m.add_argument("--sampling", choices=("auto", "arrivals", "stride"), default="auto")
    m.add_argument("--stride", type=int, help="sample every STRIDE steps (default k)")
    m.add_argument("--json", help="also write the report here")
    m.add_argument("trajectory")

    for name, helptext in (("train", "train a planner"), ("plan", "plan from initial states"),
                           ("eval", "run seeded experiments")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("config", nargs="?", help="YAML/JSON run config")
        c.add_argument("--out", help="output directory (overrides output_dir)")
        if name == "plan":
            c.add_argument("--checkpoint")
            c.add_argument("--states", required=True, help="JSON/.npy initial states or a trajectory file")
            c.add_argument("--repetitions", type=int, default=10)
        if name == "eval":
            c.add_argument("--checkpoint")
            c.add_argument("--baseline", action="append", choices=("nominal", "ode"))
            c.add_argument("--ode-checkpoint")
    return p


COMMANDS = {"specs": cmd_specs, "monitor": cmd_monitor, "train": cmd_train, "plan": cmd_plan, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        # malformed files surface as ValueError from the loaders
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NonFiniteError, FloatingPointError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
