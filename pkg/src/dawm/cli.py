"""Command-line entry point: ``dawm <subcommand> [flags]``.

Exit codes: 0 success, 1 configuration error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .agents import AgentFault, load_agent
from .data import DatasetFormatError, load_dataset, save_dataset
from .diffusion import SamplingFault, WorldModel
from .envs import rng_stream
from .idm import IdmModel
from .nn import CheckpointError

COMMANDS = ("gen-data", "train-dwm", "train-idm", "synthesize", "train-agent", "eval", "run", "run-matrix", "report")
EXIT_OK, EXIT_CONFIG, EXIT_FAULT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON RunConfig file")
    common.add_argument("--seed", type=int, default=None, help="root seed (default: config value, 100)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    common.add_argument("--threads", type=int, default=None, help="synthesis worker threads")

    p = _Parser(prog="dawm", description="Diffusion world model data augmentation for offline RL.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="roll out behavior policies into a dataset")
    for name, text in (("train-dwm", "train the diffusion world model"), ("train-idm", "train the inverse dynamics model")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--dataset", help="dataset file from gen-data")
    s = sub.add_parser("synthesize", parents=[common], help="generate a synthetic transition buffer")
    s.add_argument("--dataset")
    s.add_argument("--dwm", help="world-model checkpoint")
    s.add_argument("--idm", help="IDM checkpoint")
    s = sub.add_parser("train-agent", parents=[common], help="train an agent on a buffer or a dataset")
    s.add_argument("--buffer", help="buffer file from synthesize")
    s.add_argument("--dataset", help="train on real transitions instead of a buffer")
    s = sub.add_parser("eval", parents=[common], help="evaluate an agent checkpoint")
    s.add_argument("--checkpoint", help="agent checkpoint")
    sub.add_parser("run", parents=[common], help="full chain in one process")
    s = sub.add_parser("run-matrix", parents=[common], help="sweep config values over seeds")
    s.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2",
                   help="swept key and its values (repeatable); named presets: H, T, source, agent")
    s.add_argument("--seeds", default="100,101,102", help="comma-separated seeds")
    s.add_argument("--envs", default=None, help="comma-separated env names (default: config env)")
    s.add_argument("--jobs", type=int, default=1, help="cells run in parallel processes")
    s = sub.add_parser("report", parents=[common], help="aggregate run directories into a CSV")
    s.add_argument("run_dirs", nargs="*")
    return p


# -- helpers ----------------------------------------------------------------

def _require(args, name: str) -> str:
    value = getattr(args, name.replace("-", "_"), None)
    if not value:
        raise P.ConfigError(f"{args.command}: missing required --{name}")
    return value


def _out(args) -> Path:
    return Path(_require(args, "out"))


def _resolve(args) -> P.RunConfig:
    overrides = list(args.set)
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    return P.load_config(args.config, overrides, seed=args.seed)


def _write_config(out: Path, cfg: P.RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _load(kind: str, loader, path: str):
    try:
        return loader(path)
    except FileNotFoundError:
        raise P.ConfigError(f"{kind} file {path} not found") from None


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def parse_sweep(items: list[str]) -> dict[str, list]:
    sweep = {}
    for item in items:
        if "=" not in item:
            if item not in P.SWEEPS:
                raise P.ConfigError(f"unknown sweep preset {item!r}; presets: {sorted(P.SWEEPS)}")
            key, values = P.SWEEPS[item]
        else:
            key, text = item.split("=", 1)
            values = [json.loads(v) if _is_json(v) else v for v in text.split(",")]
        sweep[key] = values
    if not sweep:
        raise P.ConfigError("run-matrix: missing required --sweep")
    return sweep


def _is_json(text: str) -> bool:
    try:
        json.loads(text)
        return True
    except json.JSONDecodeError:
        return False


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args, cfg):
    out = _out(args)
    ds = P.build_dataset_for(cfg)
    _write_config(out, cfg)
    save_dataset(ds, out / "dataset.dawm")
    _log(f"wrote {ds.n_transitions} transitions to {out / 'dataset.dawm'}")


def cmd_train_dwm(args, cfg):
    out = _out(args)
    ds = _load("dataset", load_dataset, _require(args, "dataset"))
    _write_config(out, cfg)
    run = P.RunDir(out)
    try:
        wm = P.fit_world_model(cfg, ds, run)
    finally:
        run.close()
    wm.save(out / "ckpt" / "dwm.ckpt")
    _log(f"wrote {out / 'ckpt' / 'dwm.ckpt'}")


def cmd_train_idm(args, cfg):
    out = _out(args)
    ds = _load("dataset", load_dataset, _require(args, "dataset"))
    _write_config(out, cfg)
    run = P.RunDir(out)
    try:
        model = P.fit_idm(cfg, ds, run)
    finally:
        run.close()
    model.save(out / "ckpt" / "idm.ckpt")
    _log(f"wrote {out / 'ckpt' / 'idm.ckpt'}")


def cmd_synthesize(args, cfg):
    out = _out(args)
    ds = _load("dataset", load_dataset, _require(args, "dataset"))
    wm = _load("world-model", WorldModel.load, _require(args, "dwm"))
    idm = _load("IDM", IdmModel.load, _require(args, "idm"))
    buf, stats = P.synthesize_dataset(wm, idm, ds, cfg.synthesis, cfg.seed, cfg.threads)
    _write_config(out, cfg)
    P.save_buffer(buf, out / "buffer.npz")
    (out / "synthesis.json").write_text(json.dumps(dataclasses.asdict(stats), indent=2, sort_keys=True) + "\n")
    _log(f"wrote {stats.n_transitions} synthetic transitions from {stats.n_used} anchors "
         f"({stats.n_faulted} faulted)")


def cmd_train_agent(args, cfg):
    out = _out(args)
    if args.buffer and args.dataset:
        raise P.ConfigError("train-agent: give either --buffer or --dataset, not both")
    if args.buffer:
        buf = _load("buffer", P.load_buffer, args.buffer)
    elif args.dataset:
        buf = P.real_buffer(_load("dataset", load_dataset, args.dataset))
    else:
        raise P.ConfigError("train-agent: missing required --buffer (or --dataset)")
    _write_config(out, cfg)
    run = P.RunDir(out)
    timings = {}
    try:
        agent = P._train_on(cfg, buf, run, rng_stream(cfg.seed, "agent-init"), rng_stream(cfg.seed, "agent"), timings)
    finally:
        run.close()
    agent.save(out / "ckpt" / "agent.ckpt")
    _log(f"wrote {out / 'ckpt' / 'agent.ckpt'} after {agent.iteration} updates")


def cmd_eval(args, cfg):
    path = _require(args, "checkpoint")
    out = _out(args)
    agent = _load("agent checkpoint", load_agent, path)
    report = P.evaluate(P.agent_policy(agent), cfg.env, cfg.eval_episodes, cfg.seed, cfg.env_noise)
    _write_config(out, cfg)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(report.timings, indent=2, sort_keys=True) + "\n")
    _log(f"normalized return {report.normalized_return:.4f}")


def cmd_run(args, cfg):
    out = _out(args)
    res = P.run_pipeline(cfg, out)
    _log(f"normalized return {res.report.normalized_return:.4f}")


def cmd_run_matrix(args, cfg):
    out = _out(args)
    sweep = parse_sweep(args.sweep)
    try:
        seeds = [int(x) for x in args.seeds.split(",") if x]
    except ValueError:
        raise P.ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    envs = args.envs.split(",") if args.envs else None
    P.matrix_cells(cfg, sweep, seeds[:1], envs)       # validate every swept key before any work
    _write_config(out, cfg)
    results = P.run_matrix(cfg, sweep, seeds, out, envs, cache_dir=out / "cache", jobs=args.jobs,
                           on_cell=lambda c: _log(f"{c.variant} {c.env} seed {c.seed}: "
                                                  f"{c.normalized_return if c.error is None else c.error}"))
    n_fail = sum(r.error is not None for r in results)
    _log(f"wrote {out / 'table.csv'} ({len(results)} runs, {n_fail} failed)")


def method_label(cfg: dict) -> str:
    agent = cfg.get("agent", {}).get("kind", "?")
    if cfg.get("source") == "real":
        return f"{agent}-real"
    syn = cfg.get("synthesis", {})
    return f"{agent}-dawm-H{syn.get('horizon', '?')}-T{syn.get('T', '?')}"


def collect_reports(run_dirs: list[str]) -> list[tuple[str, str, float | None]]:
    """(env, method, normalized return or None) per run directory."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        cfg = {}
        if (d / "config.json").exists():
            try:
                cfg = json.loads((d / "config.json").read_text())
            except json.JSONDecodeError:
                cfg = {}
        method = method_label(cfg) if cfg else d.name
        env = cfg.get("env", "?")
        value = None
        try:
            rep = json.loads((d / "report.json").read_text())
            value = float(rep["normalized_return"])
            env = rep.get("env", env)
            if not math.isfinite(value):
                value = None
        except (FileNotFoundError, json.JSONDecodeError, KeyError, TypeError, ValueError):
            value = None
        rows.append((env, method, value))
    return rows


def write_report(rows, out: Path) -> str:
    """CSV of mean and std per (env, method), sorted; a group with any failed run is FAILED."""
    groups: dict[tuple[str, str], list] = {}
    for env, method, v in rows:
        groups.setdefault((env, method), []).append(v)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["env", "method", "n_runs", "mean", "std"])
        for (env, method) in sorted(groups):
            vals = groups[env, method]
            if any(v is None for v in vals):
                w.writerow([env, method, len(vals), "FAILED", "FAILED"])
                lines.append(f"{env:14s} {method:28s} FAILED ({sum(v is None for v in vals)} of {len(vals)} runs)")
            else:
                m, s = float(np.mean(vals)), float(np.std(vals))
                w.writerow([env, method, len(vals), repr(m), repr(s)])
                lines.append(f"{env:14s} {method:28s} {m:.3f} +/- {s:.3f} (n={len(vals)})")
    summary = "\n".join(lines) + ("\n" if lines else "")
    (out / "summary.txt").write_text(summary)
    return summary


def cmd_report(args, cfg):
    out = _out(args)
    summary = write_report(collect_reports(args.run_dirs), out)
    _log(summary.rstrip() or "no runs")


HANDLERS = {"gen-data": cmd_gen_data, "train-dwm": cmd_train_dwm, "train-idm": cmd_train_idm,
            "synthesize": cmd_synthesize, "train-agent": cmd_train_agent, "eval": cmd_eval, "run": cmd_run,
            "run-matrix": cmd_run_matrix, "report": cmd_report}

CONFIG_ERRORS = (P.ConfigError, UsageError, DatasetFormatError, CheckpointError)
RUNTIME_FAULTS = (P.SynthesisFault, SamplingFault, AgentFault, FloatingPointError, RuntimeError, ArithmeticError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve(args)
        if args.dry_run:
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        HANDLERS[args.command](args, cfg)
        return EXIT_OK
    except CONFIG_ERRORS as e:
        _log(f"dawm: config error: {e}")
        return EXIT_CONFIG
    except RUNTIME_FAULTS as e:
        _log(f"dawm: runtime fault: {type(e).__name__}: {e}")
        return EXIT_FAULT
    except (ValueError, KeyError) as e:
        _log(f"dawm: runtime fault: {type(e).__name__}: {e}")
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
