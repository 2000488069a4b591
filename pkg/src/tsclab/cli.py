"""Command-line entry point: ``tsclab {train,eval,compare,sweep,replay}``.

Exit codes: 0 success, 2 configuration error, 3 runtime check failure.
"""
from __future__ import annotations

import argparse
import json
import sys

import yaml

from . import harness, plotting
from .config import ConfigError, load_config
from .scenario import ScenarioError
from .sim.metrics import write_events

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _load(args, extra=None):
    overrides = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "episodes", None) is not None:
        overrides["train_episodes"] = args.episodes
    if getattr(args, "runs", None) is not None:
        overrides["eval_runs"] = args.runs
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    run = _load(args)
    out = harness.output_dir(args.out)

    def progress(ep, rep):
        if args.verbose:
            print(f"episode {ep}: waiting={rep.avg_waiting_s:.2f} collisions={rep.collisions}", file=sys.stderr)

    res = harness.train(run, out, progress=progress)
    plotting.training_curve(res.curve, out / f"{run.name}_curve.png", run.name)
    last = res.curve[-1] if res.curve else {}
    print(f"name,{run.name}")
    print(f"curve,{res.curve_path}")
    print(f"checkpoint,{res.checkpoint_path}")
    print(f"figure,{out / f'{run.name}_curve.png'}")
    if last:
        print(f"last_avg_waiting_s,{last['avg_waiting_s']:.4f}")
        print(f"last_collisions,{last['collisions']}")
    return EXIT_OK


def _agent_for(run, checkpoint):
    if run.variant.variant == "fixed_time":
        return None
    if checkpoint is None:
        raise harness.RuntimeCheckError(f"{run.name}: --checkpoint is required for variant {run.variant.variant}")
    blob = harness.load_checkpoint(checkpoint)
    env = harness.make_env(run)
    return harness.agent_from_checkpoint(run, blob, env)


def cmd_eval(args) -> int:
    run = _load(args)
    out = harness.output_dir(args.out)
    agent = _agent_for(run, args.checkpoint)
    res = harness.evaluate(run, agent, log_events=bool(args.events), workers=args.workers)
    csv_path, json_path = harness.write_eval(res, out)
    if args.events:
        write_events(res.events or [], args.events)
    print(f"# per-run rows: {csv_path}")
    print(f"# aggregate: {json_path}")
    print(",".join(harness.EVAL_FIELDS))
    for r in res.reports:
        print(",".join(harness._fmt(v) for v in [r.episode, r.seed] + [getattr(r, f) for f in harness.METRIC_FIELDS]))
    for k, v in sorted(res.aggregate.items()):
        print(f"{k},{harness._fmt(v)}")
    return EXIT_OK


def _parse_pairs(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError([f"--checkpoint: expected NAME=PATH, got {item!r}"])
        k, v = item.split("=", 1)
        out[k] = v
    return out


def cmd_compare(args) -> int:
    runs = [load_config(p, {"seed": args.seed} if args.seed is not None else None) for p in args.configs]
    names = [r.name for r in runs]
    if len(set(names)) != len(names):
        raise ConfigError(["compare: config names must be unique"])
    try:
        harness.check_comparable(runs)
    except ValueError as exc:
        raise ConfigError([f"compare: {exc}"]) from exc
    out = harness.output_dir(args.out)
    ckpts = _parse_pairs(args.checkpoint)
    entries = []
    for run in runs:
        if run.variant.variant == "fixed_time":
            agent = None
        elif run.name in ckpts:
            agent = _agent_for(run, ckpts[run.name])
        else:
            agent = harness.train(run, out).agent
        res = harness.evaluate(run, agent, workers=args.workers)
        harness.write_eval(res, out)
        entries.append((run.name, run.variant.variant, res))
    rows = harness.comparison_rows(entries)
    csv_path = out / "comparison.csv"
    harness.write_csv(csv_path, harness.COMPARE_SCHEMA, harness.COMPARE_FIELDS, rows)
    plotting.comparison_scatter(rows, out / "comparison.png")
    print(harness.text_table(rows, harness.COMPARE_FIELDS))
    print(f"# csv: {csv_path}")
    print(f"# figure: {out / 'comparison.png'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = _load(args)
    out = harness.output_dir(args.out)
    values = [yaml.safe_load(v) for v in args.values]
    rows = harness.sweep(run, args.param, values)
    header = ("param", "value") + harness.METRIC_FIELDS
    csv_path = out / f"{run.name}_sweep.csv"
    harness.write_csv(csv_path, harness.SWEEP_SCHEMA, header, rows)
    plotting.sweep_plot(rows, out / f"{run.name}_sweep.png")
    print(harness.text_table(rows, header))
    print(f"# csv: {csv_path}")
    return EXIT_OK


def cmd_replay(args) -> int:
    rep = harness.replay_file(args.events, args.scenario)
    print(json.dumps(rep.__dict__, sort_keys=True))
    return EXIT_OK if rep.ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsclab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, runs=False):
        sp.add_argument("--config", required=True, help="run config (YAML)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help=f"output directory (default ${harness.OUTPUT_ENV} or ./runs)")
        if runs:
            sp.add_argument("--runs", type=int, help="number of evaluation runs")
            sp.add_argument("--workers", type=int, default=None, help="parallel evaluation threads")

    t = sub.add_parser("train", help="train a variant and write curve + checkpoint")
    common(t)
    t.add_argument("--episodes", type=int, help="override training episodes")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy multi-seed evaluation of a checkpoint")
    common(e, runs=True)
    e.add_argument("--checkpoint", help="checkpoint JSON from `train`")
    e.add_argument("--events", help="write run 0's event log (JSON lines) here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="evaluate several configs on shared seeds")
    c.add_argument("configs", nargs="+")
    c.add_argument("--checkpoint", action="append", help="NAME=PATH; configs without one are trained")
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.add_argument("--workers", type=int, default=None)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="train+evaluate over a grid of one config value")
    common(s)
    s.add_argument("--param", required=True, help="dotted config path, e.g. variant.w2")
    s.add_argument("--values", nargs="+", required=True)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("replay", help="re-simulate an event log through the collision oracle")
    r.add_argument("--events", required=True)
    r.add_argument("--scenario", required=True, help="built-in scenario name or file")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (harness.RuntimeCheckError, AssertionError) as exc:
        print(f"runtime check failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
