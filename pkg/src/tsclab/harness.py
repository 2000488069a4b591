"""Experiment orchestration: training, evaluation, comparison, sweeps, replay."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict, merge
from .env import SignalEnv
from .scenario import load_scenario
from .sim.engine import Simulation
from .sim.metrics import METRIC_FIELDS, EpisodeReport, read_events, snapshot_metrics, write_events
from .sim.oracle import brute_force_pairs, records_from_sim
from .variants import Controller, make_agent

CHECKPOINT_FORMAT = "tsclab-checkpoint/1"
CURVE_SCHEMA = "tsclab-curve/1"
EVAL_SCHEMA = "tsclab-eval/1"
COMPARE_SCHEMA = "tsclab-compare/1"
SWEEP_SCHEMA = "tsclab-sweep/1"
OUTPUT_ENV = "TSCLAB_OUTPUT_DIR"

CURVE_FIELDS = ("episode", "seed", "avg_waiting_s", "throughput", "mean_stopped", "collisions",
                "cumulative_reward", "epsilon", "intervention_rate", "loss_mean")


class RuntimeCheckError(RuntimeError):
    """A runtime consistency check failed (exit code 3 at the CLI)."""


def output_dir(explicit=None) -> Path:
    path = Path(explicit or os.environ.get(OUTPUT_ENV) or "runs")
    path.mkdir(parents=True, exist_ok=True)
    return path


def train_seed(master: int, episode: int) -> int:
    return int(np.random.SeedSequence([master, 1, episode]).generate_state(1)[0])


def eval_seed(master: int, run_index: int) -> int:
    return master + run_index


def make_env(run: RunConfig, scenario=None, log_events: bool = False) -> SignalEnv:
    scen = scenario or load_scenario(run.scenario)
    return SignalEnv(scen, run.action_mode, run.encoder, run.episode_s, run.left_modes,
                     run.ignore_foe_prob, run.demand_scale, log_events)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10)) if math.isfinite(v) else ""
    return str(v)


def write_csv(path, schema: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])


def read_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(io.StringIO("".join(lines))))


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    run: RunConfig
    agent: object
    curve: list = field(default_factory=list)
    kl_checks: list = field(default_factory=list)
    checkpoint_path: Path | None = None
    curve_path: Path | None = None


def train(run: RunConfig, out: Path | None = None, scenario=None, progress=None) -> TrainResult:
    env = make_env(run, scenario)
    if run.variant.variant == "fixed_time":
        res = TrainResult(run, None)
        ctl = Controller(run, env)
        for i in range(run.eval_runs):
            seed = eval_seed(run.seed, i)
            log = ctl.run_episode(seed, learn=False, greedy=True)
            rep = snapshot_metrics(env.sim.ledger, run.episode_s, 0.0, i, seed)
            res.curve.append(_curve_row(rep, log, float("nan")))
    else:
        agent = make_agent(run, env.state_len, len(env.actions), run.seed)
        ctl = Controller(run, env, agent)
        res = TrainResult(run, agent)
        for ep in range(run.train_episodes):
            seed = train_seed(run.seed, ep)
            eps = agent.epsilon()
            log = ctl.run_episode(seed, learn=True, greedy=False)
            rate = log.intervened / max(1, log.decisions)
            rep = snapshot_metrics(env.sim.ledger, run.episode_s, rate, ep, seed)
            res.curve.append(_curve_row(rep, log, eps))
            res.kl_checks.extend(log.kl_checks)
            if progress:
                progress(ep, rep)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        res.curve_path = out / f"{run.name}_curve.csv"
        write_csv(res.curve_path, CURVE_SCHEMA, CURVE_FIELDS, res.curve)
        res.checkpoint_path = out / f"{run.name}_checkpoint.json"
        save_checkpoint(res.checkpoint_path, run, res.agent)
    return res


def _curve_row(rep: EpisodeReport, log, eps: float) -> dict:
    return {"episode": rep.episode, "seed": rep.seed, "avg_waiting_s": rep.avg_waiting_s,
            "throughput": rep.throughput, "mean_stopped": rep.mean_stopped,
            "collisions": rep.collisions, "cumulative_reward": log.reward, "epsilon": eps,
            "intervention_rate": rep.intervention_rate,
            "loss_mean": float(np.mean(log.losses)) if log.losses else float("nan")}


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, run: RunConfig, agent) -> None:
    blob = {"format": CHECKPOINT_FORMAT, "config": run.to_dict(),
            "agent": agent.state_dict() if agent is not None else None}
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path) -> dict:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise RuntimeCheckError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return blob


def agent_from_checkpoint(run: RunConfig, blob: dict, env: SignalEnv):
    if run.variant.variant == "fixed_time":
        return None
    agent = make_agent(run, env.state_len, len(env.actions), run.seed)
    if blob is None or blob.get("agent") is None:
        raise RuntimeCheckError("checkpoint holds no trained agent")
    try:
        agent.load_state_dict(blob["agent"])
    except (ValueError, KeyError) as exc:
        raise RuntimeCheckError(f"checkpoint does not fit this config: {exc}") from exc
    return agent


# -- evaluation -------------------------------------------------------------------

@dataclass
class EvalResult:
    name: str
    reports: list
    aggregate: dict
    violations: int = 0
    collision_categories: list = field(default_factory=list)
    events: list | None = None


def aggregate(reports) -> dict:
    out = {}
    for f in METRIC_FIELDS:
        vals = np.array([getattr(r, f) for r in reports], dtype=np.float64)
        out[f"{f}_mean"] = float(vals.mean())
        out[f"{f}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    out["n_runs"] = len(reports)
    return out


def _eval_one(run, agent_blob, scenario, i, log_events):
    env = make_env(run, scenario, log_events=log_events)
    agent = None
    if run.variant.variant != "fixed_time":
        agent = make_agent(run, env.state_len, len(env.actions), run.seed)
        agent.load_state_dict(copy.deepcopy(agent_blob))
    ctl = Controller(run, env, agent)
    seed = eval_seed(run.seed, i)
    log = ctl.run_episode(seed, learn=False, greedy=True)
    rate = log.intervened / max(1, log.decisions)
    rep = snapshot_metrics(env.sim.ledger, run.episode_s, rate, i, seed)
    cats = [e.category for e in env.collisions]
    return rep, log.violations, cats, env.sim.events


def evaluate(run: RunConfig, agent=None, n_runs: int | None = None, scenario=None,
             log_events: bool = False, workers: int | None = None) -> EvalResult:
    """Greedy evaluation on seeds master+0..n-1.  The agent is copied per run, never mutated."""
    n = n_runs or run.eval_runs
    scenario = scenario or load_scenario(run.scenario)
    blob = agent.state_dict() if agent is not None else None
    if run.variant.variant != "fixed_time" and blob is None:
        raise RuntimeCheckError("evaluation needs a trained agent or checkpoint")
    workers = workers or run.workers
    jobs = [(run, blob, scenario, i, log_events and i == 0) for i in range(n)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda j: _eval_one(*j), jobs))
    else:
        results = [_eval_one(*j) for j in jobs]
    reports = [r[0] for r in results]
    return EvalResult(run.name, reports, aggregate(reports), sum(r[1] for r in results),
                      [c for r in results for c in r[2]], results[0][3])


EVAL_FIELDS = ("run", "seed") + METRIC_FIELDS


def write_eval(res: EvalResult, out: Path) -> tuple[Path, Path]:
    rows = [{"run": r.episode, "seed": r.seed, **{f: getattr(r, f) for f in METRIC_FIELDS}}
            for r in res.reports]
    csv_path = out / f"{res.name}_eval.csv"
    write_csv(csv_path, EVAL_SCHEMA, EVAL_FIELDS, rows)
    json_path = out / f"{res.name}_eval.json"
    json_path.write_text(json.dumps({"schema": EVAL_SCHEMA, "name": res.name, "aggregate": res.aggregate,
                                     "act_violations": res.violations,
                                     "collision_categories": sorted(set(res.collision_categories))},
                                    indent=2, sort_keys=True))
    return csv_path, json_path


# -- comparison -------------------------------------------------------------------

COMPARE_FIELDS = ("method", "variant", "avg_waiting_s", "throughput", "mean_stopped", "collisions",
                  "intervention_rate", "collision_reduction_vs_backbone_pct",
                  "waiting_change_vs_backbone_pct", "collision_reduction_vs_fixed_pct",
                  "waiting_change_vs_fixed_pct")


def pct_reduction(base: float, x: float) -> float:
    return 100.0 * (base - x) / base if base != 0 else (0.0 if x == 0 else float("-inf"))


def pct_change(base: float, x: float) -> float:
    return 100.0 * (x - base) / base if base != 0 else (0.0 if x == 0 else float("inf"))


def comparison_rows(entries) -> list[dict]:
    """``entries``: list of (name, variant, EvalResult) sharing eval seeds."""
    means = {name: res.aggregate for name, _, res in entries}
    by_variant = {variant: name for name, variant, _ in entries}
    base = means.get(by_variant.get("backbone"))
    fixed = means.get(by_variant.get("fixed_time"))
    rows = []
    for name, variant, res in entries:
        a = res.aggregate
        row = {"method": name, "variant": variant,
               **{f: a[f"{f}_mean"] for f in METRIC_FIELDS}}
        for tag, ref in (("backbone", base), ("fixed", fixed)):
            row[f"collision_reduction_vs_{tag}_pct"] = (
                pct_reduction(ref["collisions_mean"], a["collisions_mean"]) if ref else float("nan"))
            row[f"waiting_change_vs_{tag}_pct"] = (
                pct_change(ref["avg_waiting_s_mean"], a["avg_waiting_s_mean"]) if ref else float("nan"))
        rows.append(row)
    return rows


def check_comparable(runs) -> None:
    keys = {(r.scenario, r.seed, r.eval_runs, r.episode_s, r.ignore_foe_prob, r.demand_scale) for r in runs}
    if len(keys) > 1:
        raise ValueError("compare needs configs with the same scenario, seed, eval runs and demand")


def text_table(rows, header) -> str:
    cells = [[str(h) for h in header]]
    for r in rows:
        cells.append([f"{r[h]:.2f}" if isinstance(r[h], float) else str(r[h]) for h in header])
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    return "\n".join("  ".join(c[i].rjust(widths[i]) for i in range(len(header))) for c in cells)


# -- sweeps ----------------------------------------------------------------------

def set_path(blob: dict, dotted: str, value) -> dict:
    out = copy.deepcopy(blob)
    node = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def sweep(run: RunConfig, param: str, values, scenario=None, progress=None) -> list[dict]:
    base = run.to_dict()
    rows = []
    for v in values:
        cfg = config_from_dict(set_path(base, param, v))
        cfg.name = f"{run.name}_{param.replace('.', '-')}_{v}"
        tr = train(cfg, scenario=scenario)
        ev = evaluate(cfg, tr.agent, scenario=scenario)
        row = {"param": param, "value": v, **{f: ev.aggregate[f"{f}_mean"] for f in METRIC_FIELDS}}
        rows.append(row)
        if progress:
            progress(row)
    return rows


# -- replay ---------------------------------------------------------------------

@dataclass
class ReplayReport:
    ticks: int
    collisions_logged: int
    collisions_replayed: int
    oracle_mismatches: int
    ok: bool


def replay(events, scenario, horizon_s: float | None = None) -> ReplayReport:
    """Re-run a logged episode from its spawns and signal changes, checking every
    tick's collision detection against the brute-force oracle."""
    geo = scenario.geometry
    arrivals: dict[float, list] = {}
    signals: dict[float, list] = {}
    phases: dict[float, int] = {}
    logged = []
    for e in events:
        t = round(e["t"], 6)
        if e["type"] == "spawn":
            arrivals.setdefault(t, []).append((e["movement"], e["ignores_foes"], e["vid"]))
        elif e["type"] == "signal":
            signals.setdefault(t, []).append((e["movement"], e["indication"]))
        elif e["type"] == "phase":
            phases[t] = e["seq"]
        elif e["type"] == "collision":
            logged.append((t, e["vid_a"], e["vid_b"]))
    end = horizon_s if horizon_s is not None else max((round(e["t"], 6) for e in events), default=0.0)
    sim = Simulation(geo, scenario.demand, scenario.params, scenario.dt, 0, scenario.gap_accept_s,
                     False, scenario.speed_window_s)
    sim.forced_arrivals = arrivals
    mismatches = []

    def audit(s, hits):
        engine = sorted((a.id, b.id) for a, b, _, _ in hits)
        oracle = brute_force_pairs(records_from_sim(s), geo, s.half_zone)
        if engine != oracle:
            mismatches.append((s.time, engine, oracle))

    sim.collision_audit = audit
    ind = {m: "red" for m in sim.movement_ids}
    seq = 0
    replayed = []
    ticks = 0
    while sim.time < end - 1e-9:
        t = round(sim.time, 6)
        for m, new in signals.get(t, ()):
            ind[m] = new
        seq = phases.get(t, seq)
        sim.set_signal(dict(ind), seq)
        for ev in sim.step():
            replayed.append((round(ev.time_s, 6), ev.vehicle_a, ev.vehicle_b))
        ticks += 1
    ok = not mismatches and sorted(replayed) == sorted(logged)
    return ReplayReport(ticks, len(logged), len(replayed), len(mismatches), ok)


def replay_file(path, scenario_ref) -> ReplayReport:
    return replay(read_events(path), load_scenario(scenario_ref))
