"""Episode summaries and event-log serialisation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields


@dataclass
class EpisodeReport:
    avg_waiting_s: float
    throughput: int
    mean_stopped: float
    collisions: int
    intervention_rate: float = 0.0
    episode: int = 0
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"EpisodeReport.{f.name} is not finite")
        if self.collisions < 0:
            raise ValueError("negative collision count")

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_FIELDS = ("avg_waiting_s", "throughput", "mean_stopped", "collisions", "intervention_rate")


def snapshot_metrics(ledger, horizon_s: float, intervention_rate: float = 0.0,
                     episode: int = 0, seed: int = 0) -> EpisodeReport:
    if horizon_s <= 0:
        raise ValueError("horizon_s must be positive")
    return EpisodeReport(
        avg_waiting_s=ledger.cumulative_waiting_s / max(1, ledger.spawned),
        throughput=int(ledger.throughput),
        mean_stopped=ledger.stopped_sum / max(1, ledger.ticks),
        collisions=int(ledger.collisions),
        intervention_rate=float(intervention_rate),
        episode=episode,
        seed=seed,
    )


def write_events(events, path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")


def read_events(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def audit_events(events) -> dict:
    """Totals recomputed from an event log alone."""
    spawned = sum(1 for e in events if e["type"] == "spawn")
    exits = [e for e in events if e["type"] == "exit"]
    crashes = [e for e in events if e["type"] == "collision"]
    present = [e for e in events if e["type"] == "present"]
    waiting = (sum(e["waiting_s"] for e in exits) + sum(e["waiting_s"] for e in present)
               + sum(e["waiting_a"] + e["waiting_b"] for e in crashes))
    return {"spawned": spawned, "throughput": len(exits), "collisions": len(crashes),
            "present": len(present), "avg_waiting_s": waiting / max(1, spawned)}
