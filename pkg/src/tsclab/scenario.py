"""Scenario files: geometry, demand, vehicle model and signal phases."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .signals import Phase, SignalTiming, validate_phases
from .sim.demand import DemandProfile
from .sim.engine import Simulation, VehicleParams
from .sim.geometry import Conflict, IntersectionGeometry, Lane, Movement, derive_layout

BUILTIN = ("synthetic-4x12", "cologne-like-8lane")


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    geometry: IntersectionGeometry
    demand: DemandProfile
    phases: list[Phase]
    timing: SignalTiming
    params: VehicleParams = field(default_factory=VehicleParams)
    dt: float = 1.0
    gap_accept_s: float = 4.0
    speed_window_s: float = 300.0
    source: str = ""

    @property
    def left_movements(self) -> list[str]:
        return sorted(m for m, mv in self.geometry.movements.items() if mv.kind == "left")

    @property
    def permitted_lefts(self) -> list[str]:
        out = set()
        for ph in self.phases:
            out |= ph.permitted
        return sorted(out)

    def make_sim(self, seed: int, ignore_foe_prob: float | None = None, demand_scale: float = 1.0,
                 log_events: bool = False) -> Simulation:
        demand = self.demand
        if demand_scale != 1.0:
            demand = demand.scaled(demand_scale)
        if ignore_foe_prob is not None:
            demand = demand.with_ignore_prob(ignore_foe_prob)
        return Simulation(self.geometry, demand, self.params, self.dt, seed, self.gap_accept_s,
                          log_events, self.speed_window_s)


def _need(blob, key, where):
    if key not in blob:
        raise ScenarioError(f"{where}: missing field '{key}'")
    return blob[key]


def scenario_from_dict(blob: dict, source: str = "") -> Scenario:
    name = _need(blob, "name", "scenario")
    lane_rows = _need(blob, "lanes", name)
    mv_rows = _need(blob, "movements", name)
    approaches = tuple(blob.get("approaches", ("N", "E", "S", "W")))
    lanes, served = [], {}
    seen = {a: 0 for a in approaches}
    for i, row in enumerate(lane_rows):
        app = _need(row, "approach", f"lanes[{i}]")
        if app not in seen:
            raise ScenarioError(f"lanes[{i}]: unknown approach {app!r}")
        mids = tuple(_need(row, "movements", f"lanes[{i}]"))
        lanes.append(Lane(i, app, seen[app], mids))
        seen[app] += 1
        for m in mids:
            served.setdefault(m, []).append(i)
    movements = {}
    for mid, row in mv_rows.items():
        if mid not in served:
            raise ScenarioError(f"movement {mid} is not served by any lane")
        movements[mid] = Movement(mid, _need(row, "approach", mid), _need(row, "kind", mid),
                                  tuple(served[mid]), float(_need(row, "path_length_m", mid)))
    for k, entry in enumerate(blob.get("conflicts", [])):
        a, b, oa, ob = entry
        if a not in movements or b not in movements:
            raise ScenarioError(f"conflicts[{k}] references an unknown movement")
        movements[a].conflicts[b] = Conflict(b, float(oa), float(ob))
        movements[b].conflicts[a] = Conflict(a, float(ob), float(oa))
    try:
        geometry = IntersectionGeometry(
            name=name, approaches=approaches, lanes=lanes, movements=movements,
            approach_length_m=float(blob.get("approach_length_m", 300.0)),
            cell_size_m=float(blob.get("cell_size_m", 7.5)),
            speed_limit_mps=float(_need(blob, "speed_limit_mps", name)),
            sensing_range_m=float(blob.get("sensing_range_m", 150.0)),
            lane_width_m=float(blob.get("lane_width_m", 3.2)),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc

    dem = _need(blob, "demand", name)
    rates = {m: [tuple(p) for p in pieces] for m, pieces in dem.get("rates", {}).items()}
    for m in rates:
        if m not in movements:
            raise ScenarioError(f"demand for unknown movement {m}")
    demand = DemandProfile(rates, float(dem.get("ignore_foe_prob", 0.0)), int(dem.get("seed", 0)))

    sig = _need(blob, "signal", name)
    timing = SignalTiming(float(sig.get("yellow_s", 3.0)), float(sig.get("all_red_s", 2.0)),
                          float(sig.get("delta_s", 5.0)), float(sig.get("acyclic_dt_s", 10.0)))
    phases = []
    for row in _need(sig, "phases", "signal"):
        phases.append(Phase(row["id"], frozenset(row["protected"]), frozenset(row.get("permitted", ())),
                            float(row.get("min_s", 10.0)), float(row.get("max_s", 60.0)),
                            float(row.get("initial_s", 30.0))))
    try:
        validate_phases(phases, geometry)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    params = VehicleParams(**blob.get("vehicle", {}))
    return Scenario(name, geometry, demand, phases, timing, params, float(blob.get("dt", 1.0)),
                    float(blob.get("gap_accept_s", 4.0)), float(blob.get("speed_window_s", 300.0)),
                    source)


def load_scenario(ref: str | Path) -> Scenario:
    """Load a scenario by built-in name or by file path."""
    ref = str(ref)
    if ref in BUILTIN:
        text = resources.files("tsclab.scenarios").joinpath(f"{ref}.yaml").read_text()
        source = f"builtin:{ref}"
    else:
        path = Path(ref)
        if not path.exists():
            raise ScenarioError(f"scenario file not found: {ref}")
        text = path.read_text()
        source = str(path)
    return scenario_from_dict(yaml.safe_load(text), source)


def layout_conflicts(scenario: Scenario, right_turn_conflicts: bool = False):
    """Re-derive path lengths and conflict offsets from the lane layout
    (for symmetric scenarios with equal lanes per approach)."""
    geo = scenario.geometry
    per = set(geo.lanes_per_approach.values())
    if len(per) != 1:
        raise ScenarioError("layout derivation needs equal lanes per approach")
    table = {a: [list(l.movements) for l in geo.lanes if l.approach == a] for a in geo.approaches}
    kinds = {m: mv.kind for m, mv in geo.movements.items()}
    return derive_layout(table, kinds, per.pop(), geo.lane_width_m, right_turn_conflicts)
