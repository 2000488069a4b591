"""Discrete-time microsimulation of a single signalized junction.

Coordinates: every vehicle has a scalar ``pos`` (front bumper, metres from
the upstream end of its approach).  The stop line sits at
``geometry.approach_length_m``; past it the vehicle follows its movement's
path, so ``pos - stop`` is the distance travelled inside the junction.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .demand import DemandProfile, draw_arrivals
from .geometry import IntersectionGeometry

STOP_SPEED = 0.1
CONFLICT_MARGIN = 0.5
# indication codes
RED, YELLOW, PROTECTED, PERMITTED = "red", "yellow", "protected_green", "permitted_green"
GREENS = (PROTECTED, PERMITTED)


@dataclass
class VehicleParams:
    length_m: float = 5.0
    accel_mps2: float = 2.6
    decel_mps2: float = 4.5
    min_gap_m: float = 2.5
    tau_s: float = 1.0
    sigma: float = 0.0  # dawdling; 0 keeps the model deterministic


class Vehicle:
    __slots__ = (
        "id", "movement", "lane", "pos", "prev_pos", "speed", "vmax", "accel", "decel",
        "length", "waiting_s", "entered_at_s", "ignores_foes", "entered", "entry_t",
        "entry_indication", "entry_phase", "committed",
    )

    def __init__(self, vid, movement, lane, pos, speed, vmax, params: VehicleParams,
                 t, ignores_foes):
        self.id = vid
        self.movement = movement
        self.lane = lane
        self.pos = pos
        self.prev_pos = pos
        self.speed = speed
        self.vmax = vmax
        self.accel = params.accel_mps2
        self.decel = params.decel_mps2
        self.length = params.length_m
        self.waiting_s = 0.0
        self.entered_at_s = t
        self.ignores_foes = ignores_foes
        self.entered = False
        self.entry_t = None
        self.entry_indication = None
        self.entry_phase = None
        self.committed = False

    def __repr__(self):
        return (f"Vehicle({self.id}, {self.movement}, pos={self.pos:.2f}, "
                f"v={self.speed:.2f}, entered={self.entered})")


@dataclass
class CollisionEvent:
    time_s: float
    vehicle_a: int
    vehicle_b: int
    movement_a: str
    movement_b: str
    conflict_point: tuple[float, float]
    entry_a: str | None = None
    entry_b: str | None = None
    phase_a: int | None = None
    phase_b: int | None = None

    @property
    def category(self) -> str:
        """``yellow`` if either car entered on yellow, ``permitted`` if either
        entered on a permitted green during the same green, else ``green``."""
        entries = (self.entry_a, self.entry_b)
        if YELLOW in entries:
            return "yellow"
        if PERMITTED in entries and self.phase_a == self.phase_b:
            return "permitted"
        return "green"


@dataclass
class MetricsLedger:
    cumulative_waiting_s: float = 0.0
    throughput: int = 0
    collisions: int = 0
    collided_vehicles: int = 0
    spawned: int = 0
    blocked_arrivals: int = 0
    stopped_now: int = 0
    stopped_sum: float = 0.0
    ticks: int = 0


def time_to_reach(distance, speed, vmax, accel, dt, horizon=30.0):
    """Seconds for a vehicle accelerating freely (same update rule as the
    simulator) to cover ``distance``; ``inf`` beyond ``horizon``."""
    if distance <= 0.0:
        return 0.0
    t = 0.0
    v = speed
    while t < horizon:
        v = min(v + accel * dt, vmax)
        step = v * dt
        if step >= distance:
            return t + dt * distance / step
        distance -= step
        t += dt
    return math.inf


def occupancy_window(c0, c1, offset, half, dt):
    """Sub-tick time interval during which a centre moving linearly from c0
    to c1 lies within ``offset ± half``; ``None`` if it never does."""
    lo, hi = offset - half, offset + half
    if c1 == c0:
        return (0.0, dt) if lo <= c0 <= hi else None
    t_a = (lo - c0) / (c1 - c0) * dt
    t_b = (hi - c0) / (c1 - c0) * dt
    start, end = max(0.0, min(t_a, t_b)), min(dt, max(t_a, t_b))
    if start > end:
        return None
    return start, end


class Simulation:
    def __init__(self, geometry: IntersectionGeometry, demand: DemandProfile,
                 params: VehicleParams | None = None, dt: float = 1.0, seed: int = 0,
                 gap_accept_s: float = 4.0, log_events: bool = False,
                 speed_window_s: float = 300.0):
        if dt not in (0.5, 1.0):
            raise ValueError("dt must be 0.5 or 1.0 seconds")
        self.geometry = geometry
        self.demand = demand
        self.params = params or VehicleParams()
        self.dt = dt
        self.gap_accept_s = gap_accept_s
        self.stop = geometry.approach_length_m
        self.rng = np.random.default_rng(seed)
        self.dawdle_rng = np.random.default_rng([seed, 7])
        self.movement_ids = list(geometry.movement_ids)
        self.path_len = {m: mv.path_length_m for m, mv in geometry.movements.items()}
        self.conflicts = {m: mv.conflicts for m, mv in geometry.movements.items()}
        self.half_zone = self.params.length_m / 2 + CONFLICT_MARGIN
        self.lanes: list[list[Vehicle]] = [[] for _ in geometry.lanes]
        self.inside: dict[str, list[Vehicle]] = {m: [] for m in self.movement_ids}
        self.time = 0.0
        self.next_id = 0
        self.ledger = MetricsLedger()
        self.indications: dict[str, str] = {m: RED for m in self.movement_ids}
        self.yielding: set[str] = set()
        self._last_green: dict[str, str] = {}
        self.phase_seq = 0
        self.speed_samples: dict[str, deque] = {m: deque() for m in self.movement_ids}
        self.speed_window_s = speed_window_s
        self.events: list[dict] | None = [] if log_events else None
        self.forced_arrivals: dict[float, list] | None = None
        self.collision_audit = None  # optional callable(sim, hits) run before collisions resolve

    # -- queries ----------------------------------------------------------
    def vehicles(self):
        for lane in self.lanes:
            yield from lane

    def n_present(self) -> int:
        return sum(len(lane) for lane in self.lanes)

    def lane_of(self, movement: str) -> list[int]:
        return list(self.geometry.movements[movement].lanes)

    def recent_speeds(self, movement: str) -> list[float]:
        return [v for _, v in self.speed_samples[movement]]

    # -- signal -----------------------------------------------------------
    def set_signal(self, indications: dict[str, str], phase_seq: int = 0) -> None:
        """Install this tick's indications; marks yellow-committed vehicles."""
        b = self.params.decel_mps2
        for m, new in indications.items():
            old = self.indications.get(m, RED)
            if new in GREENS:
                self._last_green[m] = new
            if new == YELLOW and old in GREENS:
                for lane_idx in self.geometry.movements[m].lanes:
                    for v in self.lanes[lane_idx]:
                        if v.movement == m and not v.entered and v.speed > STOP_SPEED:
                            if self.stop - v.pos <= v.speed * v.speed / (2 * b):
                                v.committed = True
            elif new != old and old == YELLOW:
                for lane_idx in self.geometry.movements[m].lanes:
                    for v in self.lanes[lane_idx]:
                        v.committed = False
            if new != old and self.events is not None:
                self.events.append({"t": self.time, "type": "signal", "movement": m,
                                    "indication": new, "seq": phase_seq})
        if phase_seq != self.phase_seq and self.events is not None:
            self.events.append({"t": self.time, "type": "phase", "seq": phase_seq})
        self.indications = dict(indications)
        self.yielding = {m for m, ind in indications.items()
                         if ind == PERMITTED or (ind == YELLOW and self._last_green.get(m) == PERMITTED)}
        self.phase_seq = phase_seq

    # -- spawning -----------------------------------------------------------
    def spawn(self) -> list[Vehicle]:
        if self.forced_arrivals is not None:
            arrivals = self.forced_arrivals.get(round(self.time, 6), [])
        else:
            arrivals = draw_arrivals(self.demand, self.movement_ids, self.time, self.dt, self.rng)
        used = set()
        new = []
        p = self.params
        vmax = self.geometry.speed_limit_mps
        for arrival in arrivals:
            mid, ignore = arrival[0], arrival[1]
            lanes = self.geometry.movements[mid].lanes
            lane_idx = max(lanes, key=lambda i: (self._entry_space(i), -i))
            if lane_idx in used:
                continue
            space = self._entry_space(lane_idx)
            if space < p.length_m + 2.0:
                self.ledger.blocked_arrivals += 1
                continue
            used.add(lane_idx)
            speed = vmax
            lane = self.lanes[lane_idx]
            if lane:
                lead = lane[-1]
                gap = lead.pos - lead.length - p.min_gap_m
                speed = min(vmax, self._v_safe(lead.speed, max(gap, 0.0)))
            vid = arrival[2] if len(arrival) > 2 else self.next_id
            self.next_id = max(self.next_id, vid + 1)
            veh = Vehicle(vid, mid, lane_idx, 0.0, speed, vmax, p, self.time, ignore)
            lane.append(veh)
            new.append(veh)
            self.ledger.spawned += 1
            if self.events is not None:
                self.events.append({"t": self.time, "type": "spawn", "vid": vid, "movement": mid,
                                    "lane": lane_idx, "ignores_foes": ignore})
        return new

    def _entry_space(self, lane_idx: int) -> float:
        lane = self.lanes[lane_idx]
        if not lane:
            return math.inf
        last = lane[-1]
        return last.pos - last.length

    # -- car following -----------------------------------------------------
    def _v_safe(self, v_lead, gap):
        bt = self.params.decel_mps2 * self.params.tau_s
        return -bt + math.sqrt(bt * bt + v_lead * v_lead + 2.0 * self.params.decel_mps2 * gap)

    def _eta(self, veh: Vehicle, offset: float) -> float:
        """Time until ``veh``'s centre reaches the conflict zone at ``offset``
        (inf once it has cleared it)."""
        centre = veh.pos - veh.length / 2 - self.stop
        if centre > offset + self.half_zone:
            return math.inf
        d = offset - self.half_zone - centre
        return time_to_reach(d, veh.speed, veh.vmax, veh.accel, self.dt)

    def junction_blocked(self, veh: Vehicle) -> bool:
        """A conflicting vehicle is inside the junction and has not yet
        cleared the shared conflict zone."""
        for foe_mid, c in self.conflicts[veh.movement].items():
            for foe in self.inside[foe_mid]:
                centre = foe.pos - foe.length / 2 - self.stop
                if centre <= c.foe_offset_m + self.half_zone:
                    return True
        return False

    def min_foe_eta(self, movement: str, foes=None, hypothetical_green: bool = False) -> float:
        """Smallest time for an approaching priority foe to reach its conflict
        zone with ``movement``."""
        best = math.inf
        horizon_d = self.geometry.speed_limit_mps * (self.gap_accept_s + 4.0) + 20.0
        for foe_mid, c in self.conflicts[movement].items():
            if foes is not None and foe_mid not in foes:
                continue
            if not hypothetical_green:
                ind = self.indications.get(foe_mid, RED)
                if ind == RED or foe_mid in self.yielding:
                    continue
            for foe in self.inside[foe_mid]:
                best = min(best, self._eta(foe, c.foe_offset_m))
            for lane_idx in self.geometry.movements[foe_mid].lanes:
                for foe in self.lanes[lane_idx]:
                    if foe.entered or foe.movement != foe_mid:
                        continue
                    if self.stop - foe.pos > horizon_d:
                        break
                    if not hypothetical_green and self.indications[foe_mid] == YELLOW and not foe.committed:
                        continue
                    best = min(best, self._eta(foe, c.foe_offset_m))
        return best

    def may_enter(self, veh: Vehicle) -> bool:
        ind = self.indications.get(veh.movement, RED)
        if ind == RED:
            return False
        if ind == YELLOW and not veh.committed:
            return False
        if veh.ignores_foes:
            return True
        if self.junction_blocked(veh):
            return False
        if veh.movement in self.yielding:
            return self.min_foe_eta(veh.movement) >= self.gap_accept_s
        return True

    # -- main update --------------------------------------------------------
    def step(self) -> list[CollisionEvent]:
        """Advance one tick under the currently installed indications."""
        dt = self.dt
        p = self.params
        stop = self.stop
        self.spawn()
        entered_now = []
        sigma = p.sigma
        for lane in self.lanes:
            for i, veh in enumerate(lane):
                leader = None
                for j in range(i - 1, -1, -1):
                    cand = lane[j]
                    if (not cand.entered or cand.movement == veh.movement
                            or cand.pos - cand.length < stop + p.min_gap_m):
                        leader = cand
                        break
                v = veh.speed + veh.accel * dt
                if v > veh.vmax:
                    v = veh.vmax
                if leader is not None:
                    gap = leader.pos - leader.length - p.min_gap_m - veh.pos
                    vs = self._v_safe(leader.speed, gap) if gap > 0 else 0.0
                    if vs < v:
                        v = vs
                if sigma > 0.0:
                    v = max(0.0, v - sigma * veh.accel * dt * self.dawdle_rng.random())
                if not veh.entered and veh.pos + v * dt > stop and not self.may_enter(veh):
                    vs = self._v_safe(0.0, stop - veh.pos)
                    if vs < v:
                        v = vs
                if v < 0.0:
                    v = 0.0
                new_pos = veh.pos + v * dt
                if leader is not None and new_pos > leader.pos - leader.length:
                    new_pos = max(veh.pos, leader.pos - leader.length)
                    v = (new_pos - veh.pos) / dt
                veh.prev_pos = veh.pos
                veh.pos = new_pos
                veh.speed = v
                if not veh.entered and new_pos > stop:
                    veh.entered = True
                    veh.entry_t = self.time
                    veh.entry_indication = self.indications.get(veh.movement, RED)
                    veh.entry_phase = self.phase_seq
                    self.inside[veh.movement].append(veh)
                    entered_now.append(veh)
        for veh in entered_now:
            samples = self.speed_samples[veh.movement]
            samples.append((self.time, veh.speed))
            while samples and samples[0][0] < self.time - self.speed_window_s:
                samples.popleft()

        hits = self.detect_collisions()
        if self.collision_audit is not None:
            self.collision_audit(self, hits)
        events = self._resolve_collisions(hits)
        self._remove_exited()
        stopped = 0
        for lane in self.lanes:
            for veh in lane:
                if veh.speed < STOP_SPEED:
                    veh.waiting_s += dt
                    stopped += 1
        led = self.ledger
        led.cumulative_waiting_s += stopped * dt
        led.stopped_now = stopped
        led.stopped_sum += stopped
        led.ticks += 1
        self.time = round(self.time + dt, 9)
        return events

    def detect_collisions(self) -> list[tuple[Vehicle, Vehicle, float, float]]:
        """All conflicting vehicle pairs whose zone occupancy overlapped
        during the last tick, ordered by vehicle ids."""
        hits = []
        half = self.half_zone
        dt = self.dt
        stop = self.stop
        for a_mid, b_mid in self.geometry.conflict_pairs():
            va, vb = self.inside[a_mid], self.inside[b_mid]
            if not va or not vb:
                continue
            c = self.conflicts[a_mid][b_mid]
            wa = []
            for veh in va:
                off = veh.length / 2 + stop
                w = occupancy_window(veh.prev_pos - off, veh.pos - off, c.own_offset_m, half, dt)
                if w is not None:
                    wa.append((veh, w))
            if not wa:
                continue
            for vb_veh in vb:
                off = vb_veh.length / 2 + stop
                wb = occupancy_window(vb_veh.prev_pos - off, vb_veh.pos - off, c.foe_offset_m, half, dt)
                if wb is None:
                    continue
                for veh, w in wa:
                    if max(w[0], wb[0]) <= min(w[1], wb[1]):
                        pair = (veh, vb_veh) if veh.id < vb_veh.id else (vb_veh, veh)
                        offs = (c.own_offset_m, c.foe_offset_m) if pair[0] is veh else (c.foe_offset_m, c.own_offset_m)
                        hits.append((pair[0], pair[1], offs[0], offs[1]))
        hits.sort(key=lambda h: (h[0].id, h[1].id))
        return hits

    def _resolve_collisions(self, hits) -> list[CollisionEvent]:
        events = []
        gone = set()
        for a, b, off_a, off_b in hits:
            if a.id in gone or b.id in gone:
                continue
            gone.add(a.id)
            gone.add(b.id)
            ev = CollisionEvent(self.time, a.id, b.id, a.movement, b.movement, (off_a, off_b),
                                a.entry_indication, b.entry_indication, a.entry_phase, b.entry_phase)
            events.append(ev)
            for veh in (a, b):
                self._remove(veh)
            self.ledger.collisions += 1
            self.ledger.collided_vehicles += 2
            if self.events is not None:
                self.events.append({"t": self.time, "type": "collision", "vid_a": a.id, "vid_b": b.id,
                                    "movement_a": a.movement, "movement_b": b.movement,
                                    "waiting_a": a.waiting_s, "waiting_b": b.waiting_s,
                                    "category": ev.category})
        return events

    def _remove(self, veh: Vehicle) -> None:
        self.lanes[veh.lane].remove(veh)
        if veh.entered:
            self.inside[veh.movement].remove(veh)

    def _remove_exited(self) -> None:
        for mid, lst in self.inside.items():
            end = self.stop + self.path_len[mid]
            done = [v for v in lst if v.pos - v.length >= end]
            for veh in done:
                self._remove(veh)
                self.ledger.throughput += 1
                if self.events is not None:
                    self.events.append({"t": self.time, "type": "exit", "vid": veh.id,
                                        "movement": mid, "waiting_s": veh.waiting_s})

    def finish_log(self) -> None:
        """Append one ``present`` record per vehicle still in the network."""
        if self.events is None:
            return
        for veh in self.vehicles():
            self.events.append({"t": self.time, "type": "present", "vid": veh.id,
                                "movement": veh.movement, "waiting_s": veh.waiting_s})
