"""Rule-based safety model for permitted left turns.

The model looks at the opposing through traffic of every permitted left
turn, decides which left turns would be unsafe to run on a permitted green,
and from that flags actions, proposes corrected actions and builds the safe
target distribution used by the loss and reward-shaping variants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import KL_FLOOR, Mlp, softmax
from .sim.engine import PERMITTED, PROTECTED, Simulation

MPH_45 = 45 * 0.44704  # 20.1168 m/s


@dataclass(frozen=True)
class LeftTurnObservation:
    movement: str
    opposing: tuple[str, ...]
    speeds: tuple[float, ...]
    distances: tuple[float, ...]
    etas: tuple[float, ...]
    speed_85th_mps: float | None
    opposing_active_lanes: int
    mode: str  # protected | permitted | prohibited


@dataclass(frozen=True)
class SafetyObservation:
    lefts: dict

    def __getitem__(self, movement) -> LeftTurnObservation:
        return self.lefts[movement]


def percentile_nearest_rank(values, q: float) -> float | None:
    if not len(values):
        return None
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


# -- rules ------------------------------------------------------------------

@dataclass(frozen=True)
class SpeedRule:
    """Permitted left is unsafe when opposing 85th-percentile speed exceeds the limit."""
    threshold_mps: float = MPH_45
    id: str = "R1-speed85"
    description: str = "opposing 85th percentile speed above 45 mph"

    def __call__(self, obs: LeftTurnObservation) -> bool:
        return obs.speed_85th_mps is not None and obs.speed_85th_mps > self.threshold_mps


@dataclass(frozen=True)
class ApproachTimeRule:
    """Permitted left is unsafe while an opposing through car is a few seconds out."""
    threshold_s: float = 4.0
    id: str = "R2-approach"
    description: str = "opposing through vehicle reaches the conflict point within the threshold"

    def __call__(self, obs: LeftTurnObservation) -> bool:
        return any(t < self.threshold_s for t in obs.etas)


@dataclass(frozen=True)
class OpposingLanesRule:
    min_lanes: int = 3
    id: str = "R3-lanes"
    description: str = "opposing through approach has many lanes with demand"

    def __call__(self, obs: LeftTurnObservation) -> bool:
        return obs.opposing_active_lanes >= self.min_lanes


RULE_TYPES = {"speed_85th": SpeedRule, "approach_time": ApproachTimeRule,
              "opposing_lanes": OpposingLanesRule}


def rules_from_config(entries) -> list:
    rules = []
    for entry in entries or []:
        entry = dict(entry)
        kind = entry.pop("type")
        enabled = entry.pop("enabled", True)
        if kind not in RULE_TYPES:
            raise ValueError(f"unknown safety rule type {kind!r}")
        if enabled:
            rules.append(RULE_TYPES[kind](**entry))
    return rules


def default_rules() -> list:
    return [SpeedRule(), ApproachTimeRule(), OpposingLanesRule()]


# -- observation --------------------------------------------------------------

def observe(sim: Simulation, lefts, horizon_m: float = 120.0) -> SafetyObservation:
    """Snapshot of opposing traffic for each left-turn movement in ``lefts``.

    Arrival times assume the opposing car may go (its own signal is ignored)
    and accelerates freely from its current speed.
    """
    geo = sim.geometry
    out = {}
    for m in lefts:
        opp = tuple(geo.opposing_throughs(m))
        speeds, dists, etas = [], [], []
        samples = []
        lanes_active = 0
        for foe_mid in opp:
            c = sim.conflicts[m].get(foe_mid)
            samples.extend(sim.recent_speeds(foe_mid))
            rate = sim.demand.rate(foe_mid, sim.time)
            if rate > 0:
                lanes_active += len(geo.movements[foe_mid].lanes)
            if c is None:
                continue
            candidates = list(sim.inside[foe_mid])
            for lane_idx in geo.movements[foe_mid].lanes:
                for veh in sim.lanes[lane_idx]:
                    if veh.entered or veh.movement != foe_mid:
                        continue
                    if sim.stop - veh.pos > horizon_m:
                        break
                    candidates.append(veh)
            for veh in candidates:
                eta = sim._eta(veh, c.foe_offset_m)
                if math.isinf(eta):
                    continue
                speeds.append(veh.speed)
                centre = veh.pos - veh.length / 2 - sim.stop
                dists.append(max(0.0, c.foe_offset_m - centre))
                etas.append(eta)
        ind = sim.indications.get(m)
        mode = "protected" if ind == PROTECTED else "permitted" if ind == PERMITTED else "prohibited"
        out[m] = LeftTurnObservation(m, opp, tuple(speeds), tuple(dists), tuple(etas),
                                     percentile_nearest_rank(samples, 85), lanes_active, mode)
    return SafetyObservation(out)


# -- verdicts ---------------------------------------------------------------

@dataclass
class SafetyVerdict:
    unsafe_flags: np.ndarray  # bool per action
    triggered_rules: list  # list[list[str]] per action
    corrected: list  # corrected action index per action
    unsafe_movements: dict = field(default_factory=dict)  # movement -> rule ids

    @property
    def all_safe(self) -> bool:
        return not bool(self.unsafe_flags.any())

    def is_unsafe(self, action: int) -> bool:
        return bool(self.unsafe_flags[action])


def movement_flags(rules, obs: SafetyObservation) -> dict:
    """Rule ids triggered for each observed left turn (empty lists dropped)."""
    out = {}
    for m, lobs in obs.lefts.items():
        hit = [r.id for r in rules if r(lobs)]
        if hit:
            out[m] = hit
    return out


def evaluate(rules, obs: SafetyObservation, action_space) -> SafetyVerdict:
    unsafe_mv = movement_flags(rules, obs)
    n = len(action_space)
    flags = np.zeros(n, dtype=bool)
    triggered = []
    for i, action in enumerate(action_space.actions):
        hit = []
        for m in sorted(action_space.permitted_enabled(action)):
            for rid in unsafe_mv.get(m, ()):
                if rid not in hit:
                    hit.append(rid)
        flags[i] = bool(hit)
        triggered.append(hit)
    corrected = [action_space.protected_twin(i) if flags[i] else i for i in range(n)]
    return SafetyVerdict(flags, triggered, corrected, unsafe_mv)


def correct_action(action: int, verdict: SafetyVerdict) -> int:
    """Residual correction: unsafe actions become their protected-only twin."""
    return verdict.corrected[action]


def desired_distribution(flags, advantages, action: int, floor: float = KL_FLOOR) -> np.ndarray:
    """Safe target distribution over actions.

    If ``action`` is safe this is exactly ``softmax(advantages)``; otherwise
    unsafe entries get ``floor`` and the rest of the mass is shared among safe
    actions in proportion to their softmax weights.
    """
    flags = np.asarray(flags, dtype=bool)
    probs = softmax(advantages)
    if not flags[action]:
        return probs
    safe = ~flags
    if not safe.any():
        raise ValueError("every action is unsafe; no safe target distribution exists")
    out = np.full_like(probs, floor)
    share = probs[safe] / probs[safe].sum()
    out[safe] = share * (1.0 - floor * int(flags.sum()))
    return out


class SafetyEmbedding:
    """relu(flags @ W_e + b_e): maps the unsafe-flag vector to ``dim`` features."""

    def __init__(self, n_actions: int, dim: int, rng: np.random.Generator, zero: bool = False):
        self.dim = dim
        self.net = Mlp.build([n_actions, dim], rng, output="relu", zero=zero) if dim > 0 else None

    def forward(self, flags) -> np.ndarray:
        flags = np.asarray(flags, dtype=np.float64)
        if self.net is None:
            return np.zeros(flags.shape[:-1] + (0,))
        return self.net.forward(flags)

    def backward(self, upstream):
        if self.net is None:
            return []
        grads, _ = self.net.backward(upstream)
        return grads

    def params(self):
        return self.net.params() if self.net is not None else []


def embed_safety(verdict: SafetyVerdict, embedding: SafetyEmbedding) -> np.ndarray:
    return embedding.forward(verdict.unsafe_flags.astype(np.float64))
