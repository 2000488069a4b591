"""Decision-level environment around the simulator.

A *decision* is one agent action: a full cycle in cyclic mode, or one
acyclic phase choice (including any change intervals it needs).  Rewards
are the negative waiting time accrued while the decision played out.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import safety
from .signals import (ALL_RED, GREEN, YELLOW_INTERVAL, ActionSpace, CyclicPlan, SignalState,
                      apply_acyclic_action, apply_cyclic_action, cycle_segments, indications_for)
from .sim.encoders import ENCODERS
from .sim.engine import PERMITTED


@dataclass
class TickShield:
    """Per-tick guard: forces a permitted left red (until the phase ends)
    as soon as the rules flag it."""
    rules: list
    audit: bool = True


@dataclass
class StepInfo:
    duration_s: float = 0.0
    waiting_s: float = 0.0
    collisions: list = field(default_factory=list)
    shield_fired: int = 0
    violations: int = 0
    ticks: int = 0


class SignalEnv:
    def __init__(self, scenario, mode: str = "cyclic", encoder: str = "grid", episode_s: float = 3600.0,
                 left_modes: bool = True, ignore_foe_prob: float | None = None,
                 demand_scale: float = 1.0, log_events: bool = False):
        if mode not in ("cyclic", "acyclic"):
            raise ValueError(f"unknown mode {mode!r}")
        if encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {encoder!r}")
        self.scenario = scenario
        self.mode = mode
        self.encoder_name = encoder
        self._encode, enc_len = ENCODERS[encoder]
        self.episode_s = episode_s
        self.ignore_foe_prob = ignore_foe_prob
        self.demand_scale = demand_scale
        self.log_events = log_events
        self.timing = scenario.timing
        self.phases = scenario.phases
        self.actions = ActionSpace(self.phases, mode, self.timing.delta_s, left_modes)
        self.lefts = scenario.permitted_lefts
        n_ph = len(self.phases)
        self.extra_len = n_ph if mode == "cyclic" else n_ph + 2
        self.state_len = enc_len(scenario.geometry) + self.extra_len
        self.sim = None
        self.shield: TickShield | None = None

    # -- episode control ----------------------------------------------------
    def reset(self, seed: int) -> np.ndarray:
        self.sim = self.scenario.make_sim(seed, self.ignore_foe_prob, self.demand_scale, self.log_events)
        self.plan = CyclicPlan.initial(self.phases, self.timing)
        self.signal = SignalState(self.phases, 0, GREEN, 0.0, frozenset(), 0)
        self.seq = 0
        self.protected_only = False
        self.collisions = []
        self.violations = 0
        self.shield_ticks = 0
        return self.observe()

    @property
    def done(self) -> bool:
        return self.sim.time >= self.episode_s - 1e-9

    def observe(self) -> np.ndarray:
        base = self._encode(self.sim)
        if self.mode == "cyclic":
            extra = np.array([d / ph.max_s for d, ph in zip(self.plan.durations, self.phases)])
        else:
            extra = np.zeros(self.extra_len)
            extra[self.signal.active_phase] = 1.0
            extra[len(self.phases)] = 1.0 if self.protected_only else 0.0
            extra[len(self.phases) + 1] = min(self.signal.time_in_interval_s / 60.0, 1.0)
        return np.concatenate([base, extra])

    def safety_observation(self) -> "safety.SafetyObservation":
        return safety.observe(self.sim, self.lefts)

    # -- stepping -----------------------------------------------------------
    def step(self, action_idx: int):
        if self.sim is None:
            raise RuntimeError("call reset() first")
        action = self.actions[action_idx]
        if self.mode == "cyclic":
            self.plan = apply_cyclic_action(self.plan, action)
            segments = cycle_segments(self.plan, action.protected_only)
        else:
            segments = apply_acyclic_action(self.signal, action, self.timing.acyclic_dt_s, self.timing)
            self.protected_only = action.protected_only
        info = StepInfo()
        w0 = self.sim.ledger.cumulative_waiting_s
        for seg in segments:
            self._play(seg, info)
            if self.done:
                break
        info.waiting_s = self.sim.ledger.cumulative_waiting_s - w0
        if self.done:
            self.sim.finish_log()
        return self.observe(), -info.waiting_s, self.done, info

    def _play(self, seg, info: StepInfo) -> None:
        sim = self.sim
        dt = sim.dt
        continuing = (seg.phase == self.signal.active_phase and seg.interval == self.signal.interval)
        if seg.interval == GREEN and not continuing:
            self.seq += 1
        t_in = self.signal.time_in_interval_s if continuing else 0.0
        overrides = set(seg.overrides)
        if seg.phase == self.signal.active_phase and (continuing or seg.interval != GREEN):
            # forced-red overrides last until the phase ends
            overrides |= self.signal.overrides
        n_ticks = int(round(seg.duration_s / dt))
        for _ in range(n_ticks):
            if self.done:
                break
            if self.shield is not None and seg.interval == GREEN:
                live = [m for m in self.phases[seg.phase].permitted if m not in overrides]
                if live:
                    obs = safety.observe(sim, live)
                    flagged = safety.movement_flags(self.shield.rules, obs)
                    if flagged:
                        overrides |= set(flagged)
                        info.shield_fired += 1
                        self.shield_ticks += 1
            self.signal = SignalState(self.phases, seg.phase, seg.interval, t_in, frozenset(overrides),
                                      self.seq)
            ind = indications_for(self.signal, sim.movement_ids)
            sim.set_signal(ind, self.seq)
            if self.shield is not None and self.shield.audit:
                shown = [m for m in self.lefts if ind.get(m) == PERMITTED]
                if shown:
                    flagged = safety.movement_flags(self.shield.rules, safety.observe(sim, shown))
                    if flagged:
                        info.violations += len(flagged)
                        self.violations += len(flagged)
            events = sim.step()
            if events:
                info.collisions.extend(events)
                self.collisions.extend(events)
            t_in += dt
            info.duration_s += dt
            info.ticks += 1
        self.signal = SignalState(self.phases, seg.phase, seg.interval, t_in, frozenset(overrides),
                                  self.seq)
