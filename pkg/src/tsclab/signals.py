"""Signal phases, plans, action spaces and the fixed-time controller.

A controller's output is a list of :class:`Segment` objects (phase, interval,
duration, forced-red overrides) which the environment plays tick by tick.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .sim.engine import PERMITTED, PROTECTED, RED, YELLOW

GREEN, YELLOW_INTERVAL, ALL_RED = "green", "yellow", "all_red"


@dataclass(frozen=True)
class Phase:
    id: str
    protected: frozenset
    permitted: frozenset = frozenset()
    min_s: float = 10.0
    max_s: float = 60.0
    initial_s: float = 30.0

    @property
    def greens(self) -> frozenset:
        return self.protected | self.permitted


@dataclass(frozen=True)
class SignalTiming:
    yellow_s: float = 3.0
    all_red_s: float = 2.0
    delta_s: float = 5.0
    acyclic_dt_s: float = 10.0


def validate_phases(phases, geometry) -> None:
    for ph in phases:
        for m in ph.greens:
            if m not in geometry.movements:
                raise ValueError(f"phase {ph.id} references unknown movement {m}")
        prot = sorted(ph.protected)
        for i, a in enumerate(prot):
            for b in prot[i + 1:]:
                if geometry.movements[a].conflicts_with(b):
                    raise ValueError(f"phase {ph.id}: protected {a} and {b} conflict")
        for m in ph.permitted:
            if not any(foe in ph.protected for foe in geometry.movements[m].conflicts):
                raise ValueError(f"phase {ph.id}: {m} has no conflicting green; list it as protected")
        if not ph.min_s <= ph.initial_s <= ph.max_s:
            raise ValueError(f"phase {ph.id}: initial duration outside [min, max]")


@dataclass
class CyclicPlan:
    phases: list[Phase]
    durations: list[float]
    yellow_s: float = 3.0
    all_red_s: float = 2.0

    @classmethod
    def initial(cls, phases, timing: SignalTiming) -> "CyclicPlan":
        return cls(list(phases), [p.initial_s for p in phases], timing.yellow_s, timing.all_red_s)

    @property
    def cycle_length(self) -> float:
        return sum(self.durations) + len(self.phases) * (self.yellow_s + self.all_red_s)

    def copy(self) -> "CyclicPlan":
        return CyclicPlan(self.phases, list(self.durations), self.yellow_s, self.all_red_s)


@dataclass(frozen=True)
class Action:
    kind: str  # "cyclic" | "acyclic"
    phase: int | None = None
    delta: float = 0.0
    protected_only: bool = False

    def as_protected(self) -> "Action":
        return replace(self, protected_only=True)

    def label(self, phases=None) -> str:
        suffix = "/prot" if self.protected_only else ""
        if self.kind == "acyclic":
            name = phases[self.phase].id if phases else str(self.phase)
            return f"phase {name}{suffix}"
        if self.phase is None:
            return f"keep{suffix}"
        name = phases[self.phase].id if phases else str(self.phase)
        return f"{name} {self.delta:+g}s{suffix}"


class ActionSpace:
    """Indexed action list for one control mode.

    With ``left_modes`` every action that would show a permitted left turn
    gets a twin that holds those lefts red (protected-only operation), so an
    agent can choose the safe variant itself.
    """

    def __init__(self, phases, mode: str, delta_s: float = 5.0, left_modes: bool = True):
        if mode not in ("cyclic", "acyclic"):
            raise ValueError(f"unknown action mode {mode!r}")
        self.phases = list(phases)
        self.mode = mode
        self.left_modes = left_modes
        if mode == "cyclic":
            base = [Action("cyclic")]
            for i in range(len(self.phases)):
                base += [Action("cyclic", i, +delta_s), Action("cyclic", i, -delta_s)]
        else:
            base = [Action("acyclic", i) for i in range(len(self.phases))]
        actions = list(base)
        if left_modes:
            actions += [a.as_protected() for a in base if self.permitted_enabled(a)]
        self.actions = actions
        self._index = {a: i for i, a in enumerate(actions)}

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, i) -> Action:
        return self.actions[i]

    def index(self, action: Action) -> int:
        return self._index[action]

    def permitted_enabled(self, action: Action) -> frozenset:
        """Permitted left movements the action would let run on a permitted green."""
        if action.protected_only:
            return frozenset()
        if action.kind == "acyclic":
            return self.phases[action.phase].permitted
        out = frozenset()
        for ph in self.phases:
            out |= ph.permitted
        return out

    def protected_twin(self, i: int) -> int:
        a = self.actions[i]
        if a.protected_only or not self.permitted_enabled(a):
            return i
        return self._index[a.as_protected()]

    def labels(self) -> list[str]:
        return [a.label(self.phases) for a in self.actions]


@dataclass
class SignalState:
    phases: list[Phase]
    active_phase: int = 0
    interval: str = GREEN
    time_in_interval_s: float = 0.0
    overrides: frozenset = frozenset()
    phase_seq: int = 0

    def indications(self) -> dict[str, str]:
        return indications_for(self)


def indication_for(signal: SignalState, movement: str) -> str:
    phase = signal.phases[signal.active_phase]
    if signal.interval == ALL_RED:
        return RED
    if signal.interval == YELLOW_INTERVAL:
        if movement in phase.protected:
            return YELLOW
        if movement in phase.permitted and movement not in signal.overrides:
            return YELLOW
        return RED
    if movement in phase.protected:
        return PROTECTED
    if movement in phase.permitted:
        return RED if movement in signal.overrides else PERMITTED
    return RED


def indications_for(signal: SignalState, movements=None) -> dict[str, str]:
    if movements is None:
        movements = set()
        for ph in signal.phases:
            movements |= ph.greens
    return {m: indication_for(signal, m) for m in movements}


@dataclass(frozen=True)
class Segment:
    phase: int
    interval: str
    duration_s: float
    overrides: frozenset = frozenset()


def apply_cyclic_action(plan: CyclicPlan, action: Action) -> CyclicPlan:
    """New plan with the chosen phase lengthened/shortened, clamped to its bounds."""
    if action.kind != "cyclic":
        raise ValueError("apply_cyclic_action needs a cyclic action")
    new = plan.copy()
    if action.phase is not None and action.delta:
        ph = plan.phases[action.phase]
        d = plan.durations[action.phase] + action.delta
        new.durations[action.phase] = min(max(d, ph.min_s), ph.max_s)
    return new


def lefts_held(phases, protected_only: bool) -> frozenset:
    if not protected_only:
        return frozenset()
    out = frozenset()
    for ph in phases:
        out |= ph.permitted
    return out


def cycle_segments(plan: CyclicPlan, protected_only: bool = False) -> list[Segment]:
    held = lefts_held(plan.phases, protected_only)
    segs = []
    for i, d in enumerate(plan.durations):
        segs.append(Segment(i, GREEN, d, held))
        segs.append(Segment(i, YELLOW_INTERVAL, plan.yellow_s, held))
        segs.append(Segment(i, ALL_RED, plan.all_red_s, held))
    return segs


def apply_acyclic_action(signal: SignalState, action: Action, dt_exec: float,
                         timing: SignalTiming) -> list[Segment]:
    """Interval sequence that realises ``action`` from the current signal."""
    if action.kind != "acyclic":
        raise ValueError("apply_acyclic_action needs an acyclic action")
    if not 0 <= action.phase < len(signal.phases):
        raise ValueError(f"unknown phase index {action.phase}")
    held = signal.phases[action.phase].permitted if action.protected_only else frozenset()
    if action.phase == signal.active_phase and signal.interval == GREEN:
        return [Segment(action.phase, GREEN, dt_exec, held)]
    out_held = signal.overrides
    return [
        Segment(signal.active_phase, YELLOW_INTERVAL, timing.yellow_s, out_held),
        Segment(signal.active_phase, ALL_RED, timing.all_red_s, out_held),
        Segment(action.phase, GREEN, dt_exec, held),
    ]


class FixedTimeController:
    """Plays the plan's phases in order with fixed durations, forever."""

    def __init__(self, plan: CyclicPlan):
        self.plan = plan.copy()

    @property
    def cycle_length(self) -> float:
        return self.plan.cycle_length

    def segments(self) -> list[Segment]:
        return cycle_segments(self.plan, protected_only=False)

    def state_at(self, t: float) -> SignalState:
        """Signal state at time ``t`` (closed form, used as a schedule oracle)."""
        tc = t % self.cycle_length
        seq = int(t // self.cycle_length) * len(self.plan.phases)
        for k, seg in enumerate(self.segments()):
            if tc < seg.duration_s:
                return SignalState(self.plan.phases, seg.phase, seg.interval, tc, seg.overrides,
                                   seq + seg.phase)
            tc -= seg.duration_s
        raise AssertionError("unreachable")
