"""Time-variant arrival rates and vehicle spawning."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np


@dataclass
class DemandProfile:
    """Piecewise-constant arrival rates in vehicles/hour per movement.

    ``rates[m]`` is a list of ``(start_s, veh_per_hour)`` breakpoints sorted
    by start time; the rate before the first breakpoint is zero.
    """

    rates: dict[str, list[tuple[float, float]]]
    ignore_foe_prob: float = 0.0
    seed: int = 0
    _starts: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.ignore_foe_prob <= 1.0:
            raise ValueError("ignore_foe_prob must lie in [0, 1]")
        clean = {}
        for mid, pieces in self.rates.items():
            pieces = sorted((float(t), float(r)) for t, r in pieces)
            if any(r < 0 for _, r in pieces):
                raise ValueError(f"negative arrival rate for {mid}")
            clean[mid] = pieces
            self._starts[mid] = [t for t, _ in pieces]
        self.rates = clean

    def rate(self, movement: str, t: float) -> float:
        pieces = self.rates.get(movement)
        if not pieces:
            return 0.0
        i = bisect.bisect_right(self._starts[movement], t) - 1
        return pieces[i][1] if i >= 0 else 0.0

    def scaled(self, factor: float) -> "DemandProfile":
        return DemandProfile({m: [(t, r * factor) for t, r in p] for m, p in self.rates.items()},
                             self.ignore_foe_prob, self.seed)

    def with_ignore_prob(self, p: float) -> "DemandProfile":
        return DemandProfile(self.rates, p, self.seed)


def draw_arrivals(demand: DemandProfile, movements, t: float, dt: float,
                  rng: np.random.Generator) -> list[tuple[str, bool]]:
    """One tick of Bernoulli(rate*dt/3600) arrivals with their ignore-foe flags.

    Two uniforms per movement are always consumed so the arrival stream for a
    seed does not depend on what the controller does.
    """
    u = rng.random(len(movements))
    w = rng.random(len(movements))
    out = []
    for i, mid in enumerate(movements):
        p = demand.rate(mid, t) * dt / 3600.0
        if u[i] < p:
            out.append((mid, bool(w[i] < demand.ignore_foe_prob)))
    return out
