"""Brute-force reference checks for the collision detector.

These work from raw vehicle records (movement, previous and current centre
offsets) and share no code with the engine's incremental detector.
"""
from __future__ import annotations

import itertools

import numpy as np


def _feasible_interval(constraints):
    """Range of s in [0, 1] satisfying every ``a*s <= b``; None if empty."""
    lo, hi = 0.0, 1.0
    for a, b in constraints:
        if a == 0.0:
            if b < 0.0:
                return None
        elif a > 0.0:
            hi = min(hi, b / a)
        else:
            lo = max(lo, b / a)
    return (lo, hi) if lo <= hi else None


def pair_overlaps(a0, a1, off_a, b0, b1, off_b, half) -> bool:
    """Do two centres moving linearly over one tick sit inside their zones at a common instant?"""
    cons = []
    for c0, c1, off in ((a0, a1, off_a), (b0, b1, off_b)):
        slope = c1 - c0
        cons.append((slope, off + half - c0))     # c0 + slope*s <= off + half
        cons.append((-slope, c0 - (off - half)))  # c0 + slope*s >= off - half
    return _feasible_interval(cons) is not None


def records_from_sim(sim) -> list[tuple]:
    """(id, movement, centre_prev, centre_now) for every vehicle inside the junction."""
    out = []
    for lst in sim.inside.values():
        for v in lst:
            off = v.length / 2 + sim.stop
            out.append((v.id, v.movement, v.prev_pos - off, v.pos - off))
    return out


def brute_force_pairs(records, geometry, half) -> list[tuple[int, int]]:
    hits = []
    for ra, rb in itertools.combinations(records, 2):
        c = geometry.movements[ra[1]].conflicts.get(rb[1])
        if c is None:
            continue
        if pair_overlaps(ra[2], ra[3], c.own_offset_m, rb[2], rb[3], c.foe_offset_m, half):
            hits.append(tuple(sorted((ra[0], rb[0]))))
    return sorted(hits)


def sampled_pairs(records, geometry, half, n: int = 2001, tol: float = 1e-9) -> list[tuple[int, int]]:
    """Dense time-sampling variant (slack ``tol`` absorbs the grid's resolution)."""
    s = np.linspace(0.0, 1.0, n)
    hits = []
    for ra, rb in itertools.combinations(records, 2):
        c = geometry.movements[ra[1]].conflicts.get(rb[1])
        if c is None:
            continue
        ca = ra[2] + (ra[3] - ra[2]) * s
        cb = rb[2] + (rb[3] - rb[2]) * s
        both = (np.abs(ca - c.own_offset_m) <= half + tol) & (np.abs(cb - c.foe_offset_m) <= half + tol)
        if both.any():
            hits.append(tuple(sorted((ra[0], rb[0]))))
    return sorted(hits)
