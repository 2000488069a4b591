"""Intersection layout: movements, lanes and conflict points.

Conflict offsets are arc-length distances measured from the stop line along
each movement's path through the junction.  They can be given explicitly in
a scenario file or derived from a simple right-hand-traffic layout in which
every approach has the same number of lanes, throughs are straight lines and
turns are quarter circles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

APPROACHES = ("N", "E", "S", "W")
KINDS = ("through", "left", "right", "u-turn")
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
# rotation (degrees) taking the canonical west-approach frame to each approach
_ROTATION = {"W": 0.0, "S": 90.0, "E": 180.0, "N": 270.0}


@dataclass(frozen=True)
class Conflict:
    foe: str
    own_offset_m: float
    foe_offset_m: float


@dataclass
class Movement:
    id: str
    approach: str
    kind: str
    lanes: tuple[int, ...]
    path_length_m: float
    conflicts: dict[str, Conflict] = field(default_factory=dict)

    @property
    def entry_lane(self) -> int:
        return self.lanes[0]

    def conflicts_with(self, other: str) -> bool:
        return other in self.conflicts


@dataclass
class Lane:
    index: int
    approach: str
    position: int  # 0 = innermost
    movements: tuple[str, ...]


@dataclass
class IntersectionGeometry:
    name: str
    approaches: tuple[str, ...]
    lanes: list[Lane]
    movements: dict[str, Movement]
    approach_length_m: float
    cell_size_m: float
    speed_limit_mps: float
    sensing_range_m: float
    lane_width_m: float = 3.2

    def __post_init__(self):
        self.validate()
        self.movement_ids = tuple(self.movements)
        self.lanes_per_approach = {
            a: sum(1 for lane in self.lanes if lane.approach == a) for a in self.approaches
        }

    def validate(self) -> None:
        for lane in self.lanes:
            if not lane.movements:
                raise ValueError(f"lane {lane.index} serves no movement")
            for m in lane.movements:
                if m not in self.movements:
                    raise ValueError(f"lane {lane.index} references unknown movement {m}")
        for mid, mv in self.movements.items():
            if mv.kind not in KINDS:
                raise ValueError(f"movement {mid}: unknown kind {mv.kind!r}")
            if mid in mv.conflicts:
                raise ValueError(f"movement {mid} conflicts with itself")
            for foe, c in mv.conflicts.items():
                back = self.movements[foe].conflicts.get(mid)
                if back is None or not (
                    math.isclose(back.own_offset_m, c.foe_offset_m, abs_tol=1e-9)
                    and math.isclose(back.foe_offset_m, c.own_offset_m, abs_tol=1e-9)
                ):
                    raise ValueError(f"conflict {mid}/{foe} is not symmetric")
        if self.cell_size_m <= 0:
            raise ValueError("cell_size_m must be positive")

    @property
    def cells_per_lane(self) -> int:
        return int(math.ceil(self.sensing_range_m / self.cell_size_m))

    @property
    def n_cells(self) -> int:
        return self.cells_per_lane * len(self.lanes)

    def opposing_throughs(self, movement_id: str) -> list[str]:
        """Through movements on the approach opposite to ``movement_id``."""
        app = OPPOSITE[self.movements[movement_id].approach]
        return [m.id for m in self.movements.values() if m.approach == app and m.kind == "through"]

    def conflict_pairs(self) -> list[tuple[str, str]]:
        seen = []
        for a, mv in self.movements.items():
            for b in mv.conflicts:
                if a < b:
                    seen.append((a, b))
        return sorted(seen)


# -- layout-derived conflicts ---------------------------------------------

def _rotate(points: np.ndarray, degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return points @ np.array([[c, s], [-s, c]])


def movement_path(approach: str, kind: str, position: int, lanes: int, lane_width: float,
                  n: int = 400) -> np.ndarray:
    """Polyline of a movement's path in world coordinates (junction centred at 0)."""
    half = lanes * lane_width
    off = (position + 0.5) * lane_width
    if kind == "through":
        x = np.linspace(-half, half, n)
        pts = np.column_stack([x, np.full(n, -off)])
    elif kind == "left":
        r = half + off
        phi = np.linspace(-math.pi / 2, 0.0, n)
        pts = np.column_stack([-half + r * np.cos(phi), half + r * np.sin(phi)])
    elif kind == "right":
        r = half - off
        phi = np.linspace(math.pi / 2, 0.0, n)
        pts = np.column_stack([-half + r * np.cos(phi), -half + r * np.sin(phi)])
    else:
        raise ValueError(f"no layout path for {kind} movements")
    return _rotate(pts, _ROTATION[approach])


def _cumlen(path: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(path, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _first_crossing(pa: np.ndarray, pb: np.ndarray):
    """Arc-length offsets of the first crossing of two polylines, or None."""
    la, lb = _cumlen(pa), _cumlen(pb)
    a0, a1 = pa[:-1], pa[1:]
    b0, b1 = pb[:-1], pb[1:]
    da = a1 - a0
    db = b1 - b0
    best = None
    for i in range(len(a0)):
        denom = da[i, 0] * db[:, 1] - da[i, 1] * db[:, 0]
        ok = np.abs(denom) > 1e-12
        if not ok.any():
            continue
        diff = b0 - a0[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (diff[:, 0] * db[:, 1] - diff[:, 1] * db[:, 0]) / denom
            u = (diff[:, 0] * da[i, 1] - diff[:, 1] * da[i, 0]) / denom
        hit = ok & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
        if hit.any():
            j = int(np.flatnonzero(hit)[0])
            best = (la[i] + t[j] * (la[i + 1] - la[i]), lb[j] + u[j] * (lb[j + 1] - lb[j]))
            break
    return best


def derive_layout(lane_table: dict, kinds: dict, lanes_per_approach: int, lane_width: float,
                  right_turn_conflicts: bool = False):
    """Path lengths and conflict offsets for a symmetric layout.

    ``lane_table`` maps approach -> list of movement-id lists (innermost lane
    first); ``kinds`` maps movement id -> kind.
    """
    paths = {}
    for app, lane_list in lane_table.items():
        for pos, mids in enumerate(lane_list):
            for mid in mids:
                if mid not in paths:
                    paths[mid] = (app, movement_path(app, kinds[mid], pos, lanes_per_approach, lane_width))
    lengths = {mid: float(_cumlen(p)[-1]) for mid, (_, p) in paths.items()}
    conflicts: list[tuple[str, str, float, float]] = []
    ids = sorted(paths)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            app_a, pa = paths[a]
            app_b, pb = paths[b]
            if app_a == app_b:
                continue
            if not right_turn_conflicts and "right" in (kinds[a], kinds[b]):
                continue
            hit = _first_crossing(pa, pb)
            if hit is not None:
                conflicts.append((a, b, round(hit[0], 3), round(hit[1], 3)))
    return {k: round(v, 3) for k, v in lengths.items()}, conflicts
