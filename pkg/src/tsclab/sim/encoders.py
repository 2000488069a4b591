"""State encoders: occupancy/speed grid and per-lane queue features."""
from __future__ import annotations

import numpy as np

QUEUE_SCALE = 50.0
WAIT_SCALE = 300.0


def grid_length(geometry) -> int:
    return 2 * geometry.n_cells


def encode_grid(sim) -> np.ndarray:
    """Per cell (occupied, speed / vmax) for the sensed stretch of every lane.

    Cell 0 of a lane touches the stop line.  A vehicle belongs to the cell
    holding its front bumper; when two share a cell the one nearer the stop
    line wins.  Vehicles already inside the junction are not sensed.
    """
    geo = sim.geometry
    n = geo.cells_per_lane
    cell = geo.cell_size_m
    rng_m = geo.sensing_range_m
    out = np.zeros(2 * geo.n_cells)
    stop = sim.stop
    for lane_idx, lane in enumerate(sim.lanes):
        base = lane_idx * n
        for veh in lane:
            if veh.entered:
                continue
            d = stop - veh.pos
            if d >= rng_m:
                break  # lanes are ordered front to back
            k = base + min(int(d // cell), n - 1)
            if out[2 * k] == 0.0:
                out[2 * k] = 1.0
                out[2 * k + 1] = veh.speed / veh.vmax
    return out


def encode_lanes(sim) -> np.ndarray:
    """Per lane (stopped-vehicle count / 50, max waiting among them / 300 s)."""
    out = np.zeros(2 * len(sim.lanes))
    for i, lane in enumerate(sim.lanes):
        q = 0
        w = 0.0
        for veh in lane:
            if not veh.entered and veh.speed < 0.1:
                q += 1
                if veh.waiting_s > w:
                    w = veh.waiting_s
        out[2 * i] = q / QUEUE_SCALE
        out[2 * i + 1] = w / WAIT_SCALE
    return out


ENCODERS = {"grid": (encode_grid, lambda g: 2 * g.n_cells),
            "lane": (encode_lanes, lambda g: 2 * len(g.lanes))}
