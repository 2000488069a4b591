from .demand import DemandProfile, draw_arrivals
from .engine import (GREENS, PERMITTED, PROTECTED, RED, YELLOW, CollisionEvent, MetricsLedger,
                     Simulation, Vehicle, VehicleParams)
from .geometry import Conflict, IntersectionGeometry, Lane, Movement, derive_layout
from .metrics import EpisodeReport, snapshot_metrics

__all__ = [
    "DemandProfile", "draw_arrivals", "GREENS", "PERMITTED", "PROTECTED", "RED", "YELLOW",
    "CollisionEvent", "MetricsLedger", "Simulation", "Vehicle", "VehicleParams", "Conflict",
    "IntersectionGeometry", "Lane", "Movement", "derive_layout", "EpisodeReport", "snapshot_metrics",
]
