"""Blind-alley detection.

The field heading is extended into a straight chain of waypoints. When the
chain reaches the lower road edge and the edge is closer than the braking
distance, the vehicle cannot stop inside the road and the escape planner has
to take over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .potential_field import RoadGeometry

GRAVITY = 9.81


@dataclass(frozen=True)
class WaypointChain:
    points: np.ndarray  # (count, 2)
    step_length: float

    @property
    def count(self) -> int:
        return len(self.points)

    @property
    def last(self) -> tuple:
        return float(self.points[-1, 0]), float(self.points[-1, 1])


@dataclass(frozen=True)
class TriggerDecision:
    triggered: bool
    p_int: tuple | None
    d_e2r: float | None
    d_brake: float


@dataclass(frozen=True)
class BrakingModel:
    reaction_time: float = 0.5
    max_decel: float = 0.75 * GRAVITY

    def __post_init__(self):
        if self.reaction_time < 0:
            raise ValueError("reaction_time must be nonnegative")
        if self.max_decel <= 0:
            raise ValueError("max_decel must be positive")

    @classmethod
    def from_friction(cls, upsilon: float, reaction_time: float = 0.5, g: float = GRAVITY):
        return cls(reaction_time, upsilon * g)


def generate_waypoints(x: float, y: float, psi_ref: float, L: float, n: int = 20) -> WaypointChain:
    """Point k sits k*L along the heading ``psi_ref`` from (x, y), k = 1..n."""
    if n < 1:
        raise ValueError("need at least one waypoint")
    if L <= 0:
        raise ValueError("step length must be positive")
    k = np.arange(1, n + 1, dtype=float)
    pts = np.column_stack([x + k * L * math.cos(psi_ref), y + k * L * math.sin(psi_ref)])
    return WaypointChain(pts, float(L))


def estimate_intersection(x: float, y: float, psi_ref: float, road: RoadGeometry):
    """Where the heading ray from (x, y) meets the lower edge.

    Returns ``(p_int, d_e2r)`` or ``None`` when the ray does not descend.
    """
    s = math.sin(psi_ref)
    if psi_ref == 0.0 or s >= 0.0:
        return None
    height = y - road.lower_edge_y
    if height < 0:
        return None
    d = height / -s
    p = (x + d * math.cos(psi_ref), road.lower_edge_y)
    return p, d


def braking_distance(speed: float, model: BrakingModel) -> float:
    if speed < 0:
        raise ValueError("speed must be nonnegative")
    return speed * model.reaction_time + speed**2 / (2.0 * model.max_decel)


def evaluate_trigger(chain: WaypointChain, x: float, y: float, psi_ref: float, speed: float,
                     road: RoadGeometry, model: BrakingModel) -> TriggerDecision:
    """Fires only if the chain ends on or below the lower edge and the edge is
    strictly closer than the braking distance (a tie does not fire)."""
    d_brake = braking_distance(speed, model)
    if chain.count < 1:
        raise ValueError("empty waypoint chain")
    if chain.points[-1, 1] > road.lower_edge_y:
        return TriggerDecision(False, None, None, d_brake)
    hit = estimate_intersection(x, y, psi_ref, road)
    if hit is None:
        return TriggerDecision(False, None, None, d_brake)
    p_int, d_e2r = hit
    return TriggerDecision(d_e2r < d_brake, p_int, d_e2r, d_brake)


class TriggerLatch:
    """Per-run latch: once fired the decision is kept."""

    def __init__(self):
        self.decision: TriggerDecision | None = None

    @property
    def active(self) -> bool:
        return self.decision is not None

    def update(self, decision: TriggerDecision) -> bool:
        if self.decision is None and decision.triggered:
            self.decision = decision
            return True
        return False
