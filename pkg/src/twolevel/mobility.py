"""Random Waypoint movement for mobile entities, advanced once per coarse step.

An RWP entity repeatedly picks a uniform waypoint in the world rectangle and
a uniform speed in [SPEED_MIN, SPEED_MAX], then walks the direct in-rectangle
segment toward it.  Sleep time on arrival is zero: a fresh waypoint is picked
immediately, but the entity does not move again until the next step.  Static
entities never move.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from enum import Enum

from .geometry import WorldExtent

SPEED_MIN = 1.0
SPEED_MAX = 14.0


class MobilityKind(Enum):
    STATIC = "static"
    RANDOM_WAYPOINT = "rwp"


@dataclass
class MobilityState:
    kind: MobilityKind
    waypoint_x: float = 0.0
    waypoint_y: float = 0.0
    speed: float = 0.0


STATIC = MobilityState(MobilityKind.STATIC)


def rwp_pick(rng: random.Random, extent: WorldExtent) -> MobilityState:
    """Draw a fresh (waypoint, speed) pair. Draw order is fixed: x, y, speed."""
    wx = rng.uniform(0.0, extent.width)
    wy = rng.uniform(0.0, extent.height)
    speed = rng.uniform(SPEED_MIN, SPEED_MAX)
    return MobilityState(MobilityKind.RANDOM_WAYPOINT, wx, wy, speed)


def advance(
    x: float,
    y: float,
    state: MobilityState,
    rng: random.Random,
    extent: WorldExtent,
) -> tuple[float, float, MobilityState]:
    """One timestep of movement; returns (new_x, new_y, new_state).

    RWP moves min(speed, remaining distance) along the straight segment to
    the waypoint; waypoints are picked inside the rectangle so the segment
    never crosses the torus seam.  On arrival the next waypoint is picked
    immediately and the entity rests for the remainder of the step.
    """
    if state.kind is MobilityKind.STATIC:
        return x, y, state
    dx = state.waypoint_x - x
    dy = state.waypoint_y - y
    dist = math.hypot(dx, dy)
    if dist <= state.speed:
        return state.waypoint_x, state.waypoint_y, rwp_pick(rng, extent)
    frac = state.speed / dist
    return x + dx * frac, y + dy * frac, state
