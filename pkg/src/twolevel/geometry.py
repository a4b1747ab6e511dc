"""Toroidal 2-D space arithmetic shared by both simulation levels.

The coarse world is a wrap-around rectangle [0, W) x [0, H).  Extents are
normally derived from an entity count through the fixed-density rule
(one entity per 10000 spaceunits^2) on a square torus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

DENSITY_AREA_PER_ENTITY = 10000.0  # spaceunits^2 per simulated entity


class ConfigError(ValueError):
    """Invalid model or scenario configuration."""


@dataclass(frozen=True)
class WorldExtent:
    """Dimensions of the toroidal space."""

    width: float
    height: float

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"extent must be positive, got {self.width}x{self.height}")

    @property
    def max_distance(self) -> float:
        return math.hypot(self.width / 2.0, self.height / 2.0)


def extent_for_entities(num_entities: int) -> WorldExtent:
    """Square torus sized so density is one entity per 10000 su^2."""
    if num_entities <= 0:
        raise ConfigError(f"num_entities must be >= 1, got {num_entities}")
    side = math.sqrt(num_entities * DENSITY_AREA_PER_ENTITY)
    return WorldExtent(side, side)


def wrap(x: float, y: float, extent: WorldExtent) -> tuple[float, float]:
    """Map raw coordinates into [0, W) x [0, H), congruent modulo the extent."""
    wx = x % extent.width
    wy = y % extent.height
    # Python's % keeps the sign of the divisor but can return the divisor
    # itself when the remainder underflows to it (e.g. -1e-17 % 100.0).
    if wx >= extent.width:
        wx = 0.0
    if wy >= extent.height:
        wy = 0.0
    return wx, wy


def torus_distance(ax: float, ay: float, bx: float, by: float, extent: WorldExtent) -> float:
    """Euclidean distance under the shortest wrap-around displacement."""
    dx = abs(ax - bx)
    if dx > extent.width - dx:
        dx = extent.width - dx
    dy = abs(ay - by)
    if dy > extent.height - dy:
        dy = extent.height - dy
    return math.hypot(dx, dy)
