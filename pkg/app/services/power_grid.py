# app/services/power_grid.py
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from app.core.errors import SpecValidationError

DEFAULT_GRID_POINTS = 101


@dataclass(frozen=True)
class PowerGrid:
    """Strictly increasing powers spanning [0, g_max], both endpoints included."""

    points: tuple[float, ...]

    def __post_init__(self) -> None:
        pts = self.points
        if len(pts) < 2:
            raise SpecValidationError("a power grid needs at least 2 points", "grid")
        if pts[0] != 0.0:
            raise SpecValidationError("a power grid must start at 0", "grid.points[0]")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise SpecValidationError("grid points must be strictly increasing", "grid.points")

    @classmethod
    def uniform(cls, g_max: float, m: int = DEFAULT_GRID_POINTS) -> "PowerGrid":
        if g_max <= 0:
            raise SpecValidationError("g_max must be positive", "grid.g_max")
        if m < 2:
            raise SpecValidationError("m must be at least 2", "grid.m")
        pts = np.linspace(0.0, float(g_max), int(m))
        pts[-1] = float(g_max)
        return cls(points=tuple(float(x) for x in pts))

    @classmethod
    def from_points(cls, points: Sequence[float]) -> "PowerGrid":
        return cls(points=tuple(float(x) for x in points))

    @property
    def g_max(self) -> float:
        return self.points[-1]

    @property
    def m(self) -> int:
        return len(self.points)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    def refined(self, factor: int) -> "PowerGrid":
        """Uniform grid with factor-times the intervals on the same span."""
        return PowerGrid.uniform(self.g_max, (self.m - 1) * int(factor) + 1)
