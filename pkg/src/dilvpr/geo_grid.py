"""Square-cell discretization of the operational area into a fixed label space.

Labels are row-major (``row * cols + col``); rows run along y, columns along x.
Cells are half-open ``[low, high)`` except the last cell on each axis, which is
closed so that the far edge of the area is still in bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

Coordinate = Tuple[float, float]


class OutOfArea(ValueError):
    """A coordinate lies outside the gridded area."""


class InvalidLabel(ValueError):
    pass


@dataclass(frozen=True)
class GridMap:
    origin: Coordinate
    cell_size: float
    rows: int
    cols: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def num_classes(self) -> int:
        return self.rows * self.cols

    def _index(self, value: float, low: float, count: int, axis: str) -> int:
        high = low + count * self.cell_size
        if not (low <= value <= high) or not math.isfinite(value):
            raise OutOfArea(f"{axis}={value} outside [{low}, {high}]")
        return min(int(math.floor((value - low) / self.cell_size)), count - 1)

    def cell_of(self, p: Coordinate) -> int:
        col = self._index(p[0], self.origin[0], self.cols, "x")
        row = self._index(p[1], self.origin[1], self.rows, "y")
        return row * self.cols + col

    def row_col(self, label: int) -> Tuple[int, int]:
        if not 0 <= label < self.num_classes:
            raise InvalidLabel(f"label {label} not in [0, {self.num_classes})")
        return divmod(int(label), self.cols)

    def center_of(self, label: int) -> Coordinate:
        row, col = self.row_col(label)
        return (
            self.origin[0] + (col + 0.5) * self.cell_size,
            self.origin[1] + (row + 0.5) * self.cell_size,
        )

    def within_tolerance(self, predicted_label: int, gt: Coordinate, tau: float) -> bool:
        """True iff the predicted cell's center is strictly closer than ``tau`` to ``gt``.

        A distance of exactly ``tau`` counts as a miss.
        """
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        cx, cy = self.center_of(predicted_label)
        return math.hypot(cx - gt[0], cy - gt[1]) < tau

    def neighbors4(self, label: int):
        row, col = self.row_col(label)
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            r, c = row + dr, col + dc
            if 0 <= r < self.rows and 0 <= c < self.cols:
                yield r * self.cols + c

    def to_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "cell_size": self.cell_size,
            "rows": self.rows,
            "cols": self.cols,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridMap":
        return cls(tuple(d["origin"]), float(d["cell_size"]), int(d["rows"]), int(d["cols"]))
