"""Normalized-coordinate primitives: boxes, token grids, edge distance and IoU.

All coordinates are fractions of the image width/height, so the image is the
unit square with (0, 0) at the top-left corner.
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

AREA_MIN = 0.005
AREA_MAX = 0.95

Point = Tuple[float, float]


class MalformedBoxError(ValueError):
    """Raised for boxes with inverted corners, non-finite or out-of-range coordinates."""


def _check_coords(x1, y1, x2, y2):
    coords = (x1, y1, x2, y2)
    if not all(math.isfinite(v) for v in coords):
        raise MalformedBoxError(f"non-finite coordinate in {list(coords)}")
    if x1 > x2 or y1 > y2:
        raise MalformedBoxError(f"inverted corners in {list(coords)}")
    if min(coords) < 0.0 or max(coords) > 1.0:
        raise MalformedBoxError(f"coordinate outside [0, 1] in {list(coords)}")


@dataclass(frozen=True)
class NormalizedBBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        _check_coords(self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_raw(cls, coords: Sequence[float], clip: bool = False) -> "NormalizedBBox":
        """Build a box from four raw numbers, optionally clipping into [0, 1] first.

        Clipping never repairs inverted corners.
        """
        if len(coords) != 4:
            raise MalformedBoxError(f"expected 4 coordinates, got {len(coords)}")
        vals = [float(v) for v in coords]
        if clip:
            vals = [min(1.0, max(0.0, v)) if math.isfinite(v) else v for v in vals]
        return cls(*vals)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def contains(self, p: Point) -> bool:
        c, r = p
        return self.x1 <= c <= self.x2 and self.y1 <= r <= self.y2


def _check_point(p: Point):
    c, r = p
    if not (0.0 <= c <= 1.0 and 0.0 <= r <= 1.0):
        raise ValueError(f"point {p} lies outside the unit square")


def edge_distance_sq(p: Point, b: NormalizedBBox) -> float:
    """Squared Euclidean distance from ``p`` to the nearest point of the closed box."""
    c, r = p
    dx = max(b.x1 - c, c - b.x2, 0.0)
    dy = max(b.y1 - r, r - b.y2, 0.0)
    return dx * dx + dy * dy


def edge_distance(p: Point, b: NormalizedBBox) -> float:
    """Distance from point ``p`` to the nearest edge of ``b``; zero on the closed box."""
    _check_point(p)
    c, r = p
    return math.hypot(max(b.x1 - c, c - b.x2, 0.0), max(b.y1 - r, r - b.y2, 0.0))


def iou(a: NormalizedBBox, b: NormalizedBBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def is_geometrically_valid(coords, area_min: float = AREA_MIN, area_max: float = AREA_MAX) -> bool:
    """True for a well-formed in-range box whose area lies in ``[area_min, area_max]``.

    Accepts a NormalizedBBox or any 4-sequence of raw parsed numbers and
    never raises.
    """
    if isinstance(coords, NormalizedBBox):
        coords = coords.as_tuple()
    try:
        if len(coords) != 4:
            return False
        x1, y1, x2, y2 = (float(v) for v in coords)
        _check_coords(x1, y1, x2, y2)
    except (TypeError, ValueError):
        return False
    area = (x2 - x1) * (y2 - y1)
    return area_min <= area <= area_max


@dataclass(frozen=True)
class TokenGrid:
    """Visual tokens laid out on a regular patch grid, indexed row-major."""

    rows: int
    cols: int

    def __post_init__(self):
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise ValueError("grid dimensions must be integers")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid dimensions must be positive, got {self.rows}x{self.cols}")

    def __len__(self):
        return self.rows * self.cols

    @property
    def positions(self) -> np.ndarray:
        """(rows*cols, 2) array of patch centers as (c, r) = (x, y)."""
        r, c = np.divmod(np.arange(self.rows * self.cols), self.cols)
        return np.column_stack([(c + 0.5) / self.cols, (r + 0.5) / self.rows])

    def position(self, index: int) -> Point:
        r, c = divmod(index, self.cols)
        return ((c + 0.5) / self.cols, (r + 0.5) / self.rows)


def make_grid(rows: int, cols: int) -> TokenGrid:
    return TokenGrid(rows, cols)
