"""Plateau suppression bias over visual tokens.

Tokens on or inside a fixated box get zero bias; outside, the bias falls off
as a Gaussian exponent in the distance to the box's nearest edge:

    beta = -alpha_s * D^2 / (2 * sigma^2)

Several boxes combine by element-wise maximum, so a token stays unsuppressed
if any box seen so far covers it.
"""

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Tuple

import numpy as np

from .geometry import NormalizedBBox, Point, TokenGrid, _check_point, edge_distance_sq

DEFAULT_ALPHA_S = 4.0
DEFAULT_SIGMA = 0.25


@dataclass(frozen=True)
class GazeParams:
    alpha_s: float = DEFAULT_ALPHA_S
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not np.isfinite(self.alpha_s) or self.alpha_s < 0:
            raise ValueError(f"alpha_s must be a finite value >= 0, got {self.alpha_s}")
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


def suppression(d2, params: GazeParams):
    """Bias for squared edge distance ``d2`` (scalar or array).

    Written as ``0.0 - x`` so the plateau comes out as +0.0 rather than -0.0.
    """
    return 0.0 - params.alpha_s * d2 / (2.0 * params.sigma * params.sigma)


def bias_single(p: Point, b: NormalizedBBox, params: GazeParams = GazeParams()) -> float:
    _check_point(p)
    return suppression(edge_distance_sq(p, b), params)


def bias_accumulated(p: Point, boxes: Iterable[NormalizedBBox], params: GazeParams = GazeParams()) -> float:
    boxes = list(boxes)
    if not boxes:
        raise ValueError("bias_accumulated needs at least one box; use a zero field for no gaze")
    return max(bias_single(p, b, params) for b in boxes)


@dataclass(frozen=True)
class GazeBiasField:
    """One bias value per token of ``grid``, in row-major token order."""

    grid: TokenGrid
    values: np.ndarray
    params: GazeParams
    boxes: Tuple[NormalizedBBox, ...] = field(default=())

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.rows, self.grid.cols)

    def is_zero(self) -> bool:
        return not np.any(self.values)


def zero_field(grid: TokenGrid, params: GazeParams = GazeParams()) -> GazeBiasField:
    return GazeBiasField(grid, np.zeros(len(grid)), params, ())


def field_for_grid(
    grid: TokenGrid, boxes: Sequence[NormalizedBBox], params: GazeParams = GazeParams()
) -> GazeBiasField:
    boxes = tuple(boxes)
    if not boxes:
        return zero_field(grid, params)
    pos = grid.positions
    c = pos[:, 0][:, None]
    r = pos[:, 1][:, None]
    bx = np.array([b.as_tuple() for b in boxes])
    dx = np.maximum(np.maximum(bx[:, 0] - c, c - bx[:, 2]), 0.0)
    dy = np.maximum(np.maximum(bx[:, 1] - r, r - bx[:, 3]), 0.0)
    per_box = suppression(dx * dx + dy * dy, params)
    return GazeBiasField(grid, per_box.max(axis=1), params, boxes)
