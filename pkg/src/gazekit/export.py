"""Bias-field serialization: CSV, PGM and JSON, plus the alpha_s sweep summary."""

import json
from typing import Dict, List, Sequence

import numpy as np

from .gazefield import GazeBiasField, GazeParams, field_for_grid
from .geometry import NormalizedBBox, TokenGrid

SUPPRESSED_WEIGHT = 0.01


def fmt_float(x: float) -> str:
    """6 significant digits, no negative zero."""
    return format(round_sig(x), ".6g")


def round_sig(x: float) -> float:
    return float(f"{x:.6g}") + 0.0


def field_to_csv(gaze: GazeBiasField) -> str:
    rows = gaze.as_array()
    return "".join(",".join(fmt_float(v) for v in row) + "\n" for row in rows)


def pgm_pixels(gaze: GazeBiasField) -> np.ndarray:
    """pixel = round(255 * exp(beta / alpha_s)) clamped to [0, 255]; all 255 when alpha_s = 0."""
    if gaze.params.alpha_s == 0:
        return np.full(gaze.as_array().shape, 255, dtype=np.int64)
    px = np.floor(255.0 * np.exp(gaze.as_array() / gaze.params.alpha_s) + 0.5)
    return np.clip(px, 0, 255).astype(np.int64)


def field_to_pgm(gaze: GazeBiasField) -> str:
    """Plain (P2) PGM; the header comment records the value mapping."""
    px = pgm_pixels(gaze)
    p = gaze.params
    lines = [
        "P2",
        f"# gazekit bias field alpha_s={fmt_float(p.alpha_s)} sigma={fmt_float(p.sigma)}",
        "# pixel = round(255*exp(beta/alpha_s)) clamped to [0,255]; 255 = no suppression",
        f"{gaze.grid.cols} {gaze.grid.rows}",
        "255",
    ]
    lines += [" ".join(str(v) for v in row) for row in px]
    return "\n".join(lines) + "\n"


def field_to_json(gaze: GazeBiasField) -> str:
    payload = {
        "rows": gaze.grid.rows,
        "cols": gaze.grid.cols,
        "alpha_s": round_sig(gaze.params.alpha_s),
        "sigma": round_sig(gaze.params.sigma),
        "boxes": [[round_sig(v) for v in b.as_tuple()] for b in gaze.boxes],
        "values": [[round_sig(v) for v in row] for row in gaze.as_array()],
    }
    return json.dumps(payload) + "\n"


def outside_mask(grid: TokenGrid, boxes: Sequence[NormalizedBBox]) -> np.ndarray:
    pos = grid.positions
    inside = np.zeros(len(grid), dtype=bool)
    for b in boxes:
        inside |= (
            (pos[:, 0] >= b.x1) & (pos[:, 0] <= b.x2) & (pos[:, 1] >= b.y1) & (pos[:, 1] <= b.y2)
        )
    return ~inside


def sweep(grid: TokenGrid, boxes: Sequence[NormalizedBBox], alphas: Sequence[float], sigma: float) -> List[Dict]:
    """Per-alpha_s field summary: min/mean bias outside the boxes and the suppressed fraction.

    A token counts as suppressed when exp(beta) < 0.01, i.e. its attention
    weight is cut by more than 100x before renormalization.
    """
    if not alphas:
        raise ValueError("alpha list is empty")
    if any(a < 0 for a in alphas):
        raise ValueError("alpha_s values must be >= 0")
    outside = outside_mask(grid, boxes)
    rows = []
    for alpha in alphas:
        gaze = field_for_grid(grid, boxes, GazeParams(alpha, sigma))
        out_vals = gaze.values[outside]
        rows.append({
            "alpha_s": float(alpha),
            "min_bias_outside": float(out_vals.min()) + 0.0 if out_vals.size else 0.0,
            "mean_bias_outside": float(out_vals.mean()) + 0.0 if out_vals.size else 0.0,
            "suppressed_fraction": float(np.count_nonzero(np.exp(gaze.values) < SUPPRESSED_WEIGHT)) / len(grid),
        })
    return rows


SWEEP_COLUMNS = ("alpha_s", "min_bias_outside", "mean_bias_outside", "suppressed_fraction")


def sweep_to_csv(rows: List[Dict]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    lines += [",".join(fmt_float(r[c]) for c in SWEEP_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"


def sweep_to_json(rows: List[Dict]) -> str:
    return "".join(json.dumps({c: round_sig(r[c]) for c in SWEEP_COLUMNS}) + "\n" for r in rows)
