"""Reference attention kernel with gaze bias, and the per-stream gaze state machine.

Only text-origin queries see the bias, and only on visual keys:

    s~(q, k_i) = q.k_i / sqrt(d) + 1_text(q) * beta_i
"""

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from .gazefield import GazeBiasField, GazeParams, field_for_grid, zero_field
from .geometry import NormalizedBBox, TokenGrid
from .trace import TraceEvent

TEXT_KEY = -1


class StreamOrderError(RuntimeError):
    """Gaze events arrived in an order the LOOK lifecycle does not allow."""


@dataclass
class AttentionInput:
    """Toy single-head attention problem.

    ``key_tokens[j]`` is the visual token index of key j in the backing grid,
    or ``TEXT_KEY`` for a text key.
    """

    queries: np.ndarray
    query_is_text: np.ndarray
    keys: np.ndarray
    key_tokens: np.ndarray

    def __post_init__(self):
        self.queries = np.atleast_2d(np.asarray(self.queries, dtype=np.float64))
        self.keys = np.atleast_2d(np.asarray(self.keys, dtype=np.float64))
        self.query_is_text = np.asarray(self.query_is_text, dtype=bool).reshape(-1)
        self.key_tokens = np.asarray(self.key_tokens, dtype=np.int64).reshape(-1)
        if self.queries.shape[1] != self.keys.shape[1] or self.queries.shape[1] < 1:
            raise ValueError(
                f"query dim {self.queries.shape[1]} and key dim {self.keys.shape[1]} must match and be >= 1"
            )
        if len(self.query_is_text) != len(self.queries):
            raise ValueError("one origin flag per query required")
        if len(self.key_tokens) != len(self.keys):
            raise ValueError("one token tag per key required")

    @property
    def head_dim(self) -> int:
        return self.queries.shape[1]

    @property
    def visual_keys(self) -> np.ndarray:
        return self.key_tokens != TEXT_KEY


def raw_score(q, k, d=None) -> float:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 1:
        raise ValueError(f"dimension mismatch: {q.shape} vs {k.shape}")
    d = q.shape[0] if d is None else d
    if d != q.shape[0]:
        raise ValueError(f"head_dim {d} does not match vector size {q.shape[0]}")
    return float(q @ k) / np.sqrt(d)


def raw_scores(inp: AttentionInput) -> np.ndarray:
    return inp.queries @ inp.keys.T / np.sqrt(inp.head_dim)


def key_bias(inp: AttentionInput, gaze: GazeBiasField) -> np.ndarray:
    """Bias per key: the field value for visual keys, 0 for text keys."""
    vis = inp.visual_keys
    idx = inp.key_tokens[vis]
    if idx.size and (idx.min() < 0 or idx.max() >= len(gaze.values)):
        raise ValueError("visual key index outside the field's token grid")
    bias = np.zeros(len(inp.key_tokens))
    bias[vis] = gaze.values[idx]
    return bias


def modulated_scores(inp: AttentionInput, gaze: GazeBiasField) -> np.ndarray:
    scores = raw_scores(inp)
    bias = key_bias(inp, gaze)
    # rows/columns that receive no bias are left untouched bit for bit
    rows = np.flatnonzero(inp.query_is_text)
    cols = np.flatnonzero(inp.visual_keys)
    scores[np.ix_(rows, cols)] += bias[cols]
    return scores


def attention_weights(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax."""
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def bias_jacobian(inp: AttentionInput, gaze: GazeBiasField) -> np.ndarray:
    """d weights[q, j] / d bias[k] as an (n_queries, n_keys, n_keys) array.

    ``bias[k]`` is the additive bias on key k; it only reaches text queries
    and visual keys, so the remaining slices are zero.
    """
    w = attention_weights(modulated_scores(inp, gaze))
    jac = np.einsum("qj,jk->qjk", w, np.eye(w.shape[1])) - np.einsum("qj,qk->qjk", w, w)
    jac[~inp.query_is_text] = 0.0
    jac[:, :, ~inp.visual_keys] = 0.0
    return jac


def biased_attention(inp: AttentionInput, gaze: GazeBiasField) -> np.ndarray:
    return attention_weights(modulated_scores(inp, gaze))


# --------------------------------------------------------------------------
# gaze lifecycle


@dataclass(frozen=True)
class GazeState:
    active: bool = False
    boxes: Tuple[NormalizedBBox, ...] = ()
    params: GazeParams = field(default_factory=GazeParams)
    looks_opened: int = 0
    looks_closed: int = 0


def gaze_step(state: GazeState, event: TraceEvent) -> GazeState:
    """Advance the gaze state by one trace event.

    A LOOK opens the gaze and adds its box to the accumulated set; the
    closing tag lifts the bias but keeps the boxes. A box that is not a
    well-formed normalized box still opens the gaze but is not accumulated.
    """
    if event.kind == "look_open":
        if state.active:
            raise StreamOrderError("LOOK opened while another LOOK is active")
        boxes = state.boxes
        try:
            boxes = boxes + (NormalizedBBox(*event.box),)
        except (TypeError, ValueError):
            pass
        return GazeState(True, boxes, state.params, state.looks_opened + 1, state.looks_closed)
    if event.kind == "look_close":
        if not state.active:
            raise StreamOrderError("</LOOK> without an active LOOK")
        return GazeState(False, state.boxes, state.params, state.looks_opened, state.looks_closed + 1)
    return state


def replay(events: Sequence[TraceEvent], state: GazeState = GazeState()):
    """Run events through gaze_step, returning the list of successive states."""
    states = []
    for ev in events:
        state = gaze_step(state, ev)
        states.append(state)
    return states


def effective_field(state: GazeState, grid: TokenGrid) -> GazeBiasField:
    if not state.active:
        return zero_field(grid, state.params)
    return field_for_grid(grid, state.boxes, state.params)
