"""Gaze-steered attention toolkit: bias fields, gaze traces and GRPO rewards."""

from .geometry import NormalizedBBox, TokenGrid, edge_distance, iou, is_geometrically_valid, make_grid
from .gazefield import GazeBiasField, GazeParams, bias_accumulated, bias_single, field_for_grid
from .attention import AttentionInput, GazeState, effective_field, gaze_step, modulated_scores
from .trace import Trace, parse_trace, serialize_trace, stream_events, trace_stats
from .reward import RewardConfig, advantages, grpo_loss, kl_schedule, score_completion

__version__ = "0.1.0"
