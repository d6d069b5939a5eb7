"""GRPO reward for gaze traces: six-component total reward, advantages, loss, KL schedule."""

import math
import re
from dataclasses import dataclass, fields, replace
from typing import Callable, Dict, List, Optional, Sequence

from .geometry import is_geometrically_valid
from .trace import LOOK, PLAIN, Trace, TraceSyntaxError, parse_trace, trace_stats

ADV_EPS = 1e-8


@dataclass(frozen=True)
class RewardConfig:
    correct_with_gaze: float = 1.5
    correct_no_gaze: float = 0.7
    wrong_with_gaze: float = -0.2
    wrong_no_gaze: float = -0.5
    no_answer: float = -1.0
    format_bonus: float = 0.15
    bbox_bonus: float = 0.10
    overlap_coeff: float = 0.15
    excess_penalty: float = 0.15
    excess_threshold: int = 11
    length_coeff: float = 0.05
    w0: int = 500
    area_min: float = 0.005
    area_max: float = 0.95
    kl_start: float = 0.04
    kl_end: float = 0.01
    kl_decay_fraction: float = 0.5

    @classmethod
    def from_mapping(cls, values: Dict[str, object]) -> "RewardConfig":
        """Override defaults from a flat mapping; unknown keys are ignored."""
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key in known:
                kwargs[key] = int(value) if known[key] in (int, "int") else float(value)
        return replace(cls(), **kwargs)


@dataclass(frozen=True)
class RewardBreakdown:
    correct: float
    format: float
    bbox: float
    overlap: float
    excess: float
    length: float
    gaze_indicator: bool

    @property
    def total(self) -> float:
        return self.correct + self.format + self.bbox + self.overlap + self.excess + self.length


# --------------------------------------------------------------------------
# answer matching

Matcher = Callable[[str, str], bool]

_TRAILING_PUNCT = ".!?,;:"


def normalize_answer(s: str) -> str:
    s = " ".join(s.lower().split())
    return s.rstrip(_TRAILING_PUNCT).strip()


def _as_number(s: str) -> Optional[float]:
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def default_matcher(predicted: str, truth: str) -> bool:
    """Normalized exact match, with numeric answers compared at 1e-6 tolerance."""
    a, b = normalize_answer(predicted), normalize_answer(truth)
    na, nb = _as_number(a), _as_number(b)
    if na is not None and nb is not None:
        return abs(na - nb) <= 1e-6
    return a == b


# --------------------------------------------------------------------------
# components


def gaze_indicator(t: Trace, cfg: RewardConfig = RewardConfig()) -> bool:
    return any(
        is_geometrically_valid(s.box, cfg.area_min, cfg.area_max) and s.body.strip()
        for s in t.looks
    )


def correctness_reward(
    t: Trace, y_star: str, matcher: Matcher = default_matcher, cfg: RewardConfig = RewardConfig()
) -> float:
    if t.answer is None:
        return cfg.no_answer
    gaze = gaze_indicator(t, cfg)
    if matcher(t.answer, y_star):
        return cfg.correct_with_gaze if gaze else cfg.correct_no_gaze
    return cfg.wrong_with_gaze if gaze else cfg.wrong_no_gaze


def has_full_format(t: Trace) -> bool:
    """At least one THINK and one LOOK, and exactly one ANSWER with only whitespace after it.

    Nesting and ordering are already enforced by the parser.
    """
    kinds = [s.kind for s in t.segments if not (s.kind == PLAIN and not s.body.strip())]
    return (
        "THINK" in kinds
        and LOOK in kinds
        and kinds.count("ANSWER") == 1
        and kinds[-1] == "ANSWER"
    )


def length_penalty(words: int, cfg: RewardConfig = RewardConfig()) -> float:
    return -cfg.length_coeff * max(0, words - cfg.w0) / cfg.w0


def score_completion(
    t: Trace, y_star: str, matcher: Matcher = default_matcher, cfg: RewardConfig = RewardConfig()
) -> RewardBreakdown:
    stats = trace_stats(t, cfg.area_min, cfg.area_max)
    n_looks = stats.look_count
    return RewardBreakdown(
        correct=correctness_reward(t, y_star, matcher, cfg),
        format=cfg.format_bonus if has_full_format(t) else 0.0,
        bbox=cfg.bbox_bonus * stats.valid_box_count / n_looks if n_looks else 0.0,
        overlap=-cfg.overlap_coeff * stats.mean_pairwise_iou,
        excess=-cfg.excess_penalty if n_looks >= cfg.excess_threshold else 0.0,
        length=length_penalty(stats.word_count, cfg),
        gaze_indicator=gaze_indicator(t, cfg),
    )


def worst_case_breakdown(cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Score for a trace that does not parse: no answer, nothing else credited."""
    return RewardBreakdown(cfg.no_answer, 0.0, 0.0, 0.0, 0.0, 0.0, False)


def score_text(
    text: str, y_star: str, matcher: Matcher = default_matcher, cfg: RewardConfig = RewardConfig()
):
    """Parse and score raw completion text.

    Returns ``(breakdown, trace_or_None, error_or_None)``.
    """
    try:
        t = parse_trace(text)
    except TraceSyntaxError as err:
        return worst_case_breakdown(cfg), None, err
    return score_completion(t, y_star, matcher, cfg), t, None


# --------------------------------------------------------------------------
# GRPO


def advantages(rewards: Sequence[float], eps: float = ADV_EPS) -> List[float]:
    """Group-relative advantages (R_i - mean) / (population std + eps)."""
    g = len(rewards)
    if g < 2:
        raise ValueError(f"advantages need a group of at least 2, got {g}")
    if max(rewards) == min(rewards):
        # sigma is exactly 0; fsum(r)/g may not round back to r, which eps would amplify
        return [0.0] * g
    mu = math.fsum(rewards) / g
    sigma = math.sqrt(math.fsum((r - mu) ** 2 for r in rewards) / g)
    return [(r - mu) / (sigma + eps) for r in rewards]


def grpo_loss(log_probs: Sequence[float], advs: Sequence[float], kl_value: float, beta: float) -> float:
    if len(log_probs) != len(advs):
        raise ValueError(f"length mismatch: {len(log_probs)} log-probs vs {len(advs)} advantages")
    if not log_probs:
        raise ValueError("empty group")
    if kl_value < 0:
        raise ValueError("kl_value must be >= 0")
    policy = -math.fsum(a * lp for a, lp in zip(advs, log_probs)) / len(log_probs)
    return policy + beta * kl_value


def kl_schedule(step: int, total_steps: int, cfg: RewardConfig = RewardConfig()) -> float:
    """KL coefficient: linear decay start->end over the first part of training, then flat."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    horizon = cfg.kl_decay_fraction * total_steps
    if step >= horizon:
        return cfg.kl_end
    frac = step / horizon
    return cfg.kl_start * (1.0 - frac) + cfg.kl_end * frac
