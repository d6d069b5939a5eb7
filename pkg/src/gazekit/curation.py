"""Data-curation heuristics: structural scoring of candidate traces, grounding gate, difficulty filter."""

from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence

from .reward import Matcher, default_matcher
from .trace import ANSWER, PLAIN, Trace


@dataclass(frozen=True)
class StructureConfig:
    """Look-count score table. N_L >= 6 decays by ``decay_per_look`` from ``score_4_5``."""

    score_0: float = 0.0
    score_1: float = 1.0
    score_2_3: float = 2.0
    score_4_5: float = 1.5
    decay_per_look: float = 0.5
    think_bonus: float = 0.5


def look_score(n_looks: int, cfg: StructureConfig = StructureConfig()) -> float:
    if n_looks <= 0:
        return cfg.score_0
    if n_looks == 1:
        return cfg.score_1
    if n_looks <= 3:
        return cfg.score_2_3
    if n_looks <= 5:
        return cfg.score_4_5
    return max(0.0, cfg.score_4_5 - cfg.decay_per_look * (n_looks - 5))


def is_well_formed(t: Trace) -> bool:
    """Exactly one ANSWER, and nothing but whitespace after it."""
    kinds = [s.kind for s in t.segments if not (s.kind == PLAIN and not s.body.strip())]
    return kinds.count(ANSWER) == 1 and kinds[-1] == ANSWER


def structural_score(
    t: Trace, y_star: str, matcher: Matcher = default_matcher, cfg: StructureConfig = StructureConfig()
) -> Optional[float]:
    """Score a candidate trace, or return None to reject it (bad format or wrong answer)."""
    if not is_well_formed(t) or not matcher(t.answer, y_star):
        return None
    bonus = cfg.think_bonus if t.thinks else 0.0
    return look_score(len(t.looks), cfg) + bonus


@dataclass
class Candidate:
    trace: Trace
    score: Optional[float] = None

    @property
    def look_count(self) -> int:
        return len(self.trace.looks)


@dataclass
class CandidateSet:
    sample_id: str
    ground_truth: str
    candidates: List[Candidate] = field(default_factory=list)

    def score_all(self, matcher: Matcher = default_matcher, cfg: StructureConfig = StructureConfig()):
        for c in self.candidates:
            c.score = structural_score(c.trace, self.ground_truth, matcher, cfg)
        return self


def rank_candidates(cs) -> List[Candidate]:
    """Accepted candidates by descending score; ties go to fewer LOOKs, then input order.

    Takes a CandidateSet or a plain list of candidates. Rejected candidates
    (score None) are dropped.
    """
    cands = cs.candidates if isinstance(cs, CandidateSet) else list(cs)
    keyed = [(i, c) for i, c in enumerate(cands) if c.score is not None]
    keyed.sort(key=lambda ic: (-ic[1].score, ic[1].look_count, ic[0]))
    return [c for _, c in keyed]


# --------------------------------------------------------------------------
# grounding gate


class VerifierTransportError(RuntimeError):
    """The verifier could not be reached or returned garbage; not a verification verdict."""


# verifier(trace, look_number, look_segment) -> bool; look_number is 1-based
Verifier = Callable[[Trace, int, object], bool]
Refiner = Callable[[Trace, int], Trace]

ACCEPT = "accept"
REFINE = "refine"
REJECT = "reject"


@dataclass
class GateResult:
    decision: str
    trace: Trace
    look_index: Optional[int] = None
    refine_requests: List[int] = field(default_factory=list)


def check_grounding(t: Trace, verifier: Verifier) -> GateResult:
    """One verification pass: accept, or a refine request naming the first failing LOOK (1-based)."""
    for number, seg in enumerate(t.looks, start=1):
        try:
            ok = verifier(t, number, seg)
        except VerifierTransportError:
            raise
        except Exception as err:
            raise VerifierTransportError(f"verifier failed on LOOK #{number}: {err}") from err
        if not ok:
            return GateResult(REFINE, t, number)
    return GateResult(ACCEPT, t)


def grounding_gate(
    t: Trace, verifier: Verifier, retries: int = 0, refine: Optional[Refiner] = None
) -> GateResult:
    """Verify every LOOK, asking for refinement up to ``retries`` times before rejecting.

    ``refine(trace, look_number)`` returns the revised trace; without one the
    same trace is resubmitted, which suits scripted verifiers.
    """
    if retries < 0:
        raise ValueError("retries must be >= 0")
    requests: List[int] = []
    current = t
    while True:
        res = check_grounding(current, verifier)
        if res.decision == ACCEPT:
            return GateResult(ACCEPT, current, None, requests)
        if len(requests) >= retries:
            return GateResult(REJECT, current, res.look_index, requests)
        requests.append(res.look_index)
        if refine is not None:
            current = refine(current, res.look_index)


def first_grounded(ranked: Iterable[Candidate], verifier: Verifier, retries: int = 0, refine=None):
    """Walk ranked candidates and return the first gate-accepted result, or None."""
    for cand in ranked:
        res = grounding_gate(cand.trace, verifier, retries, refine)
        if res.decision == ACCEPT:
            return res
    return None


# --------------------------------------------------------------------------
# difficulty filter


@dataclass(frozen=True)
class DifficultyRecord:
    sample_id: str
    rollouts: int
    successes: int

    def __post_init__(self):
        if self.rollouts < 1:
            raise ValueError(f"{self.sample_id}: rollouts must be >= 1")
        if not 0 <= self.successes <= self.rollouts:
            raise ValueError(f"{self.sample_id}: successes must lie in [0, rollouts]")

    @property
    def success_rate(self) -> float:
        return self.successes / self.rollouts


def difficulty_filter(records: Sequence[DifficultyRecord], low: float = 0.0, high: float = 1.0) -> List[str]:
    """Ids of samples whose success rate lies strictly between ``low`` and ``high``."""
    if not 0.0 <= low < high <= 1.0:
        raise ValueError(f"need 0 <= low < high <= 1, got low={low}, high={high}")
    return [r.sample_id for r in records if low < r.success_rate < high]
