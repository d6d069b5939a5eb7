"""Gaze-trace grammar: parse, serialize, stream and summarize reasoning traces.

Grammar::

    trace   := (plain | think | look)* answer? plain*
    think   := "<THINK>" text "</THINK>"
    look    := "<LOOK at=\"" target "\" bbox=[" num "," num "," num "," num "]>" text "</LOOK>"
    answer  := "<ANSWER>" text "</ANSWER>"

Whitespace is tolerated around ``=`` and inside the bracket list. There is
no escaping: the first closing tag of the right kind ends a block, so an
observation can never contain a literal ``</LOOK>``. Tags may not nest.

Error offsets are UTF-8 byte offsets into the source text.
"""

import math
import re
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Iterator, List, Optional, Tuple

from .geometry import NormalizedBBox, is_geometrically_valid, iou

THINK = "THINK"
LOOK = "LOOK"
ANSWER = "ANSWER"
PLAIN = "PLAIN"

Box = Tuple[float, float, float, float]


class TraceSyntaxError(ValueError):
    kind = "syntax"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.message = message
        self.offset = offset

    def __reduce__(self):
        # default exception pickling replays args, which no longer match __init__
        return type(self), (self.message, self.offset)


class UnclosedTagError(TraceSyntaxError):
    kind = "unclosed_tag"


class MalformedTagError(TraceSyntaxError):
    kind = "malformed_tag"


class MalformedBBoxError(TraceSyntaxError):
    kind = "malformed_bbox"


class NestedTagError(TraceSyntaxError):
    kind = "nested_tag"


class StrayCloseError(TraceSyntaxError):
    kind = "stray_close"


class AnswerOrderError(TraceSyntaxError):
    """A tag appears after the ANSWER block (including a second ANSWER)."""

    kind = "answer_order"


@dataclass(frozen=True)
class Segment:
    kind: str
    body: str = ""
    target: Optional[str] = None
    box: Optional[Box] = None
    offset: int = field(default=-1, compare=False)


@dataclass
class Trace:
    segments: List[Segment] = field(default_factory=list)

    @property
    def answer(self) -> Optional[str]:
        for seg in self.segments:
            if seg.kind == ANSWER:
                return seg.body
        return None

    @property
    def looks(self) -> List[Segment]:
        return [s for s in self.segments if s.kind == LOOK]

    @property
    def thinks(self) -> List[Segment]:
        return [s for s in self.segments if s.kind == THINK]


@dataclass(frozen=True)
class TraceEvent:
    kind: str  # think_open/close, look_open/close, answer_open/close, text
    text: str = ""
    target: Optional[str] = None
    box: Optional[Box] = None


# --------------------------------------------------------------------------
# batch parser

_TAG_RE = re.compile(r"<THINK>|</THINK>|<ANSWER>|</ANSWER>|</LOOK>|<LOOK(?![A-Za-z0-9_])")
_LOOK_HEADER_RE = re.compile(
    r'<LOOK\s+at\s*=\s*"([^"]*)"\s*bbox\s*=\s*\[([^\]]*)\]\s*>', re.ASCII
)
_NUM_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)")

_CLOSERS = {"</THINK>": THINK, "</ANSWER>": ANSWER, "</LOOK>": LOOK}
_OPENERS = {"<THINK>": THINK, "<ANSWER>": ANSWER}


def parse_bbox_list(content: str, offset: int) -> Box:
    """Parse the inside of a ``bbox=[...]`` list into four floats."""
    parts = content.split(",")
    if len(parts) != 4:
        raise MalformedBBoxError(f"bbox needs 4 numbers, got {len(parts)}", offset)
    out = []
    for part in parts:
        part = part.strip()
        if not _NUM_RE.fullmatch(part):
            raise MalformedBBoxError(f"bad bbox number {part!r}", offset)
        out.append(float(part))
    return tuple(out)


def parse_trace(text: str) -> Trace:
    """Parse a full trace; raises a TraceSyntaxError subclass on the first defect."""

    def byte_at(i):
        return len(text[:i].encode("utf-8"))

    segments = []
    pos = 0
    answered = False
    while True:
        m = _TAG_RE.search(text, pos)
        if m is None:
            if pos < len(text):
                segments.append(Segment(PLAIN, text[pos:], offset=byte_at(pos)))
            break
        if m.start() > pos:
            segments.append(Segment(PLAIN, text[pos:m.start()], offset=byte_at(pos)))
        tag, start = m.group(), m.start()
        if answered:
            raise AnswerOrderError(f"{tag} after the ANSWER block", byte_at(start))
        if tag in _CLOSERS:
            raise StrayCloseError(f"{tag} without a matching open tag", byte_at(start))

        if tag in _OPENERS:
            kind = _OPENERS[tag]
            body_start = m.end()
            target = box = None
        else:
            kind = LOOK
            h = _LOOK_HEADER_RE.match(text, start)
            if h is None:
                raise MalformedTagError("malformed LOOK tag", byte_at(start))
            target = h.group(1)
            box = parse_bbox_list(h.group(2), byte_at(start))
            body_start = h.end()

        close = _TAG_RE.search(text, body_start)
        if close is None:
            raise UnclosedTagError(f"<{kind}> is never closed", byte_at(start))
        if _CLOSERS.get(close.group()) != kind:
            if close.group() in _CLOSERS:
                raise StrayCloseError(f"{close.group()} inside <{kind}>", byte_at(close.start()))
            raise NestedTagError(f"{close.group()} inside <{kind}>", byte_at(close.start()))
        segments.append(Segment(kind, text[body_start:close.start()], target, box, byte_at(start)))
        if kind == ANSWER:
            answered = True
        pos = close.end()
    return Trace(segments)


def _fmt_coord(v: float) -> str:
    return f"{v:.4f}"


def serialize_segment(seg: Segment) -> str:
    if seg.kind == PLAIN:
        return seg.body
    if seg.kind == LOOK:
        coords = ", ".join(_fmt_coord(v) for v in seg.box)
        return f'<LOOK at="{seg.target}" bbox=[{coords}]>{seg.body}</LOOK>'
    return f"<{seg.kind}>{seg.body}</{seg.kind}>"


def serialize_trace(t: Trace) -> str:
    return "".join(serialize_segment(s) for s in t.segments)


def trace_events(t: Trace) -> List[TraceEvent]:
    """Event sequence implied by a parsed trace, with text coalesced per segment."""
    events = []
    for seg in t.segments:
        if seg.kind == PLAIN:
            if seg.body:
                events.append(TraceEvent("text", seg.body))
            continue
        tag = seg.kind.lower()
        if seg.kind == LOOK:
            events.append(TraceEvent("look_open", target=seg.target, box=seg.box))
        else:
            events.append(TraceEvent(f"{tag}_open"))
        if seg.body:
            events.append(TraceEvent("text", seg.body))
        events.append(TraceEvent(f"{tag}_close"))
    return events


def coalesce_events(events: Iterable[TraceEvent]) -> List[TraceEvent]:
    out: List[TraceEvent] = []
    for ev in events:
        if ev.kind == "text" and out and out[-1].kind == "text":
            out[-1] = TraceEvent("text", out[-1].text + ev.text)
        elif ev.kind != "text" or ev.text:
            out.append(ev)
    return out


# --------------------------------------------------------------------------
# incremental parser

_WS = " \t\n\r\f\v"
_IDENT = set("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_")
_FIXED_TAGS = ("<THINK>", "</THINK>", "<ANSWER>", "</ANSWER>", "</LOOK>")

_NEED_MORE = object()
_FAIL = object()


def _scan_look_header(buf: str, at_eof: bool):
    """Scan a LOOK opening tag at the start of ``buf`` (which begins with ``<LOOK``).

    Returns (end, target, bbox_content) on success, ``_FAIL`` if no
    continuation can complete the tag, or ``_NEED_MORE``.
    """
    n = len(buf)
    i = 5

    def more():
        return _FAIL if at_eof else _NEED_MORE

    def skip_ws(i):
        while i < n and buf[i] in _WS:
            i += 1
        return i

    def literal(i, word):
        for ch in word:
            if i >= n:
                return more(), i
            if buf[i] != ch:
                return _FAIL, i
            i += 1
        return None, i

    if i >= n:
        return more()
    if buf[i] not in _WS:
        return _FAIL
    i = skip_ws(i)
    for word in ("at", "=", '"'):
        i = skip_ws(i) if word != "at" else i
        if i >= n:
            return more()
        status, i = literal(i, word)
        if status is not None:
            return status
    tstart = i
    while i < n and buf[i] != '"':
        i += 1
    if i >= n:
        return more()
    target = buf[tstart:i]
    i = skip_ws(i + 1)
    for word in ("bbox", "=", "["):
        i = skip_ws(i) if word != "bbox" else i
        if i >= n:
            return more()
        status, i = literal(i, word)
        if status is not None:
            return status
    cstart = i
    while i < n and buf[i] != "]":
        i += 1
    if i >= n:
        return more()
    content = buf[cstart:i]
    i = skip_ws(i + 1)
    if i >= n:
        return more()
    if buf[i] != ">":
        return _FAIL
    return i + 1, target, content


class TraceStream:
    """Incremental trace parser.

    ``feed`` returns the events that became unambiguous with the new chunk.
    A tag split across chunks is held back until it is complete. Text deltas
    are not coalesced; use :func:`coalesce_events` for a canonical sequence.
    """

    def __init__(self):
        self._buf = ""
        self._byte = 0  # byte offset of self._buf[0]
        self._block: Optional[str] = None
        self._block_offset = 0
        self._answered = False
        self.closed = False

    @property
    def pending(self) -> bool:
        """True when buffered input or an open block awaits more text."""
        return bool(self._buf) or self._block is not None

    @property
    def block(self) -> Optional[str]:
        return self._block

    def _consume(self, k: int) -> str:
        piece = self._buf[:k]
        self._buf = self._buf[k:]
        self._byte += len(piece.encode("utf-8"))
        return piece

    def _match_tag(self, at_eof: bool):
        """Classify the ``<`` at buf[0]: (tag, length), None for literal text, or _NEED_MORE."""
        buf = self._buf
        for tag in _FIXED_TAGS:
            if buf.startswith(tag):
                return tag, len(tag)
            if len(buf) < len(tag) and tag.startswith(buf):
                return None if at_eof else _NEED_MORE
        if buf.startswith("<LOOK"):
            if len(buf) == 5:
                return ("<LOOK", 5) if at_eof else _NEED_MORE
            if buf[5] not in _IDENT:
                return "<LOOK", 5
            return None
        if len(buf) < 5 and "<LOOK".startswith(buf):
            return None if at_eof else _NEED_MORE
        return None

    def _step(self, at_eof: bool) -> List[TraceEvent]:
        events = []
        while self._buf:
            lt = self._buf.find("<")
            if lt != 0:
                end = len(self._buf) if lt < 0 else lt
                events.append(TraceEvent("text", self._consume(end)))
                continue
            m = self._match_tag(at_eof)
            if m is _NEED_MORE:
                break
            if m is None:
                events.append(TraceEvent("text", self._consume(1)))
                continue
            tag, length = m
            if self._block is None:
                if self._answered:
                    raise AnswerOrderError(f"{tag} after the ANSWER block", self._byte)
                if tag in _CLOSERS:
                    raise StrayCloseError(f"{tag} without a matching open tag", self._byte)
                if tag in _OPENERS:
                    self._block = _OPENERS[tag]
                    self._block_offset = self._byte
                    self._consume(length)
                    events.append(TraceEvent(f"{self._block.lower()}_open"))
                    continue
                res = _scan_look_header(self._buf, at_eof)
                if res is _NEED_MORE:
                    break
                if res is _FAIL:
                    raise MalformedTagError("malformed LOOK tag", self._byte)
                end, target, content = res
                box = parse_bbox_list(content, self._byte)
                self._block = LOOK
                self._block_offset = self._byte
                self._consume(end)
                events.append(TraceEvent("look_open", target=target, box=box))
            else:
                if _CLOSERS.get(tag) != self._block:
                    if tag in _CLOSERS:
                        raise StrayCloseError(f"{tag} inside <{self._block}>", self._byte)
                    raise NestedTagError(f"{tag} inside <{self._block}>", self._byte)
                self._consume(length)
                events.append(TraceEvent(f"{self._block.lower()}_close"))
                if self._block == ANSWER:
                    self._answered = True
                self._block = None
        return events

    def feed(self, chunk: str) -> List[TraceEvent]:
        if self.closed:
            raise RuntimeError("stream already closed")
        self._buf += chunk
        return self._step(at_eof=False)

    def close(self) -> List[TraceEvent]:
        """Flush at end of input; raises if the trace is left incomplete."""
        events = self._step(at_eof=True)
        self.closed = True
        if self._block is not None:
            raise UnclosedTagError(f"<{self._block}> is never closed", self._block_offset)
        return events


def stream_events(chunks: Iterable[str], final: bool = True) -> Iterator[TraceEvent]:
    """Yield events from a chunked trace as soon as each is unambiguous.

    With ``final=False`` the stream is left open at the end, so a trailing
    partial tag produces no events instead of an error.
    """
    stream = TraceStream()
    for chunk in chunks:
        yield from stream.feed(chunk)
    if final:
        yield from stream.close()


# --------------------------------------------------------------------------
# statistics


def count_words(t: Trace) -> int:
    """Whitespace-delimited words across all segment bodies; tag markup (incl. LOOK targets) excluded."""
    return sum(len(seg.body.split()) for seg in t.segments)


def _as_box(raw: Box) -> Optional[NormalizedBBox]:
    try:
        return NormalizedBBox(*raw)
    except ValueError:
        return None


def mean_pairwise_iou(boxes: List[Box]) -> float:
    """Mean IoU over ordered pairs i != j; 0 for fewer than two boxes.

    Pairs involving a malformed box contribute 0 but still count in the
    denominator.
    """
    n = len(boxes)
    if n < 2:
        return 0.0
    parsed = [_as_box(b) for b in boxes]
    # fsum keeps the result independent of summation order
    total = math.fsum(iou(a, b) for a, b in combinations(parsed, 2) if a is not None and b is not None)
    return 2.0 * total / (n * (n - 1))


@dataclass(frozen=True)
class TraceStats:
    look_count: int
    valid_box_count: int
    word_count: int
    has_think: bool
    has_answer: bool
    mean_pairwise_iou: float

    def as_dict(self) -> dict:
        return {
            "look_count": self.look_count,
            "valid_box_count": self.valid_box_count,
            "word_count": self.word_count,
            "has_think": self.has_think,
            "has_answer": self.has_answer,
            "mean_pairwise_iou": self.mean_pairwise_iou,
        }


def trace_stats(t: Trace, area_min: float = 0.005, area_max: float = 0.95) -> TraceStats:
    boxes = [s.box for s in t.looks]
    return TraceStats(
        look_count=len(boxes),
        valid_box_count=sum(is_geometrically_valid(b, area_min, area_max) for b in boxes),
        word_count=count_words(t),
        has_think=bool(t.thinks),
        has_answer=t.answer is not None,
        mean_pairwise_iou=mean_pairwise_iou(boxes),
    )
