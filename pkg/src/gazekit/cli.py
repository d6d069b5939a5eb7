"""gazekit command line: score corpora, export bias fields, sweep alpha_s, inspect traces."""

import argparse
import codecs
import json
import sys
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from typing import Iterable, List, Optional, Tuple

from . import export
from .attention import GazeState, StreamOrderError, gaze_step
from .config import CliConfig, load_config, parse_grid
from .gazefield import GazeParams, field_for_grid
from .geometry import NormalizedBBox, TokenGrid
from .reward import RewardConfig, advantages, default_matcher, score_text
from .trace import (
    LOOK,
    TraceStream,
    TraceSyntaxError,
    coalesce_events,
    parse_trace,
    trace_stats,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INVALID = 4

EPILOG = """\
exit status:
  0  success
  2  bad command-line usage
  3  I/O error (unreadable input, unwritable output)
  4  validation failure (malformed JSONL line, trace parse error, bad box/grid)
"""

COMPONENTS = ("correct", "format", "bbox", "overlap", "excess", "length")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _warn(msg: str):
    print(f"gazekit: warning: {msg}", file=sys.stderr)


# --------------------------------------------------------------------------
# score


def read_jsonl(path: str) -> Tuple[List[Tuple[int, dict]], List[str]]:
    """Return (line_number, record) pairs plus warnings for lines that fail to decode."""
    records, warnings = [], []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as err:
                    warnings.append(f"{path}:{lineno}: malformed JSON ({err.msg})")
                    continue
                if not isinstance(rec, dict):
                    warnings.append(f"{path}:{lineno}: record is not a JSON object")
                    continue
                records.append((lineno, rec))
    except OSError as err:
        raise CliError(f"cannot read {path}: {err.strerror or err}", EXIT_IO) from err
    return records, warnings


def _score_one(args):
    text, y_star, reward_cfg = args
    breakdown, trace, err = score_text(text, y_star, default_matcher, reward_cfg)
    stats = trace_stats(trace, reward_cfg.area_min, reward_cfg.area_max).as_dict() if trace else None
    return breakdown, stats, err


def score_records(records, reward_cfg: RewardConfig = RewardConfig(), jobs: int = 1):
    """Score (line, record) pairs; returns report dicts (input order) and warnings."""
    warnings = []
    work, meta = [], []
    for lineno, rec in records:
        text, y_star = rec.get("trace"), rec.get("ground_truth")
        if not isinstance(text, str) or y_star is None:
            warnings.append(f"line {lineno}: record needs string 'trace' and 'ground_truth'")
            continue
        work.append((text, str(y_star), reward_cfg))
        meta.append((lineno, rec))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_score_one, work, chunksize=16))
    else:
        results = [_score_one(w) for w in work]

    reports = []
    for (lineno, rec), (bd, stats, err) in zip(meta, results):
        if err is not None:
            warnings.append(f"line {lineno}: trace does not parse ({err.kind} at byte {err.offset}); scored as worst case")
        report = OrderedDict()
        report["id"] = rec.get("id")
        report["line"] = lineno
        for name in COMPONENTS:
            report[name] = getattr(bd, name)
        report["total"] = bd.total
        report["gaze_indicator"] = bd.gaze_indicator
        report["trace_stats"] = stats
        report["parse_error"] = None if err is None else {"kind": err.kind, "offset": err.offset}
        reports.append(report)
    return reports, warnings


def group_summaries(reports) -> List[dict]:
    groups = OrderedDict()
    for rep in reports:
        groups.setdefault(rep["id"], []).append(rep)
    out = []
    for gid, members in groups.items():
        if len(members) < 2:
            continue
        rewards = [m["total"] for m in members]
        out.append(OrderedDict([
            ("group", gid),
            ("lines", [m["line"] for m in members]),
            ("rewards", rewards),
            ("advantages", advantages(rewards)),
        ]))
    return out


def _round_floats(obj):
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, float):
        return export.round_sig(obj)
    if isinstance(obj, dict):
        return OrderedDict((k, _round_floats(v)) for k, v in obj.items())
    if isinstance(obj, list):
        return [_round_floats(v) for v in obj]
    return obj


def render_report(reports, groups) -> str:
    return "".join(json.dumps(_round_floats(r)) + "\n" for r in list(reports) + list(groups))


def cmd_score(args, cfg: CliConfig) -> int:
    records, warnings = read_jsonl(args.corpus)
    bad_lines = len(warnings)
    if args.ground_truth:
        truth_rows, gt_warn = read_jsonl(args.ground_truth)
        warnings += gt_warn
        bad_lines += len(gt_warn)
        truth = {str(r.get("id")): r.get("ground_truth") for _, r in truth_rows}
        for _, rec in records:
            if str(rec.get("id")) in truth:
                rec["ground_truth"] = truth[str(rec.get("id"))]
    reports, score_warn = score_records(records, cfg.reward, args.jobs)
    bad_lines += sum(1 for w in score_warn if "needs string" in w)
    for w in warnings + score_warn:
        _warn(w)
    _write(args.out, render_report(reports, group_summaries(reports)))
    return EXIT_INVALID if bad_lines else EXIT_OK


# --------------------------------------------------------------------------
# biasfield / sweep


def parse_box(spec: str) -> NormalizedBBox:
    try:
        coords = [float(v) for v in spec.replace("[", "").replace("]", "").split(",")]
        return NormalizedBBox.from_raw(coords)
    except ValueError as err:
        raise CliError(f"bad box {spec!r}: {err}", EXIT_INVALID) from err


def _grid(cfg: CliConfig) -> TokenGrid:
    return TokenGrid(*cfg.grid)


def cmd_biasfield(args, cfg: CliConfig) -> int:
    boxes = [parse_box(b) for b in args.box]
    gaze = field_for_grid(_grid(cfg), boxes, cfg.gaze)
    fmt = cfg.fmt or "csv"
    writers = {"csv": export.field_to_csv, "pgm": export.field_to_pgm, "json": export.field_to_json}
    _write(args.out, writers[fmt](gaze))
    return EXIT_OK


def cmd_sweep(args, cfg: CliConfig) -> int:
    boxes = [parse_box(b) for b in args.box]
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
        rows = export.sweep(_grid(cfg), boxes, alphas, cfg.sigma)
    except ValueError as err:
        raise CliError(str(err), EXIT_INVALID) from err
    fmt = cfg.fmt or "csv"
    _write(args.out, export.sweep_to_json(rows) if fmt == "json" else export.sweep_to_csv(rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# parse


def _read_chunks(path: str, chunk_size: int) -> Iterable[str]:
    """Yield decoded text chunks from a file (or stdin for ``-``) of ``chunk_size`` bytes."""
    decoder = codecs.getincrementaldecoder("utf-8")()
    fh = sys.stdin.buffer if path == "-" else open(path, "rb")
    try:
        while True:
            raw = fh.read(chunk_size)
            if not raw:
                break
            text = decoder.decode(raw)
            if text:
                yield text
        tail = decoder.decode(b"", final=True)
        if tail:
            yield tail
    finally:
        if fh is not sys.stdin.buffer:
            fh.close()


def caret_excerpt(text: str, byte_offset: int) -> str:
    data = text.encode("utf-8")
    byte_offset = min(byte_offset, len(data))
    start = data.rfind(b"\n", 0, byte_offset) + 1
    end = data.find(b"\n", byte_offset)
    end = len(data) if end < 0 else end
    line = data[start:end].decode("utf-8", errors="replace")
    col = len(data[start:byte_offset].decode("utf-8", errors="replace"))
    return f"  {line}\n  {' ' * col}^"


def _q(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


def _box_str(box) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in box) + "]"


def render_parse_dump(text: str, events, params: GazeParams) -> str:
    trace = parse_trace(text)
    out = ["segments:"]
    for i, seg in enumerate(trace.segments):
        line = f"  [{i}] {seg.kind:<6} @{seg.offset}"
        if seg.kind == LOOK:
            line += f" at={_q(seg.target)} bbox={_box_str(seg.box)}"
        out.append(line + f" body={_q(seg.body)}")
    out.append(f"answer: {_q(trace.answer) if trace.answer is not None else 'none'}")
    stats = trace_stats(trace)
    out.append("stats: " + " ".join(
        f"{k}={export.fmt_float(v) if isinstance(v, float) else json.dumps(v)}"
        for k, v in stats.as_dict().items()
    ))
    out.append("events:")
    state = GazeState(params=params)
    for ev in events:
        state = gaze_step(state, ev)
        desc = ev.kind
        if ev.kind == "look_open":
            desc += f" at={_q(ev.target)} bbox={_box_str(ev.box)}"
        elif ev.kind == "text":
            desc += f" {_q(ev.text)}"
        out.append(f"  {desc} active={'true' if state.active else 'false'} boxes={len(state.boxes)}")
    return "\n".join(out) + "\n"


def cmd_parse(args, cfg: CliConfig) -> int:
    stream = TraceStream()
    events, pieces = [], []
    try:
        chunks = _read_chunks(args.trace, args.chunk_size)
        try:
            for chunk in chunks:
                pieces.append(chunk)
                events += stream.feed(chunk)
            events += stream.close()
        except TraceSyntaxError as err:
            for chunk in chunks:
                pieces.append(chunk)
            text = "".join(pieces)
            print(f"gazekit: parse error: {err.kind} at byte {err.offset}: {err.message}", file=sys.stderr)
            print(caret_excerpt(text, err.offset), file=sys.stderr)
            return EXIT_INVALID
    except OSError as err:
        raise CliError(f"cannot read {args.trace}: {err.strerror or err}", EXIT_IO) from err
    except UnicodeDecodeError as err:
        raise CliError(f"{args.trace} is not valid UTF-8: {err}", EXIT_INVALID) from err
    try:
        dump = render_parse_dump("".join(pieces), coalesce_events(events), cfg.gaze)
    except StreamOrderError as err:
        raise CliError(str(err), EXIT_INVALID) from err
    _write(args.out, dump)
    return EXIT_OK


# --------------------------------------------------------------------------
# plumbing


def _write(path: Optional[str], text: str):
    if not path or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as err:
        raise CliError(f"cannot write {path}: {err.strerror or err}", EXIT_IO) from err


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--alpha-s", type=float, help="maximum suppression strength (default 4)")
    common.add_argument("--sigma", type=float, help="spatial falloff in normalized units (default 0.25)")
    common.add_argument("--grid", help="token grid as ROWSxCOLS (default 32x32)")
    common.add_argument("--config", help="flat key=value config file (fallback: $GAZEKIT_CONFIG)")
    common.add_argument("--format", choices=("json", "csv", "pgm"), help="output format")
    common.add_argument("--out", help="output path (default stdout)")

    parser = argparse.ArgumentParser(
        prog="gazekit",
        description="Gaze-trace parsing, plateau suppression bias fields and GRPO reward scoring.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", parents=[common], help="score a JSONL trace corpus", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("corpus", help="JSONL with {id, question, ground_truth, trace}")
    p.add_argument("--ground-truth", help="optional JSONL {id, ground_truth} overriding corpus answers")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (output order is unchanged)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("biasfield", parents=[common], help="export a bias field over the token grid",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--box", action="append", default=[], help="x1,y1,x2,y2 (repeatable)")
    p.set_defaults(func=cmd_biasfield)

    p = sub.add_parser("sweep", parents=[common], help="summarize fields across alpha_s values",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--box", action="append", default=[], help="x1,y1,x2,y2 (repeatable)")
    p.add_argument("--alphas", default="0,1,2,4,8,16,20", help="comma-separated alpha_s values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("parse", parents=[common], help="dump segments, stats and gaze events of a trace",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("trace", help="trace text file, or - for stdin")
    p.add_argument("--chunk-size", type=int, default=65536, help="bytes per read when streaming")
    p.set_defaults(func=cmd_parse)
    return parser


def resolve_config(args) -> CliConfig:
    cfg = load_config(args.config)
    if args.alpha_s is not None:
        cfg.alpha_s = args.alpha_s
    if args.sigma is not None:
        cfg.sigma = args.sigma
    if args.grid is not None:
        cfg.grid = parse_grid(args.grid)
    if args.format is not None:
        cfg.fmt = args.format
    cfg.gaze  # validates alpha_s / sigma
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        try:
            cfg = resolve_config(args)
        except OSError as err:
            raise CliError(f"cannot read config: {err}", EXIT_IO) from err
        except ValueError as err:
            raise CliError(str(err), EXIT_INVALID) from err
        if args.command in ("score", "parse") and cfg.fmt not in (None, "json"):
            raise CliError(f"{args.command} only writes json/text output", EXIT_USAGE)
        if args.command == "sweep" and cfg.fmt == "pgm":
            raise CliError("sweep supports csv or json", EXIT_USAGE)
        return args.func(args, cfg)
    except CliError as err:
        print(f"gazekit: error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
