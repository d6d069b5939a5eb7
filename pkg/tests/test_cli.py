import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gazekit.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, caret_excerpt, main
from gazekit.config import load_config

DATA = Path(__file__).parent / "data"

BED_CHAIR = (
    "<THINK>I need to locate both the bed and the chair.</THINK>\n"
    '<LOOK at="bed" bbox=[0.00, 0.28, 0.52, 0.99]>large bed with brown headboard</LOOK>\n'
    '<LOOK at="chair" bbox=[0.64, 0.40, 0.74, 0.60]>black office-style chair with wheels</LOOK>\n'
    "<THINK>The chair is further to the right.</THINK>\n"
    "<ANSWER>right</ANSWER>\n"
)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(autouse=True)
def no_env_config(monkeypatch):
    monkeypatch.delenv("GAZEKIT_CONFIG", raising=False)


# --- score


def test_score_golden_byte_identical(capsys):
    code, out, err = run(capsys, "score", str(DATA / "golden_corpus.jsonl"))
    assert code == EXIT_OK
    assert out == (DATA / "golden_report.jsonl").read_text(encoding="utf-8")
    assert err.count("scored as worst case") == 7


def test_score_parallel_matches_serial(capsys):
    _, serial, _ = run(capsys, "score", str(DATA / "golden_corpus.jsonl"))
    code, parallel, _ = run(capsys, "score", str(DATA / "golden_corpus.jsonl"), "--jobs", "3")
    assert code == EXIT_OK and parallel == serial


def test_score_empty_corpus(capsys, tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert run(capsys, "score", str(p)) == (EXIT_OK, "", "")


def test_score_malformed_line_continues(capsys, tmp_path):
    good = {"id": "a", "ground_truth": "right", "trace": "<ANSWER>right</ANSWER>"}
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(good) + "\n{not json\n" + json.dumps(dict(good, id="b")) + "\n")
    code, out, err = run(capsys, "score", str(p))
    assert code == EXIT_INVALID
    assert ":2: malformed JSON" in err
    lines = [json.loads(l) for l in out.splitlines()]
    assert [l["line"] for l in lines] == [1, 3]


def test_score_unparseable_trace_warns(capsys, tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps({"id": "x", "ground_truth": "right", "trace": "<THINK>oops"}) + "\n")
    code, out, err = run(capsys, "score", str(p))
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["total"] == -1.0 and rep["parse_error"] == {"kind": "unclosed_tag", "offset": 0}
    assert "line 1" in err and "unclosed_tag" in err


def test_score_ground_truth_override(capsys, tmp_path):
    corpus = tmp_path / "c.jsonl"
    corpus.write_text(json.dumps({"id": "x", "ground_truth": "left", "trace": "<ANSWER>right</ANSWER>"}) + "\n")
    truth = tmp_path / "t.jsonl"
    truth.write_text(json.dumps({"id": "x", "ground_truth": "right"}) + "\n")
    _, out, _ = run(capsys, "score", str(corpus), "--ground-truth", str(truth))
    assert json.loads(out)["correct"] == 0.7


def test_score_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "score", str(tmp_path / "nope.jsonl"))
    assert code == EXIT_IO and "cannot read" in err


def test_score_out_file(capsys, tmp_path):
    dest = tmp_path / "report.jsonl"
    code, out, _ = run(capsys, "score", str(DATA / "golden_corpus.jsonl"), "--out", str(dest))
    assert code == EXIT_OK and out == ""
    assert dest.read_text() == (DATA / "golden_report.jsonl").read_text()


# --- biasfield


def test_biasfield_two_by_two(capsys):
    code, out, _ = run(capsys, "biasfield", "--grid", "2x2", "--box", "0,0,0.5,0.5")
    assert code == EXIT_OK
    assert out == "0,-2\n-2,-4\n"


@pytest.mark.parametrize("boxes", [[], ["--box", "0,0,1,1"]])
def test_biasfield_uniform_pgm(capsys, boxes):
    code, out, _ = run(capsys, "biasfield", "--grid", "3x4", "--format", "pgm", *boxes)
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0] == "P2" and lines[1].startswith("#") and lines[2].startswith("#")
    assert lines[3:5] == ["4 3", "255"]
    assert [l.split() for l in lines[5:]] == [["255"] * 4] * 3


def test_biasfield_pgm_values(capsys):
    _, out, _ = run(capsys, "biasfield", "--grid", "2x2", "--box", "0,0,0.5,0.5", "--format", "pgm")
    px = [l.split() for l in out.splitlines()[5:]]
    # exp(-2/4) * 255 = 154.67, exp(-1) * 255 = 93.81
    assert px == [["255", "155"], ["155", "94"]]


def test_biasfield_json(capsys):
    _, out, _ = run(capsys, "biasfield", "--grid", "2x2", "--box", "0,0,0.5,0.5", "--format", "json")
    doc = json.loads(out)
    assert doc["values"] == [[0.0, -2.0], [-2.0, -4.0]] and doc["rows"] == 2


@pytest.mark.parametrize("argv", [["--grid", "0x3"], ["--grid", "abc"], ["--box", "0.5,0,0.2,1"], ["--box", "1,2"]])
def test_biasfield_invalid(capsys, argv):
    code, _, err = run(capsys, "biasfield", *argv)
    assert code == EXIT_INVALID and "error" in err


# --- sweep


def test_sweep_table(capsys):
    code, out, _ = run(capsys, "sweep", "--grid", "8x8", "--box", "0.25,0.25,0.5,0.5", "--alphas", "0,4,16")
    assert code == EXIT_OK
    header, *rows = out.splitlines()
    assert header == "alpha_s,min_bias_outside,mean_bias_outside,suppressed_fraction"
    table = np.array([[float(v) for v in r.split(",")] for r in rows])
    assert list(table[:, 0]) == [0, 4, 16]
    assert table[0, 1] == table[0, 2] == table[0, 3] == 0
    assert np.all(np.diff(table[:, 3]) >= 0)


def test_sweep_rejects_negative_alpha(capsys):
    code, _, err = run(capsys, "sweep", "--box", "0,0,0.5,0.5", "--alphas", "1,-2")
    assert code == EXIT_INVALID and ">= 0" in err


def test_sweep_json(capsys):
    _, out, _ = run(capsys, "sweep", "--grid", "4x4", "--box", "0,0,0.5,0.5", "--alphas", "4,8", "--format", "json")
    a, b = (json.loads(l) for l in out.splitlines())
    assert b["min_bias_outside"] == 2 * a["min_bias_outside"]


# --- parse


def test_parse_bed_chair(capsys, tmp_path):
    p = tmp_path / "t.txt"
    p.write_text(BED_CHAIR, encoding="utf-8")
    code, out, _ = run(capsys, "parse", str(p))
    assert code == EXIT_OK
    assert 'answer: "right"' in out
    assert out.count(" look_open ") == 2 and out.count(" look_close ") == 2
    assert len([l for l in out.splitlines() if " THINK " in l]) == 2
    assert "look_count=2 valid_box_count=2" in out
    events = out.split("events:\n")[1].splitlines()
    assert events[-1].endswith("active=false boxes=2")
    assert any(l.strip().startswith('look_open at="bed"') and "active=true boxes=1" in l for l in events)


def test_parse_stdin_one_byte_chunks_matches_file(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text(BED_CHAIR + "日本語 é\n", encoding="utf-8")
    cmd = [sys.executable, "-m", "gazekit", "parse"]
    from_file = subprocess.run(cmd + [str(p)], capture_output=True, check=True).stdout
    piped = subprocess.run(cmd + ["-", "--chunk-size", "1"], input=p.read_bytes(),
                           capture_output=True, check=True).stdout
    assert piped == from_file and from_file


def test_parse_stdin_in_process(capsys, monkeypatch):
    monkeypatch.setattr(sys, "stdin", io.TextIOWrapper(io.BytesIO(BED_CHAIR.encode())))
    code, out, _ = run(capsys, "parse", "-", "--chunk-size", "3")
    assert code == EXIT_OK and 'answer: "right"' in out


def test_parse_malformed(capsys, tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text('<THINK>ok</THINK>\n<LOOK at="a" bbox=[0.1,0.2]>x</LOOK>\n', encoding="utf-8")
    code, out, err = run(capsys, "parse", str(p), "--chunk-size", "4")
    assert code == EXIT_INVALID and out == ""
    assert "malformed_bbox at byte 18" in err
    assert '  <LOOK at="a"' in err and "\n  ^" in err


def test_parse_missing_file(capsys, tmp_path):
    code, _, _ = run(capsys, "parse", str(tmp_path / "missing.txt"))
    assert code == EXIT_IO


def test_caret_excerpt_multibyte():
    text = "日本</THINK>"
    assert caret_excerpt(text, 6) == "  日本</THINK>\n    ^"


# --- config and help


def test_config_file_and_flags(capsys, tmp_path):
    cfg = tmp_path / "gk.cfg"
    cfg.write_text("alpha_s = 8\ngrid = 2x2  # small\n")
    _, out, _ = run(capsys, "biasfield", "--config", str(cfg), "--box", "0,0,0.5,0.5")
    assert out == "0,-4\n-4,-8\n"
    _, out, _ = run(capsys, "biasfield", "--config", str(cfg), "--alpha-s", "4", "--box", "0,0,0.5,0.5")
    assert out == "0,-2\n-2,-4\n"


def test_config_env_fallback(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "gk.cfg"
    cfg.write_text("sigma = 0.5\ngrid = 2x2\n")
    monkeypatch.setenv("GAZEKIT_CONFIG", str(cfg))
    _, out, _ = run(capsys, "biasfield", "--box", "0,0,0.5,0.5")
    assert out == "0,-0.5\n-0.5,-1\n"


def test_config_reward_overrides(tmp_path):
    cfg = tmp_path / "gk.cfg"
    cfg.write_text("w0 = 300\nformat_bonus = 0.2\n")
    c = load_config(cfg, env={})
    assert c.reward.w0 == 300 and c.reward.format_bonus == 0.2
    assert c.alpha_s == 4.0 and c.sigma == 0.25 and c.grid == (32, 32)


def test_config_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "biasfield", "--config", str(tmp_path / "none.cfg"))
    assert code == EXIT_IO


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for code in ("0  success", "3  I/O error", "4  validation failure"):
        assert code in out


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["biasfield", "--format", "tiff"])
    assert exc.value.code == 2


def test_outputs_deterministic(capsys):
    argv = ["sweep", "--box", "0.1,0.2,0.4,0.6", "--format", "json"]
    assert run(capsys, *argv) == run(capsys, *argv)
