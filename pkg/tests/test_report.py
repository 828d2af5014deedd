"""Report rendering: CSV contents and figure files."""

import csv
import json
from pathlib import Path

from xine.report import read_trace, render_report, write_events_csv

SAMPLE = [
    {"seq": 0, "kind": "boot", "ok": True},
    {"seq": 1, "kind": "wakeup", "enclave": "ae1", "resumed": False},
    {"seq": 2, "kind": "dma-verdict", "src": "ae1", "dst": "ae2",
     "verdict": "granted", "length": 64},
    {"seq": 3, "kind": "exit", "enclave": "ae1"},
]


def write_sample(tmp_path) -> Path:
    trace = tmp_path / "sample.jsonl"
    with open(trace, "w") as fh:
        for record in SAMPLE:
            fh.write(json.dumps(record) + "\n")
    return trace


def test_read_trace_skips_blank_lines(tmp_path):
    trace = tmp_path / "t.jsonl"
    trace.write_text('{"seq":0,"kind":"boot"}\n\n{"seq":1,"kind":"exit"}\n')
    assert len(read_trace(str(trace))) == 2


def test_events_csv_shape(tmp_path):
    path = tmp_path / "events.csv"
    write_events_csv(SAMPLE, str(path))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["seq", "kind", "enclave", "detail"]
    assert len(rows) == 1 + len(SAMPLE)
    assert rows[2][1] == "wakeup"
    assert rows[2][2] == "ae1"
    # Non-core attributes end up in the detail column as compact JSON.
    assert json.loads(rows[3][3])["verdict"] == "granted"
    assert rows[1][2] == ""


def test_render_report_writes_all_outputs(tmp_path):
    trace = write_sample(tmp_path)
    out_dir = tmp_path / "out"
    paths = render_report(str(trace), str(out_dir))
    assert [Path(p).name for p in paths] == [
        "sample.events.csv", "sample.timeline.png", "sample.kinds.png"]
    for p in paths:
        assert Path(p).stat().st_size > 0
    for p in paths[1:]:
        assert Path(p).read_bytes()[:4] == b"\x89PNG"


def test_render_report_defaults_next_to_trace(tmp_path):
    trace = write_sample(tmp_path)
    paths = render_report(str(trace))
    assert all(Path(p).parent == tmp_path for p in paths)


def test_empty_trace_still_renders(tmp_path):
    trace = tmp_path / "empty.jsonl"
    trace.write_text("")
    paths = render_report(str(trace), str(tmp_path / "out"))
    assert all(Path(p).exists() for p in paths)
