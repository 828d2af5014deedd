"""Trace post-processing: delimited event table plus rendered figures.

Takes a JSONL trace and produces three files next to each other: a CSV
with one row per event, a timeline scatter of events per enclave lane,
and a bar chart of event kind counts. Rendering is headless.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

CORE_FIELDS = ("seq", "kind", "enclave")
PLATFORM_LANE = "(platform)"


def read_trace(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _detail(record: dict) -> str:
    rest = {k: v for k, v in record.items() if k not in CORE_FIELDS}
    return json.dumps(rest, sort_keys=True, separators=(",", ":")) if rest else ""


def write_events_csv(records: list[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seq", "kind", "enclave", "detail"])
        for record in records:
            writer.writerow([record.get("seq", ""), record.get("kind", ""),
                             record.get("enclave", ""), _detail(record)])


def _lane(record: dict) -> str:
    return (record.get("enclave") or record.get("src")
            or record.get("requester") or PLATFORM_LANE)


def render_timeline(records: list[dict], path: str) -> None:
    lanes = []
    for record in records:
        lane = _lane(record)
        if lane not in lanes:
            lanes.append(lane)
    kinds = sorted({r.get("kind", "?") for r in records})
    cmap = plt.get_cmap("tab20")
    colors = {kind: cmap(i % 20) for i, kind in enumerate(kinds)}

    fig, ax = plt.subplots(figsize=(max(6, len(records) * 0.25),
                                    1 + 0.5 * len(lanes)))
    for record in records:
        kind = record.get("kind", "?")
        ax.scatter(record.get("seq", 0), lanes.index(_lane(record)),
                   color=colors[kind], s=60, zorder=3)
    ax.set_yticks(range(len(lanes)), lanes)
    ax.set_xlabel("event sequence")
    ax.set_title("run timeline")
    ax.grid(axis="x", linestyle=":", alpha=0.5)
    handles = [plt.Line2D([], [], marker="o", linestyle="", color=colors[k],
                          label=k) for k in kinds]
    ax.legend(handles=handles, loc="upper left", bbox_to_anchor=(1.01, 1),
              fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_kind_counts(records: list[dict], path: str) -> None:
    counts: dict[str, int] = {}
    for record in records:
        kind = record.get("kind", "?")
        counts[kind] = counts.get(kind, 0) + 1
    kinds = sorted(counts)
    fig, ax = plt.subplots(figsize=(max(5, len(kinds) * 0.8), 4))
    ax.bar(kinds, [counts[k] for k in kinds], color="tab:blue")
    ax.set_ylabel("events")
    ax.set_title("event kind counts")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(trace_path: str, out_dir: str | None = None) -> list[str]:
    """Produce the CSV and both figures; return the written paths."""
    records = read_trace(trace_path)
    out_dir = out_dir or (os.path.dirname(trace_path) or ".")
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(trace_path))[0]
    csv_path = os.path.join(out_dir, f"{stem}.events.csv")
    timeline_path = os.path.join(out_dir, f"{stem}.timeline.png")
    kinds_path = os.path.join(out_dir, f"{stem}.kinds.png")
    write_events_csv(records, csv_path)
    render_timeline(records, timeline_path)
    render_kind_counts(records, kinds_path)
    return [csv_path, timeline_path, kinds_path]
