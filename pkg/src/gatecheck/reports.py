"""Report envelopes and emission.

One experiment produces one JSON document: a header (tool version, resolved
config, seeds, timestamp) plus a "tables" map.  Every table is columnar
({"columns": [...], "rows": [...]}) so the same object renders to JSON,
sidecar CSV files, and aligned-column text.  The timestamp lives only in
the header, so two runs with the same config differ in nothing else.
"""

from __future__ import annotations

import csv
import json
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

__all__ = ["table", "envelope", "render_text", "write_report", "strip_timestamp"]


def table(columns, rows) -> dict:
    cols = list(columns)
    body = [list(r) for r in rows]
    for r in body:
        if len(r) != len(cols):
            raise ValueError(f"row width {len(r)} != column count {len(cols)}")
    return {"columns": cols, "rows": body}


def envelope(command: str, config: dict, seeds: dict, tables: dict,
             notes: list[str] | None = None) -> dict:
    return {
        "header": {
            "tool": "gatecheck",
            "version": __version__,
            "command": command,
            "config": config,
            "seeds": seeds,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        },
        "tables": tables,
        "notes": notes or [],
    }


def strip_timestamp(report: dict) -> dict:
    """Copy of the report without the header timestamp (for diffing runs)."""
    clone = json.loads(json.dumps(report))
    clone["header"].pop("timestamp", None)
    return clone


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def render_text(report: dict) -> str:
    """Aligned-column rendering of every table plus the notes."""
    lines = [f"gatecheck {report['header']['version']} :: {report['header']['command']}"]
    for name, tbl in report["tables"].items():
        lines.append("")
        lines.append(f"== {name} ==")
        cols = tbl["columns"]
        rows = [[_fmt(v) for v in row] for row in tbl["rows"]]
        widths = [max(len(str(c)), *(len(r[i]) for r in rows)) if rows else len(str(c))
                  for i, c in enumerate(cols)]
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(cols, widths)))
        for r in rows:
            lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    if report.get("notes"):
        lines.append("")
        lines.append("notes:")
        lines.extend(f"  - {n}" for n in report["notes"])
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir: str | Path, name: str,
                 formats=("json", "csv", "text")) -> list[Path]:
    """Write name.json, one CSV per table, and name.txt; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if "json" in formats:
        path = out / f"{name}.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    if "csv" in formats:
        for tbl_name, tbl in report["tables"].items():
            path = out / f"{name}__{tbl_name}.csv"
            with open(path, "w", encoding="utf-8", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(tbl["columns"])
                writer.writerows(tbl["rows"])
            written.append(path)
    if "text" in formats:
        path = out / f"{name}.txt"
        path.write_text(render_text(report), encoding="utf-8")
        written.append(path)
    return written
