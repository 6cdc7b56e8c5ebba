"""Benchmark report validation and serialization."""
from __future__ import annotations

import csv
import io
import json

import jsonschema

from ..database import load_json_schema


def validate_report(report: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``report`` is malformed."""
    jsonschema.validate(report, load_json_schema("report.schema.json"))


def flatten(doc, prefix: str = "") -> list[tuple[str, object]]:
    """Dotted-path rows in a stable order; lists are indexed."""
    if isinstance(doc, dict):
        rows = []
        for key in sorted(doc):
            rows.extend(flatten(doc[key], f"{prefix}.{key}" if prefix else str(key)))
        return rows
    if isinstance(doc, (list, tuple)):
        rows = []
        for i, item in enumerate(doc):
            rows.extend(flatten(item, f"{prefix}[{i}]"))
        return rows
    return [(prefix, doc)]


def render(report: dict, fmt: str = "json") -> str:
    validate_report(report)
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(flatten(report))
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def write_report(report: dict, path: str | None, fmt: str = "json") -> str:
    text = render(report, fmt)
    if path and path != "-":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
