"""Rendering and serialization of evaluation reports.

Scores are ratios in [0, 1] internally and are rendered as percentages with
one decimal. The table layout is: OA, mean dIoU, then per-class dIoU in the
order forest, buildings, hydrography, roads.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping, Sequence

from .corpus import NUM_CLASSES, ClassId
from .errors import EmptyAggregateError
from .metrics import MetricReport

TABLE_CLASS_ORDER = (ClassId.FOREST, ClassId.BUILDINGS, ClassId.HYDROGRAPHY, ClassId.ROADS)


def format_percent(ratio: float) -> str:
    """Render a [0, 1] ratio as a percentage with one decimal ('85.3')."""
    return f"{100.0 * ratio:.1f}"


def report_to_dict(report: MetricReport, label: str | None = None) -> dict[str, Any]:
    """Flatten a report into JSON-friendly keys (ratios, not percentages)."""
    out: dict[str, Any] = {}
    if label is not None:
        out["label"] = label
    per_class = report.per_class_diou
    out.update(
        {
            "oa": report.overall_accuracy,
            "mean_diou": report.mean_diou,
            "per_class_diou": {
                ClassId(i).name.lower(): float(per_class[i]) for i in range(report.num_classes)
            }
            if report.num_classes == NUM_CLASSES
            else {str(i): float(per_class[i]) for i in range(report.num_classes)},
            "counts": report.to_dict(),
        }
    )
    return out


def report_from_dict(raw: Mapping[str, Any]) -> MetricReport:
    return MetricReport.from_dict(raw["counts"])


def save_json(obj: Any, path: Path | str) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def load_json(path: Path | str) -> Any:
    return json.loads(Path(path).read_text())


def report_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """Format labelled reports as an aligned-column table (percent, 1 decimal)."""
    if not rows:
        raise EmptyAggregateError("report table needs at least one report")
    for _, rep in rows:
        if rep.num_classes != NUM_CLASSES:
            raise ValueError(
                f"report table requires the {NUM_CLASSES}-class taxonomy, got {rep.num_classes}"
            )
    headers = ["", "OA", "Mean dIoU"] + [c.name.lower() for c in TABLE_CLASS_ORDER]
    body: list[list[str]] = []
    for label, rep in rows:
        per_class = rep.per_class_diou
        cells = [label, format_percent(rep.overall_accuracy), format_percent(rep.mean_diou)]
        cells += [format_percent(float(per_class[int(c)])) for c in TABLE_CLASS_ORDER]
        body.append(cells)
    widths = [max(len(r[i]) for r in [headers, *body]) for i in range(len(headers))]
    lines = []
    for r in [headers, *body]:
        first = r[0].ljust(widths[0])
        rest = "  ".join(cell.rjust(w) for cell, w in zip(r[1:], widths[1:]))
        lines.append((first + "  " + rest).rstrip())
    return "\n".join(lines) + "\n"
