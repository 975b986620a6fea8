"""Tabular and JSON rendering of experiment results."""

from __future__ import annotations

import json

from ..errors import DegenerateInputError

_COLUMNS = ("target", "method", "seed", "rouge1", "rouge2", "rougeL")


def _rows(results) -> list[tuple[str, ...]]:
    rows = []
    for r in results:
        rows.append((r.target, r.method, str(r.seed),
                     f"{r.rouge['rouge1']['f1']:.4f}",
                     f"{r.rouge['rouge2']['f1']:.4f}",
                     f"{r.rouge['rougeL']['f1']:.4f}"))
    rows.sort(key=lambda row: (row[0], row[1], int(row[2])))
    return rows


def render_table(results) -> str:
    """Aligned plain-text table, one row per result, sorted by (target, method).

    ROUGE columns show F1.
    """
    if not results:
        raise DegenerateInputError("no results to report")
    rows = [_COLUMNS] + _rows(results)
    widths = [max(len(row[i]) for row in rows) for i in range(len(_COLUMNS))]
    lines = []
    for idx, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def results_to_json(results) -> str:
    if not results:
        raise DegenerateInputError("no results to report")
    records = [r.to_json_dict() for r in results]
    records.sort(key=lambda d: (d["target"], d["method"], d["seed"]))
    return json.dumps(records, sort_keys=True, indent=2) + "\n"


def results_from_json(text: str) -> list:
    from .experiment import RunResult
    return [RunResult.from_json_dict(d) for d in json.loads(text)]
