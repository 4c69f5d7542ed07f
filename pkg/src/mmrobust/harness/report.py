"""Evaluation rows, the CSV report and its JSON sidecar.

Columns are append-only: new ones go at the end, just before ``wall_time``,
which is always last so report comparisons can drop it.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..corpus import FAKE
from ..errors import ValidationError

COLUMNS = ("model", "dataset", "condition", "params", "accuracy", "precision", "recall", "f1",
           "n", "correct", "seed", "error", "wall_time")
TIMING_COLUMNS = ("wall_time",)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def params_key(params: dict) -> str:
    """Canonical compact JSON for the ``params`` column."""
    return json.dumps(params, sort_keys=True, separators=(",", ":"))


@dataclass
class EvalRow:
    model: str
    dataset: str
    condition: str
    params: dict = field(default_factory=dict)
    n: int = 0
    correct: int = 0
    precision: float | None = None   # fake is the positive class
    recall: float | None = None
    seed: int = 0
    error: str = ""
    wall_time: float = 0.0

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.n if self.n else None

    @property
    def f1(self) -> float | None:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    def cells(self) -> list[str]:
        values = {"model": self.model, "dataset": self.dataset, "condition": self.condition,
                  "params": params_key(self.params), "accuracy": self.accuracy, "precision": self.precision,
                  "recall": self.recall, "f1": self.f1, "n": self.n, "correct": self.correct,
                  "seed": self.seed, "error": self.error, "wall_time": round(self.wall_time, 6)}
        return [_fmt(values[c]) for c in COLUMNS]


def scored_row(model: str, dataset: str, condition: str, params: dict, pred, labels, seed: int,
               wall_time: float = 0.0) -> EvalRow:
    """Row with counts and fake-class precision/recall from hard predictions."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValidationError(f"{len(pred)} predictions for {len(labels)} labels")
    tp = int(np.sum((pred == FAKE) & (labels == FAKE)))
    flagged = int(np.sum(pred == FAKE))
    positives = int(np.sum(labels == FAKE))
    return EvalRow(model, dataset, condition, dict(params), n=int(len(labels)),
                   correct=int(np.sum(pred == labels)),
                   precision=tp / flagged if flagged else None,
                   recall=tp / positives if positives else None,
                   seed=seed, wall_time=wall_time)


def error_row(model: str, dataset: str, condition: str, params: dict, seed: int, exc: BaseException) -> EvalRow:
    return EvalRow(model, dataset, condition, dict(params), seed=seed, error=f"{type(exc).__name__}: {exc}")


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def n_errors(self) -> int:
        return sum(1 for r in self.rows if r.error)

    def to_csv(self, drop: Sequence[str] = ()) -> str:
        keep = [i for i, c in enumerate(COLUMNS) if c not in drop]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([COLUMNS[i] for i in keep])
        for row in self.rows:
            cells = row.cells()
            w.writerow([cells[i] for i in keep])
        return buf.getvalue()

    def write(self, out_dir: str | Path, name: str = "report") -> tuple[Path, Path]:
        """``<name>.csv`` plus a ``<name>.json`` sidecar holding the full config."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{name}.csv", out / f"{name}.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        sidecar = {"columns": list(COLUMNS), "config": self.config, "rows": len(self.rows),
                   "errors": self.n_errors}
        json_path.write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return csv_path, json_path


def read_csv(path: str | Path, drop: Sequence[str] = TIMING_COLUMNS) -> list[dict]:
    """Rows of a written report as dicts, without the timing columns by default."""
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: v for k, v in rec.items() if k not in drop} for rec in csv.DictReader(fh)]


def strip_timing(csv_text: str) -> str:
    """The CSV text with the timing columns removed, for byte comparisons."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        return ""
    keep = [i for i, c in enumerate(rows[0]) if c not in TIMING_COLUMNS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([r[i] for i in keep])
    return buf.getvalue()
