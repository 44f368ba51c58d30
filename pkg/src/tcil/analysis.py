"""Accuracy metrics and the within-task / old-new / inter-task error taxonomy.

Tasks are numbered from 1 and the evaluation at step ``s`` treats task ``s``
as the latest one. A misclassification is

* WTC when true and predicted class belong to the same task,
* ONC when the tasks differ and exactly one of them is the latest task,
* ITC when the tasks differ and neither is the latest task.

By construction a step-1 evaluation can only produce WTC, and a step-2
evaluation cannot produce ITC, whatever the predictor.
"""

from __future__ import annotations

import csv
import enum
import io
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError


class ErrorType(str, enum.Enum):
    CORRECT = "correct"
    WTC = "WTC"
    ONC = "ONC"
    ITC = "ITC"


def classify_error(
    true_class: int,
    pred_class: int,
    class_to_task: Mapping[int, int],
    latest_task: int,
    onc_rule: str = "either",
) -> ErrorType:
    """Place one prediction in the taxonomy.

    ``onc_rule="predicted"`` is the narrower reading where only errors that
    predict a latest-task class count as ONC; the remaining cross-task errors
    become ITC.
    """
    for c in (true_class, pred_class):
        if c not in class_to_task:
            raise InputError(f"unknown class id {c}")
    if true_class == pred_class:
        return ErrorType.CORRECT
    true_task, pred_task = class_to_task[true_class], class_to_task[pred_class]
    if true_task == pred_task:
        return ErrorType.WTC
    if onc_rule == "either":
        is_onc = (true_task == latest_task) != (pred_task == latest_task)
    elif onc_rule == "predicted":
        is_onc = pred_task == latest_task
    else:
        raise InputError(f"unknown onc_rule {onc_rule!r}")
    return ErrorType.ONC if is_onc else ErrorType.ITC


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: int
    true_class: int
    pred_class: int
    step: int


@dataclass
class PredictionLog:
    records: list[PredictionRecord]
    class_to_task: dict[int, int]

    def steps(self) -> list[int]:
        return sorted({r.step for r in self.records})

    def at_step(self, step: int) -> list[PredictionRecord]:
        return [r for r in self.records if r.step == step]


@dataclass
class StepErrors:
    step: int
    total: int
    correct: int
    wtc: int
    onc: int
    itc: int

    @property
    def errors(self) -> int:
        return self.wtc + self.onc + self.itc

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.total if self.total else 0.0


@dataclass
class ErrorBreakdown:
    steps: list[StepErrors] = field(default_factory=list)

    def at(self, step: int) -> StepErrors:
        for s in self.steps:
            if s.step == step:
                return s
        raise KeyError(step)

    def column(self, name: str) -> list[int]:
        return [getattr(s, name) for s in self.steps]


def error_breakdown(log: PredictionLog, onc_rule: str = "either") -> ErrorBreakdown:
    if not log.records:
        raise InputError("empty prediction log")
    out = ErrorBreakdown()
    for step in log.steps():
        counts: Counter[ErrorType] = Counter(
            classify_error(r.true_class, r.pred_class, log.class_to_task, step, onc_rule)
            for r in log.at_step(step)
        )
        total = sum(counts.values())
        out.steps.append(
            StepErrors(
                step=step,
                total=total,
                correct=counts[ErrorType.CORRECT],
                wtc=counts[ErrorType.WTC],
                onc=counts[ErrorType.ONC],
                itc=counts[ErrorType.ITC],
            )
        )
    return out


@dataclass(frozen=True)
class AccuracyMetrics:
    avg: float
    last: float
    per_step: tuple[float, ...]


def accuracy_metrics(per_step: Sequence[float] | PredictionLog) -> AccuracyMetrics:
    """Avg and Last (in percent) from per-step accuracies or a prediction log."""
    if isinstance(per_step, PredictionLog):
        if not per_step.records:
            raise InputError("empty prediction log")
        accs = []
        for step in per_step.steps():
            recs = per_step.at_step(step)
            accs.append(100.0 * sum(r.true_class == r.pred_class for r in recs) / len(recs))
        per_step = accs
    values = tuple(float(a) for a in per_step)
    if not values:
        raise InputError("no evaluated steps")
    return AccuracyMetrics(avg=float(np.mean(values)), last=values[-1], per_step=values)


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean per sample: is the true column among the ``k`` highest logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    k = min(k, logits.shape[1])
    top = np.argpartition(-logits, k - 1, axis=1)[:, :k]
    return (top == labels[:, None]).any(axis=1)


# --- file formats -------------------------------------------------------------

LOG_COLUMNS = ("sample_id", "true_class", "pred_class", "step")


def write_prediction_log(records: Iterable[PredictionRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in records:
            writer.writerow([r.sample_id, r.true_class, r.pred_class, r.step])


def write_class_task_map(class_to_task: Mapping[int, int], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("class_id", "task_id"))
        for c in sorted(class_to_task):
            writer.writerow([c, class_to_task[c]])


def _read_int_rows(path: str | Path, columns: Sequence[str]) -> list[tuple[int, ...]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        if [h.strip() for h in header] != list(columns):
            raise InputError(f"{path}:1: expected header {','.join(columns)}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(columns):
                raise InputError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
            try:
                rows.append(tuple(int(cell) for cell in row))
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-integer field in {row}") from None
    return rows


def read_class_task_map(path: str | Path) -> dict[int, int]:
    mapping = {}
    for c, t in _read_int_rows(path, ("class_id", "task_id")):
        if c in mapping:
            raise InputError(f"{path}: class {c} listed twice")
        mapping[c] = t
    return mapping


def read_prediction_records(path: str | Path) -> list[PredictionRecord]:
    return [PredictionRecord(*row) for row in _read_int_rows(path, LOG_COLUMNS)]


def read_prediction_log(path: str | Path, class_task_map_path: str | Path) -> PredictionLog:
    class_to_task = read_class_task_map(class_task_map_path)
    rows = _read_int_rows(path, LOG_COLUMNS)
    if not rows:
        raise InputError(f"{path}: prediction log has no records")
    records = []
    for sample_id, true_class, pred_class, step in rows:
        for c in (true_class, pred_class):
            if c not in class_to_task:
                raise InputError(f"{path}: unknown class id {c} (sample {sample_id})")
        records.append(PredictionRecord(sample_id, true_class, pred_class, step))
    return PredictionLog(records, class_to_task)


# --- reports -------------------------------------------------------------------

RESULTS_TABLE = "results.csv"
ACCURACY_PLOT = "accuracy.png"
ERRORS_PLOT = "errors.png"


def results_table(breakdown: ErrorBreakdown, metrics: AccuracyMetrics | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("step", "accuracy", "total", "correct", "wtc", "onc", "itc"))
    for i, s in enumerate(breakdown.steps):
        acc = metrics.per_step[i] if metrics is not None else s.accuracy
        writer.writerow((s.step, f"{acc:.4f}", s.total, s.correct, s.wtc, s.onc, s.itc))
    return buf.getvalue()


def emit_report(
    breakdown: ErrorBreakdown,
    metrics: AccuracyMetrics | None,
    out_dir: str | Path,
    title: str = "",
) -> dict[str, Path]:
    """Write ``results.csv``, ``accuracy.png`` and ``errors.png`` into ``out_dir``.

    Nothing is written if the breakdown is empty. The table is a pure
    function of its inputs.
    """
    if not breakdown.steps:
        raise InputError("nothing to report: no evaluated steps")
    if metrics is not None and len(metrics.per_step) != len(breakdown.steps):
        raise InputError("metrics and breakdown disagree on the number of steps")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"report directory {out_dir} is not writable")

    table = out_dir / RESULTS_TABLE
    table.write_text(results_table(breakdown, metrics))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [s.step for s in breakdown.steps]
    accs = list(metrics.per_step) if metrics is not None else [s.accuracy for s in breakdown.steps]

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, accs, marker="o")
    ax.set_xlabel("incremental step")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_xticks(steps)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_dir / ACCURACY_PLOT, dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    wtc, onc, itc = (np.array(breakdown.column(n)) for n in ("wtc", "onc", "itc"))
    ax.bar(steps, wtc, label="WTC")
    ax.bar(steps, onc, bottom=wtc, label="ONC")
    ax.bar(steps, itc, bottom=wtc + onc, label="ITC")
    ax.set_xlabel("incremental step")
    ax.set_ylabel("errors")
    ax.set_xticks(steps)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_dir / ERRORS_PLOT, dpi=100)
    plt.close(fig)

    return {"table": table, "accuracy_plot": out_dir / ACCURACY_PLOT, "errors_plot": out_dir / ERRORS_PLOT}
