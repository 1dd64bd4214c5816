"""Precision/recall/F1, threshold-by-epoch sweeps and report files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

PINNED_THRESHOLD = 0.97
PREDICTION_COLUMNS = ("sample_id", "probability", "label")
TABLE_COLUMNS = ("scenario", "status", "best_epoch", "best_threshold", "precision", "recall", "f1", "f1_at_0.97")


def default_thresholds() -> list[float]:
    grid = {round(0.50 + 0.01 * k, 2) for k in range(50)}
    grid.add(PINNED_THRESHOLD)
    return sorted(grid)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    # Set when a zero denominator forced the 0 convention.
    degenerate: bool = False


def confusion(predictions: Iterable[tuple[float, bool]], threshold: float) -> ConfusionCounts:
    """Tally counts; a sample is called mitosis iff probability > threshold."""
    preds = list(predictions)
    if not preds:
        raise ValueError("cannot compute metrics on an empty prediction set")
    tp = fp = fn = tn = 0
    for prob, label in preds:
        if not 0.0 <= prob <= 1.0:
            raise ValueError(f"probability {prob} outside [0, 1]")
        called = prob > threshold
        if called and label:
            tp += 1
        elif called:
            fp += 1
        elif label:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def f1(counts: ConfusionCounts) -> Metrics:
    """Precision, recall and their harmonic mean.

    Zero denominators give 0 and set ``degenerate``. F1 is computed as
    2tp / (2tp + fp + fn), which equals 2PR / (P + R) whenever tp > 0.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    degenerate = (tp + fp) == 0 or (tp + fn) == 0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    score = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return Metrics(precision, recall, score, degenerate)


def _fast_counts(probs: np.ndarray, labels: np.ndarray, threshold: float) -> ConfusionCounts:
    called = probs > threshold
    pos = labels.astype(bool)
    tp = int(np.sum(called & pos))
    fp = int(np.sum(called & ~pos))
    fn = int(np.sum(~called & pos))
    return ConfusionCounts(tp, fp, fn, len(probs) - tp - fp - fn)


# ---------------------------------------------------------------- prediction files


def write_predictions(path: str | Path, ids: Sequence[str], probs: Sequence[float], labels: Sequence) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for i, p, y in zip(ids, probs, labels):
            w.writerow([i, repr(float(p)), int(bool(y))])
    return path


def read_predictions(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != PREDICTION_COLUMNS:
        raise ValueError(f"{path}: expected header {PREDICTION_COLUMNS}")
    body = rows[1:]
    ids = [r[0] for r in body]
    probs = np.array([float(r[1]) for r in body])
    labels = np.array([int(r[2]) for r in body])
    return ids, probs, labels


# ---------------------------------------------------------------- sweep


@dataclass
class EvalReport:
    scenario: str
    epochs: list[int]
    thresholds: list[float]
    cells: dict[tuple[int, float], Metrics] = field(default_factory=dict)
    absent: list[int] = field(default_factory=list)
    n_samples: dict[int, int] = field(default_factory=dict)

    @property
    def is_absent(self) -> bool:
        return not self.cells

    @property
    def argmax(self) -> Optional[tuple[int, float]]:
        """Cell with the highest F1; ties go to the earliest epoch, then lowest threshold."""
        best, best_key = -1.0, None
        for e in self.epochs:
            for t in self.thresholds:
                m = self.cells.get((e, t))
                if m is not None and m.f1 > best:
                    best, best_key = m.f1, (e, t)
        return best_key

    @property
    def best(self) -> Optional[Metrics]:
        key = self.argmax
        return self.cells[key] if key is not None else None

    def best_at(self, threshold: float) -> Optional[Metrics]:
        cands = [self.cells[(e, threshold)] for e in self.epochs if (e, threshold) in self.cells]
        return max(cands, key=lambda m: m.f1) if cands else None

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "epochs": self.epochs,
            "thresholds": self.thresholds,
            "absent": self.absent,
            "n_samples": {str(k): v for k, v in self.n_samples.items()},
            "argmax": list(self.argmax) if self.argmax else None,
            "cells": [
                {"epoch": e, "threshold": t, "precision": m.precision, "recall": m.recall, "f1": m.f1,
                 "degenerate": m.degenerate}
                for (e, t), m in sorted(self.cells.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        rep = cls(d["scenario"], list(d["epochs"]), [float(t) for t in d["thresholds"]],
                  absent=list(d["absent"]), n_samples={int(k): v for k, v in d.get("n_samples", {}).items()})
        for c in d["cells"]:
            rep.cells[(c["epoch"], c["threshold"])] = Metrics(c["precision"], c["recall"], c["f1"], c["degenerate"])
        return rep

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def check_thresholds(thresholds: Sequence[float]) -> list[float]:
    ts = [float(t) for t in thresholds]
    if not ts:
        raise ValueError("threshold grid must not be empty")
    if ts != sorted(ts) or len(set(ts)) != len(ts):
        raise ValueError("threshold grid must be strictly increasing")
    if not any(math.isclose(t, PINNED_THRESHOLD) for t in ts):
        raise ValueError(f"threshold grid must include {PINNED_THRESHOLD}")
    return ts


def sweep(
    prediction_files: Mapping[int, str | Path],
    thresholds: Sequence[float] = None,
    scenario: str = "",
) -> EvalReport:
    """Metrics for every (epoch, threshold) cell.

    Epochs whose prediction file is missing are listed in ``absent``.
    """
    ts = check_thresholds(thresholds if thresholds is not None else default_thresholds())
    epochs = sorted(prediction_files)
    report = EvalReport(scenario, epochs, ts)
    for e in epochs:
        path = Path(prediction_files[e])
        if not path.exists():
            report.absent.append(e)
            continue
        _, probs, labels = read_predictions(path)
        if len(probs) == 0:
            raise ValueError(f"{path}: no predictions")
        report.n_samples[e] = len(probs)
        prev_recall, prev_called = math.inf, math.inf
        for t in ts:
            counts = _fast_counts(probs, labels, t)
            m = f1(counts)
            called = counts.tp + counts.fp
            if m.recall > prev_recall or called > prev_called:
                raise AssertionError(f"recall not monotone in threshold at epoch {e}, threshold {t}")
            prev_recall, prev_called = m.recall, called
            report.cells[(e, t)] = m
    return report


# ---------------------------------------------------------------- rendering


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def render_table(reports: Sequence[EvalReport]) -> str:
    lines = ["\t".join(TABLE_COLUMNS)]
    for rep in reports:
        if rep.is_absent:
            lines.append("\t".join([rep.scenario, "absent"] + [""] * (len(TABLE_COLUMNS) - 2)))
            continue
        e, t = rep.argmax
        m = rep.cells[(e, t)]
        pinned = rep.best_at(PINNED_THRESHOLD)
        status = "partial" if rep.absent else "ok"
        row = [rep.scenario, status, e, f"{t:.2f}", m.precision, m.recall, m.f1, pinned.f1 if pinned else None]
        lines.append("\t".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def render_curves(report: EvalReport) -> str:
    """F1 per epoch (rows) and threshold (columns)."""
    header = ["epoch"] + [f"{t:.2f}" for t in report.thresholds]
    lines = ["\t".join(header)]
    for e in report.epochs:
        if e in report.absent:
            lines.append("\t".join([str(e)] + ["absent"] * len(report.thresholds)))
            continue
        lines.append("\t".join([str(e)] + [f"{report.cells[(e, t)].f1:.6f}" for t in report.thresholds]))
    return "\n".join(lines) + "\n"


def _plot(report: EvalReport, path: Path, highlight: Sequence[float]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = [e for e in report.epochs if e not in report.absent]
    cmap = plt.get_cmap("viridis")
    for k, t in enumerate(report.thresholds):
        ys = [report.cells[(e, t)].f1 for e in epochs]
        strong = any(math.isclose(t, h) for h in highlight)
        ax.plot(epochs, ys, color="crimson" if strong else cmap(k / max(1, len(report.thresholds) - 1)),
                lw=1.8 if strong else 0.6, alpha=1.0 if strong else 0.5,
                label=f"t={t:.2f}" if strong else None)
    ax.set_xlabel("training epoch")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1)
    ax.set_title(report.scenario)
    if highlight:
        ax.legend(loc="upper left", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def render_report(
    reports: EvalReport | Sequence[EvalReport],
    out_dir: str | Path,
    plots: bool = True,
) -> dict[str, Path]:
    """Write per-scenario F1 curves, a comparison table and plots.

    Absent scenarios still get a table row (status ``absent``) but no curves.
    """
    if isinstance(reports, EvalReport):
        reports = [reports]
    if not reports:
        raise ValueError("nothing to render")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, Path] = {}
    for rep in reports:
        if rep.is_absent:
            continue
        p = out / f"curves_{rep.scenario}.tsv"
        p.write_text(render_curves(rep))
        files[f"curves_{rep.scenario}"] = p
        if plots:
            img = out / f"f1_{rep.scenario}.png"
            _plot(rep, img, [PINNED_THRESHOLD])
            files[f"plot_{rep.scenario}"] = img
    table = out / "comparison.tsv"
    table.write_text(render_table(reports))
    files["table"] = table
    return files
