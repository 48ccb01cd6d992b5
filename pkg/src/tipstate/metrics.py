"""Confusion matrices, one-vs-rest ROC/PR curves and summary metrics.

Confusion matrices are ``(C, C + 1)`` integer arrays: entry ``[i, j]``
counts samples of true class ``i`` predicted as ``j``; the final column
counts abstentions.  Abstentions are false negatives for recall and are
excluded from precision denominators.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (DataError, DegenerateLabels, EmptyClassSupport,
                     LengthMismatch, NoPositives)

ABSTAIN = "Abstain"


def _index_labels(labels, classes, allow_abstain):
    index = {c: i for i, c in enumerate(classes)}
    out = np.empty(len(labels), dtype=np.int64)
    for n, lab in enumerate(labels):
        if isinstance(lab, (int, np.integer)) and not isinstance(lab, bool):
            k = int(lab)
            if k == -1 and allow_abstain:
                out[n] = len(classes)
                continue
            if not 0 <= k < len(classes):
                raise DataError(f"label index {k} out of range")
            out[n] = k
        elif lab is None or lab == ABSTAIN:
            if not allow_abstain:
                raise DataError("truth labels cannot be Abstain")
            out[n] = len(classes)
        else:
            try:
                out[n] = index[lab]
            except KeyError:
                raise DataError(f"label {lab!r} not in class set") from None
    return out


def confusion_matrix(preds: Sequence, truths: Sequence, classes: Sequence[str]) -> np.ndarray:
    """Counts of (truth, prediction) pairs; predictions may be ``ABSTAIN``/-1."""
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} truths")
    c = len(classes)
    p = _index_labels(preds, classes, True)
    t = _index_labels(truths, classes, False)
    m = np.zeros((c, c + 1), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def per_class_recall(confusion) -> np.ndarray:
    cm = np.asarray(confusion)
    support = cm.sum(axis=1)
    if (support == 0).any():
        raise EmptyClassSupport(f"classes {np.flatnonzero(support == 0).tolist()} have no samples")
    return np.diag(cm[:, :cm.shape[0]]) / support


def per_class_precision(confusion) -> np.ndarray:
    """Precision per class; a class never predicted has precision 1."""
    cm = np.asarray(confusion)
    c = cm.shape[0]
    predicted = cm[:, :c].sum(axis=0)
    tp = np.diag(cm[:, :c]).astype(np.float64)
    return np.divide(tp, predicted, out=np.ones(c), where=predicted > 0)


def balanced_accuracy(confusion) -> float:
    """Macro-averaged recall; 1/C is the expectation for uniform guessing."""
    return float(per_class_recall(confusion).mean())


def macro_precision(confusion) -> float:
    return float(per_class_precision(confusion).mean())


# -- threshold curves ----------------------------------------------------------

@dataclass(frozen=True)
class Curve:
    """Points of a threshold sweep; ``thresholds[k]`` produced ``(x[k], y[k])``."""

    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.y.tolist()))

    def __len__(self):
        return len(self.x)


def _sweep(scores, truths):
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truths).astype(bool)
    if s.shape != t.shape or s.ndim != 1:
        raise LengthMismatch(f"scores {s.shape} vs truths {t.shape}")
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(t)[ends]
    fp = (ends + 1) - tp
    return s[ends], tp, fp, int(t.sum()), int((~t).sum())


def roc_curve(scores, truths) -> Curve:
    """TPR against FPR at every distinct score, from (0, 0) to (1, 1).

    A sample is called positive when its score is >= the threshold; equal
    scores enter together as one step.
    """
    thr, tp, fp, pos, neg = _sweep(scores, truths)
    if pos == 0 or neg == 0:
        raise DegenerateLabels("ROC needs at least one positive and one negative")
    x = np.r_[0.0, fp / neg]
    y = np.r_[0.0, tp / pos]
    return Curve(x, y, np.r_[np.inf, thr])


def auroc(curve: Curve | Sequence[tuple[float, float]]) -> float:
    """Trapezoidal area under a ROC curve (points sorted by FPR)."""
    if isinstance(curve, Curve):
        x, y = curve.x, curve.y
    else:
        pts = np.asarray(curve, dtype=np.float64)
        x, y = pts[:, 0], pts[:, 1]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def roc_auc(scores, truths) -> float:
    return auroc(roc_curve(scores, truths))


def pr_curve(scores, truths) -> Curve:
    """(recall, precision) at every distinct score threshold, recall ascending."""
    thr, tp, fp, pos, _ = _sweep(scores, truths)
    if pos == 0:
        raise NoPositives("precision-recall needs at least one positive")
    return Curve(tp / pos, tp / (tp + fp), thr)


def precision_recall_at(scores, truths, threshold: float) -> tuple[float, float]:
    """Precision and recall of the rule ``score >= threshold``.

    Precision is 1 when nothing is called positive.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truths).astype(bool)
    called = s >= threshold
    tp = int((called & t).sum())
    n_called = int(called.sum())
    pos = int(t.sum())
    if pos == 0:
        raise NoPositives("recall undefined without positives")
    precision = tp / n_called if n_called else 1.0
    return precision, tp / pos


def thresholded_argmax(confidences, threshold: float) -> np.ndarray:
    """Argmax class index per row, or -1 where the top confidence < threshold."""
    conf = np.asarray(confidences)
    arg = conf.argmax(axis=1)
    top = conf[np.arange(len(conf)), arg]
    return np.where(top >= threshold, arg, -1)


# -- reports -------------------------------------------------------------------

@dataclass
class ClassMetrics:
    name: str
    roc: Curve
    auroc: float
    pr: Curve
    precision: float
    recall: float


@dataclass
class MetricsReport:
    classes: tuple[str, ...]
    confusion: np.ndarray
    per_class: list[ClassMetrics]
    balanced_accuracy: float
    macro_precision: float
    macro_auroc: float
    extra: dict = field(default_factory=dict)

    def summary_rows(self) -> dict[str, float]:
        return {"AUROC": self.macro_auroc, "Bal. Acc.": self.balanced_accuracy,
                "Precision": self.macro_precision}


def build_report(scores, truths, classes: Sequence[str], preds=None) -> MetricsReport:
    """Metrics for per-class ``scores`` (N, C) and integer ``truths``.

    ``preds`` are the hard decisions (class index or -1 for abstain); they
    default to the row-wise argmax of ``scores``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    classes = tuple(classes)
    if scores.shape != (len(truths), len(classes)):
        raise LengthMismatch(f"scores {scores.shape} for {len(truths)} samples, {len(classes)} classes")
    if preds is None:
        preds = scores.argmax(axis=1)
    cm = confusion_matrix(list(np.asarray(preds).tolist()), list(truths.tolist()), classes)
    prec = per_class_precision(cm)
    rec = per_class_recall(cm)
    per = []
    for k, name in enumerate(classes):
        onehot = truths == k
        roc = roc_curve(scores[:, k], onehot)
        per.append(ClassMetrics(name, roc, auroc(roc), pr_curve(scores[:, k], onehot),
                                float(prec[k]), float(rec[k])))
    return MetricsReport(classes, cm, per, float(rec.mean()), float(prec.mean()),
                         float(np.mean([p.auroc for p in per])))


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(float(v), ".17g")


def write_curve_csv(path, curve: Curve) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "x", "y"])
        for t, x, y in zip(curve.thresholds, curve.x, curve.y):
            w.writerow([_fmt(t), _fmt(x), _fmt(y)])
    return path


def read_curve_csv(path) -> Curve:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["threshold", "x", "y"]:
        raise DataError(f"{path}: not a curve CSV")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, 3)
    return Curve(data[:, 1], data[:, 2], data[:, 0])


_PALETTE = ("#1f77b4", "#d4a017", "#2ca02c", "#d62728", "#e377c2", "#7f7f7f",
            "#000000", "#8c564b", "#ff7f0e")


def write_svg(path, curves: dict[str, Curve], title: str, xlabel: str, ylabel: str,
              diagonal: bool = False, size: int = 420) -> Path:
    """Minimal line plot of several curves in the unit square."""
    m = 50
    span = size - 2 * m

    def px(x, y):
        return m + x * span, size - m - y * span

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(curves)}">',
             f'<text x="{size / 2}" y="25" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<rect x="{m}" y="{m}" width="{span}" height="{span}" fill="none" stroke="#333"/>',
             f'<text x="{size / 2}" y="{size - 15}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
             f'<text x="15" y="{size / 2}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 15 {size / 2})">{escape(ylabel)}</text>']
    if diagonal:
        (x0, y0), (x1, y1) = px(0, 0), px(1, 1)
        parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#000" stroke-dasharray="5,4"/>')
    for k, (name, c) in enumerate(curves.items()):
        colour = _PALETTE[k % len(_PALETTE)]
        pts = " ".join("{:.3f},{:.3f}".format(*px(x, y)) for x, y in zip(c.x, c.y))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        ly = size + 20 * k + 5
        parts.append(f'<line x1="{m}" y1="{ly}" x2="{m + 20}" y2="{ly}" stroke="{colour}" stroke-width="3"/>')
        parts.append(f'<text x="{m + 28}" y="{ly + 4}" font-size="12">{escape(name)}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path


def format_summary(report: MetricsReport, title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'metric':<12}{'value':>10}")
    for key, v in report.summary_rows().items():
        lines.append(f"{key:<12}{v:>10.4f}")
    lines.append("")
    lines.append(f"{'class':<16}{'AUROC':>10}{'precision':>11}{'recall':>10}")
    for c in report.per_class:
        lines.append(f"{c.name:<16}{c.auroc:>10.4f}{c.precision:>11.4f}{c.recall:>10.4f}")
    lines.append("")
    lines.append("confusion (rows truth, cols predicted, last col abstain)")
    for name, row in zip(report.classes, report.confusion):
        lines.append(f"{name:<16}" + "".join(f"{int(v):>7d}" for v in row))
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, out_dir, title: str = "") -> list[Path]:
    """Write per-class ROC/PR CSVs, one SVG per curve family and ``summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for c in report.per_class:
        files.append(write_curve_csv(out / f"roc_{c.name}.csv", c.roc))
        files.append(write_curve_csv(out / f"pr_{c.name}.csv", c.pr))
    files.append(write_svg(out / "roc.svg", {f"{c.name} ({c.auroc:.2f})": c.roc for c in report.per_class},
                           "ROC", "false positive rate", "true positive rate", diagonal=True))
    files.append(write_svg(out / "pr.svg", {c.name: c.pr for c in report.per_class},
                           "Precision-recall", "recall", "precision"))
    summary = out / "summary.txt"
    summary.write_text(format_summary(report, title), encoding="utf-8")
    files.append(summary)
    return files


def plot_from_csv(report_dir, out_dir=None) -> list[Path]:
    """Regenerate ``roc.svg``/``pr.svg`` from the curve CSVs in ``report_dir``."""
    src = Path(report_dir)
    out = Path(out_dir) if out_dir else src
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for prefix, title, xl, yl, diag in (("roc", "ROC", "false positive rate", "true positive rate", True),
                                        ("pr", "Precision-recall", "recall", "precision", False)):
        files = sorted(src.glob(f"{prefix}_*.csv"))
        if not files:
            continue
        curves = {f.stem[len(prefix) + 1:]: read_curve_csv(f) for f in files}
        written.append(write_svg(out / f"{prefix}.svg", curves, title, xl, yl, diag))
    if not written:
        raise DataError(f"{src}: no roc_*.csv or pr_*.csv files")
    return written
