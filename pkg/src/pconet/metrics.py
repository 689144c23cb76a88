"""Evaluation suite: confusion matrix, accuracy, per-class
precision/recall/F1, the per-epoch CSV curve log, and SVG curve plots.

Zero-denominator metrics come back as 0.0 with the class flagged
degenerate instead of NaN, so downstream CSV/SVG stay total.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

CLASS_NAMES = ("infected", "not infected")

CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,val_precision,val_recall"
CSV_FIELDS = CSV_HEADER.split(",")


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[actual][predicted] over classes (0, 1)."""

    counts: np.ndarray
    class_names: tuple[str, str] = CLASS_NAMES

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (2, 2):
            raise ValueError(f"confusion matrix must be 2x2, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    per_class: tuple[ClassMetrics, ...]


def confusion(predictions, actuals, class_names: tuple[str, str] = CLASS_NAMES) -> ConfusionMatrix:
    preds = np.asarray(predictions)
    acts = np.asarray(actuals)
    if preds.shape != acts.shape or preds.ndim != 1:
        raise ValueError(
            f"predictions and actuals must be equal-length 1-d sequences, "
            f"got shapes {preds.shape} and {acts.shape}"
        )
    for label, arr in (("predictions", preds), ("actuals", acts)):
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{label} contain labels outside {{0, 1}}")
    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (acts.astype(int), preds.astype(int)), 1)
    return ConfusionMatrix(counts, class_names)


def report(cm: ConfusionMatrix) -> MetricsReport:
    """accuracy = trace/total; per class c: precision = cm[c][c] / column
    sum, recall = cm[c][c] / row sum, f1 = 2PR/(P+R)."""
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    accuracy = float(np.trace(counts)) / total
    per_class = []
    for c in (0, 1):
        tp = float(counts[c][c])
        pred_c = float(counts[:, c].sum())
        actual_c = float(counts[c, :].sum())
        degenerate = pred_c == 0 or actual_c == 0
        precision = tp / pred_c if pred_c else 0.0
        recall = tp / actual_c if actual_c else 0.0
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1 = 0.0
            degenerate = True
        per_class.append(
            ClassMetrics(cm.class_names[c], precision, recall, f1, int(actual_c), degenerate)
        )
    return MetricsReport(accuracy, tuple(per_class))


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    val_precision: float
    val_recall: float

    def to_csv(self) -> str:
        vals = [
            self.train_loss, self.train_acc, self.val_loss,
            self.val_acc, self.val_precision, self.val_recall,
        ]
        return f"{self.epoch}," + ",".join(f"{v:.6f}" for v in vals)


def curve_log_append(log_path, row: EpochRow) -> None:
    """Append one epoch row, creating the file with its header if needed.
    The line is written in a single flushed call so the file stays
    readable mid-training; re-appending an existing epoch is rejected."""
    path = Path(log_path)
    if path.exists():
        seen = {r.epoch for r in read_curve_log(path)}
        if row.epoch in seen:
            raise ValueError(f"epoch {row.epoch} already logged in {path}")
        payload = row.to_csv() + "\n"
    else:
        payload = CSV_HEADER + "\n" + row.to_csv() + "\n"
    with open(path, "a", encoding="utf-8") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())


def read_curve_log(log_path) -> list[EpochRow]:
    path = Path(log_path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ValueError(f"{path}: line 1: expected header {CSV_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(CSV_FIELDS):
            raise ValueError(f"{path}: line {lineno}: expected {len(CSV_FIELDS)} fields")
        try:
            rows.append(EpochRow(int(parts[0]), *(float(v) for v in parts[1:])))
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return rows


_CURVES = (
    ("accuracy", (("train", "train_acc"), ("validation", "val_acc"))),
    ("loss", (("train", "train_loss"), ("validation", "val_loss"))),
    ("precision", (("validation", "val_precision"),)),
    ("recall", (("validation", "val_recall"),)),
)
_SERIES_COLORS = ("#1f77b4", "#d62728")


def emit_curves_svg(log_path, out_dir) -> list[Path]:
    """Render one SVG line plot per metric (train vs validation where both
    are logged) from a curve-log CSV. Fails before writing anything if the
    log has no data rows."""
    rows = read_curve_log(log_path)
    if not rows:
        raise ValueError(f"{log_path}: no data rows to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    epochs = [r.epoch for r in rows]
    for metric, series in _CURVES:
        data = [(label, [getattr(r, field) for r in rows]) for label, field in series]
        svg = _render_svg(metric, epochs, data)
        target = out / f"{metric}.svg"
        target.write_text(svg, encoding="utf-8")
        written.append(target)
    return written


def _render_svg(title: str, epochs: list[int], series: list[tuple[str, list[float]]],
                width: int = 640, height: int = 400) -> str:
    left, right, top, bottom = 60, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    xs = [float(e) for e in epochs]
    ys = [v for _, vals in series for v in vals]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" '
        f'font-size="11" font-family="sans-serif">epoch</text>',
        f'<text x="{left - 8}" y="{py(y0):.1f}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{y0:.4g}</text>',
        f'<text x="{left - 8}" y="{py(y1):.1f}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{y1:.4g}</text>',
        f'<text x="{left - 8}" y="{top + ph + 14:.1f}" text-anchor="start" font-size="10" '
        f'font-family="sans-serif">{epochs[0]}</text>',
        f'<text x="{left + pw:.1f}" y="{top + ph + 14:.1f}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{epochs[-1]}</text>',
    ]
    for i, (label, vals) in enumerate(series):
        color = _SERIES_COLORS[i % len(_SERIES_COLORS)]
        points = " ".join(f"{px(x):.2f},{py(v):.2f}" for x, v in zip(xs, vals))
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{left + pw - 4}" y="{top + 14 + 14 * i}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif" fill="{color}">{escape(label)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
