"""Confusion counts, SE/SP/AC/JI/DI and fixed-width result tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .autodiff import Tensor
from .exceptions import ShapeError, ValidationError

METRIC_NAMES = ("SE", "SP", "AC", "JI", "DI")


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    TN: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.TN + self.FN

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.TP + other.TP, self.FP + other.FP, self.TN + other.TN, self.FN + other.FN)


@dataclass
class MetricsReport:
    SE: float
    SP: float
    AC: float
    JI: float
    DI: float
    counts: ConfusionCounts
    degenerate: tuple = ()
    per_image: list = field(default_factory=list)
    macro: dict = field(default_factory=dict)

    def values(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """1 where prob > threshold (strict), else 0."""
    if not 0 < threshold < 1:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    data = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (data > threshold).astype(np.uint8)


def _check_binary(name, a):
    if not np.isin(a, (0, 1)).all():
        raise ValidationError(f"{name} mask is not binary")


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError("prediction and ground truth differ", pred.shape, gt.shape)
    _check_binary("prediction", pred)
    _check_binary("ground truth", gt)
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 1.0
    return num / den


def metrics_from_confusion(c: ConfusionCounts) -> MetricsReport:
    """Derive the five metrics; 0/0 is reported as 1.0 and the metric is flagged."""
    if c.total <= 0:
        raise ValidationError("confusion counts are empty")
    flags: list[str] = []
    se = _ratio(c.TP, c.TP + c.FN, "SE", flags)
    sp = _ratio(c.TN, c.TN + c.FP, "SP", flags)
    ac = (c.TP + c.TN) / c.total
    ji = _ratio(c.TP, c.TP + c.FP + c.FN, "JI", flags)
    di = _ratio(2 * c.TP, 2 * c.TP + c.FP + c.FN, "DI", flags)
    return MetricsReport(se, sp, ac, ji, di, c, tuple(flags))


def report_from_masks(preds, gts) -> MetricsReport:
    """Micro metrics from pooled counts plus per-image entries and their macro means."""
    per_image = [metrics_from_confusion(confusion(p, g)) for p, g in zip(preds, gts)]
    if not per_image:
        raise ValidationError("no images to evaluate")
    total = per_image[0].counts
    for r in per_image[1:]:
        total = total + r.counts
    report = metrics_from_confusion(total)
    report.per_image = per_image
    report.macro = {k: float(np.mean([getattr(r, k) for r in per_image])) for k in METRIC_NAMES}
    return report


def evaluate(params, dataset, threshold: float = 0.5, batch_size: int = 8, predict_fn=None) -> MetricsReport:
    """Eval-mode prediction over ``dataset`` followed by :func:`report_from_masks`.

    ``dataset`` is ``(images, masks)`` or a sequence of samples. ``predict_fn``
    (images -> probability maps) replaces the network, e.g. for stubs.
    """
    from .model import forward
    from .training import _as_arrays, iter_batches

    images, masks = _as_arrays(dataset)
    if len(images) == 0:
        raise ValidationError("dataset is empty")
    preds = []
    for batch in iter_batches(len(images), batch_size):
        if predict_fn is not None:
            prob = np.asarray(predict_fn(images[batch]))
        else:
            prob, _ = forward(params, Tensor(images[batch], dtype=params.dtype), "eval")
            prob = prob.data
        if prob.shape != masks[batch].shape:
            raise ShapeError("prediction does not match mask shape", prob.shape, masks[batch].shape)
        preds.extend(binarize(prob, threshold))
    return report_from_masks(preds, [m for m in masks])


# ---------------------------------------------------------------------------
# tables


def format_value(value: float) -> str:
    """Four decimals, half-up on the decimal representation of ``value``."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP))


def format_table(rows, columns=None) -> str:
    """Fixed-width text table; ``rows`` are ``(name, {metric: value})`` pairs.

    Default columns are SE, SP, AC, JI plus DI when any row has it.
    """
    rows = list(rows)
    if columns is None:
        columns = list(METRIC_NAMES[:4])
        if any("DI" in vals for _, vals in rows):
            columns.append("DI")
    for name, vals in rows:
        missing = [c for c in columns if c not in vals]
        if missing:
            raise ValidationError(f"row {name!r} lacks column(s) {missing}")
    name_width = max([len("Method")] + [len(name) for name, _ in rows])
    col_width = max(6, *(len(c) for c in columns))
    lines = ["Method".ljust(name_width) + "".join(" | " + c.rjust(col_width) for c in columns)]
    lines.append("-" * len(lines[0]))
    for name, vals in rows:
        lines.append(name.ljust(name_width) + "".join(" | " + format_value(vals[c]).rjust(col_width) for c in columns))
    return "\n".join(lines) + "\n"


def report_csv(rows) -> str:
    """CSV with columns name,SE,SP,AC,JI,DI,flags; rows are ``(name, MetricsReport)``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", *METRIC_NAMES, "flags"])
    for name, rep in rows:
        writer.writerow([name, *(repr(float(getattr(rep, k))) for k in METRIC_NAMES), ";".join(rep.degenerate)])
    return buf.getvalue()


# values as printed in the published result tables
PUBLISHED_ROWS = {
    "lung": ("FocusNet (ours)", {"SE": 0.9757, "SP": 0.9981, "AC": 0.9932, "JI": 0.9965}),
    "skin": ("FocusNet (ours)", {"SE": 0.7673, "SP": 0.9896, "AC": 0.9214, "JI": 0.7562, "DI": 0.8315}),
}
