"""Group-robustness metrics: worst-group, average and cross-group variance."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import stack_split


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    per_group_acc: dict
    worst: float
    average: float
    variance_pct: float
    n_eval: int
    split: str
    group_sizes: dict = field(default_factory=dict)


def group_variance(per_group_acc_pct):
    """Population variance of per-group accuracies given in percent."""
    vals = np.asarray(list(per_group_acc_pct), dtype=np.float64)
    if vals.size == 0:
        raise EvaluationError("group_variance needs at least one group")
    return float(np.mean((vals - vals.mean()) ** 2))


def metrics_from_predictions(pred, labels, attrs, split="test"):
    pred, labels, attrs = (np.asarray(a) for a in (pred, labels, attrs))
    if labels.size == 0:
        raise EvaluationError(f"split {split!r} is empty")
    correct = pred == labels
    per_group, sizes = {}, {}
    for g in sorted(set(zip(labels.tolist(), attrs.tolist()))):
        sel = (labels == g[0]) & (attrs == g[1])
        sizes[g] = int(sel.sum())
        per_group[g] = float(correct[sel].mean())
    return MetricsReport(
        per_group_acc=per_group,
        worst=min(per_group.values()),
        average=float(correct.mean()),
        variance_pct=group_variance([100.0 * a for a in per_group.values()]),
        n_eval=int(labels.size),
        split=split,
        group_sizes=sizes,
    )


@torch.no_grad()
def predict_records(model, records, batch_size=512):
    images, _, _ = stack_split(records)
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model.predict(torch.from_numpy(images[i : i + batch_size])))
    return torch.cat(out).numpy()


def evaluate(model, ds, split, expected_groups=None):
    """Metrics of omega1(mu1) predictions on one split.

    ``expected_groups`` (default: every label/attribute pair) must all be
    present; a missing group raises :class:`EvaluationError` naming it.
    """
    records = ds.split(split)
    if not records:
        raise EvaluationError(f"split {split!r} is empty")
    if expected_groups is None:
        expected_groups = [(y, z) for y in range(ds.n_classes) for z in range(ds.n_attributes)]
    present = {(r.label, r.attribute) for r in records}
    for g in expected_groups:
        if g not in present:
            raise EvaluationError(f"group (label={g[0]}, attribute={g[1]}) is empty in split {split!r}")
    was_training = model.training
    model.eval()
    pred = predict_records(model, records)
    model.train(was_training)
    labels = [r.label for r in records]
    attrs = [r.attribute for r in records]
    return metrics_from_predictions(pred, labels, attrs, split)


def attribution_iou(amap, mask, threshold=0.5):
    """IoU of ``{map >= threshold}`` against a binary mask of the same size."""
    if not 0.0 < threshold < 1.0:
        raise EvaluationError(f"threshold must lie in (0, 1), got {threshold}")
    grid = getattr(amap, "grid", amap)
    grid = np.asarray(grid.detach().cpu() if torch.is_tensor(grid) else grid)
    mask = np.asarray(mask).astype(bool)
    if grid.shape != mask.shape:
        raise EvaluationError(f"map shape {grid.shape} != mask shape {mask.shape}")
    pred = grid >= threshold
    union = np.logical_or(pred, mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, mask).sum() / union)


# -- report I/O ---------------------------------------------------------------

REPORT_HEADER = ["split", "group_label", "group_attr", "count", "accuracy"]


def format_report(report):
    if not report.per_group_acc:
        raise EvaluationError("refusing to emit a report with no group metrics")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for (y, z) in sorted(report.per_group_acc):
        acc = report.per_group_acc[(y, z)]
        w.writerow([report.split, y, z, report.group_sizes.get((y, z), ""), repr(acc)])
    w.writerow(["worst", "average", "variance_pct"])
    w.writerow([repr(report.worst), repr(report.average), repr(report.variance_pct)])
    return buf.getvalue()


def report_emit(report, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(format_report(report))


def parse_report(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != REPORT_HEADER:
        raise EvaluationError("report header mismatch")
    try:
        footer_at = rows.index(["worst", "average", "variance_pct"])
    except ValueError as e:
        raise EvaluationError("report footer missing") from e
    per_group, sizes, split = {}, {}, None
    for row in rows[1:footer_at]:
        split = row[0]
        g = (int(row[1]), int(row[2]))
        per_group[g] = float(row[4])
        sizes[g] = int(row[3]) if row[3] else 0
    worst, average, var = (float(v) for v in rows[footer_at + 1])
    return MetricsReport(per_group, worst, average, var, sum(sizes.values()), split, sizes)


def read_report(path):
    with open(path, encoding="utf-8") as f:
        return parse_report(f.read())
