"""Confusion matrices and the derived OA / F1 / IoU metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Headline full-class lidar results of the joint-task model, for report layout only.
REFERENCE_LIDAR = {"mF1": 0.696, "mIoU": 0.592}


@dataclass
class ConfusionMatrix:
    """Rows are reference classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)


def confusion(pred, ref, num_classes: int | None = None, ignore_id: int | None = None) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(np.int64)
    ref = np.asarray(ref).astype(np.int64)
    if pred.shape != ref.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from reference shape {ref.shape}")
    keep = np.ones(ref.shape, dtype=bool) if ignore_id is None else ref != ignore_id
    if num_classes is None:
        num_classes = int(max(pred[keep].max(initial=0), ref[keep].max(initial=0))) + 1
    p, r = pred[keep], ref[keep]
    if p.size and (min(p.min(), r.min()) < 0 or max(p.max(), r.max()) >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    counts = np.bincount(r * num_classes + p, minlength=num_classes**2)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


@dataclass
class Report:
    oa: float
    f1: np.ndarray
    iou: np.ndarray
    mf1: float
    miou: float
    excluded: list

    def as_dict(self) -> dict:
        d = {"OA": self.oa, "mF1": self.mf1, "mIoU": self.miou}
        for c, (f, i) in enumerate(zip(self.f1, self.iou)):
            d[f"F1_{c}"] = float(f)
            d[f"IoU_{c}"] = float(i)
        d["excluded"] = ",".join(str(c) for c in self.excluded)
        return d

    def text(self, class_names=None) -> str:
        names = class_names or [f"class{c}" for c in range(len(self.f1))]
        head = f"{'':8}{'mean':>8}" + "".join(f"{n:>10}" for n in names)
        fmt = lambda v: f"{'n/a':>10}" if np.isnan(v) else f"{v:>10.3f}"
        lines = [
            f"OA {self.oa:.4f}",
            head,
            f"{'F1':8}{self.mf1:>8.3f}" + "".join(fmt(v) for v in self.f1),
            f"{'IoU':8}{self.miou:>8.3f}" + "".join(fmt(v) for v in self.iou),
        ]
        if self.excluded:
            lines.append(f"excluded from means (absent in prediction and reference): {self.excluded}")
        lines.append(f"reference lidar result (not reproduced): mF1 {REFERENCE_LIDAR['mF1']}, "
                     f"mIoU {REFERENCE_LIDAR['mIoU']}")
        return "\n".join(lines)


def report(cm: ConfusionMatrix) -> Report:
    c = cm.counts.astype(np.float64)
    if c.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    absent = (tp + fp + fn) == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(absent, np.nan, 2 * tp / (2 * tp + fp + fn))
        iou = np.where(absent, np.nan, tp / (tp + fp + fn))
    return Report(
        oa=float(tp.sum() / c.sum()),
        f1=f1,
        iou=iou,
        mf1=float(np.nanmean(f1)),
        miou=float(np.nanmean(iou)),
        excluded=np.flatnonzero(absent).tolist(),
    )
