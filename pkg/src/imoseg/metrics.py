"""Evaluation quantities: event-masked IoU, detection rate, endpoint error, focal loss."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .geometry import FlowField, ShapeMismatchError

PROB_EPS = 1e-7


class MetricError(ValueError):
    pass


def event_masked_iou(gt, pred, events):
    """IoU of prediction and ground truth restricted to pixels that saw events.

    Returns ``None`` when neither mask touches an event pixel.
    """
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    events = np.asarray(events, dtype=bool)
    if not (gt.shape == pred.shape == events.shape):
        raise ShapeMismatchError(f"shapes differ: gt {gt.shape}, pred {pred.shape}, events {events.shape}")
    ep = events & pred
    eo = events & gt
    union = int(np.count_nonzero(ep | eo))
    if union == 0:
        return None
    return np.count_nonzero(ep & eo) / union


def detection_rate(ious, threshold: float = 0.3) -> float:
    """Fraction of IoUs at or above ``threshold``."""
    ious = np.asarray(list(ious), dtype=np.float64)
    if ious.size == 0:
        raise MetricError("detection rate of an empty list")
    if not 0 < threshold < 1:
        raise MetricError(f"threshold must lie in (0, 1), got {threshold}")
    return float(np.count_nonzero(ious >= threshold)) / ious.size


def epe(flow_a: FlowField, flow_b: FlowField) -> float:
    """Mean endpoint error over jointly valid pixels."""
    if flow_a.shape != flow_b.shape:
        raise ShapeMismatchError(f"{flow_a.shape} vs {flow_b.shape}")
    valid = flow_a.valid & flow_b.valid
    if not valid.any():
        raise MetricError("no jointly valid pixels")
    err = np.hypot(flow_a.u[valid] - flow_b.u[valid], flow_a.v[valid] - flow_b.v[valid])
    return float(err.mean())


def focal_loss(p, y, gamma: float = 0.25):
    """``-(1 - p_t)**gamma * log(p_t)`` with ``p_t = p`` for ``y == 1`` else ``1 - p``.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]``.  Works elementwise on arrays.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y)
    pt = np.where(y == 1, p, 1.0 - p)
    loss = -((1.0 - pt) ** gamma) * np.log(pt)
    return float(loss) if loss.ndim == 0 else loss


@dataclass
class IoUReport:
    """Per-slice IoUs with summary statistics over slices that contain an object."""

    per_slice: list = field(default_factory=list)
    threshold: float = 0.3

    @property
    def scored(self) -> list[float]:
        return [iou for _, iou in self.per_slice if iou is not None]

    @property
    def mean(self) -> float:
        s = self.scored
        return float(np.mean(s)) if s else float("nan")

    @property
    def std(self) -> float:
        s = self.scored
        return float(np.std(s)) if s else float("nan")

    @property
    def detection_rate(self) -> float:
        s = self.scored
        return detection_rate(s, self.threshold) if s else float("nan")

    def summary(self) -> str:
        """Percent ``mean±std`` line followed by the detection rate."""
        if not self.scored:
            return "IoU n/a (no slices with objects)\ndetection rate n/a"
        return (
            f"IoU {round(100 * self.mean)}±{round(100 * self.std)}\n"
            f"detection rate @ {self.threshold:g}: {self.detection_rate:.3f} "
            f"({len(self.scored)}/{len(self.per_slice)} slices scored)"
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["slice_time", "iou", "detected"])
        for t, iou in self.per_slice:
            if iou is None:
                w.writerow([f"{t:.6f}", "NA", "NA"])
            else:
                w.writerow([f"{t:.6f}", f"{iou:.6f}", int(iou >= self.threshold)])
        return buf.getvalue()


def slice_iou(gt, pred, events):
    """IoU for one evaluation slice, or ``None`` when no object pixel saw an event."""
    if not np.any(np.asarray(events, dtype=bool) & np.asarray(gt, dtype=bool)):
        return None
    return event_masked_iou(gt, pred, events)


def build_iou_report(slices, threshold: float = 0.3) -> IoUReport:
    """``slices`` yields ``(slice_time, gt, pred, events)`` tuples."""
    report = IoUReport(threshold=threshold)
    for t, gt, pred, events in slices:
        report.per_slice.append((float(t), slice_iou(gt, pred, events)))
    return report
