"""Residual-flow pseudo-labels: histogram, Otsu split, confidence filter, cleanup."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geometry import FlowField, GeometryError, ShapeMismatchError

BACKGROUND = 0
IMO = 1
INVALID = 255


class LabelerError(ValueError):
    pass


class EmptyHistogramError(LabelerError):
    pass


class RejectedSliceError(LabelerError):
    """A mask was requested from a decision that rejected the slice."""


class RejectionReason(str, enum.Enum):
    NONE = "none"
    TOTAL_VARIANCE_TOO_HIGH = "total_variance_too_high"
    SEPARATION_TOO_LOW = "separation_too_low"


@dataclass(frozen=True, eq=False)
class ResidualField:
    r: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True, eq=False)
class ResidualHistogram:
    counts: np.ndarray
    clip_value: float = 10.0

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.size < 1:
            raise LabelerError("counts must be a non-empty 1-D array")
        if np.any(counts < 0) or not np.all(counts == np.floor(counts)):
            raise LabelerError("counts must be non-negative integers")
        if not self.clip_value > 0:
            raise LabelerError(f"clip_value must be positive, got {self.clip_value}")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def bins(self) -> int:
        return self.counts.size

    @property
    def bin_width(self) -> float:
        return self.clip_value / self.bins

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def centers(self) -> np.ndarray:
        return (np.arange(self.bins) + 0.5) * self.bin_width


@dataclass(frozen=True)
class ThresholdDecision:
    threshold: float
    total_variance: float
    between_class_variance: float
    accepted: bool
    rejection_reason: RejectionReason = RejectionReason.NONE


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Per-pixel labels: 0 background, 1 IMO, 255 invalid."""

    label: np.ndarray
    decision: ThresholdDecision | None = None
    slice_time: float = 0.0

    @property
    def imo(self) -> np.ndarray:
        return self.label == IMO

    @property
    def valid(self) -> np.ndarray:
        return self.label != INVALID


def residual_field(observed: FlowField, rigid: FlowField) -> ResidualField:
    if observed.shape != rigid.shape:
        raise ShapeMismatchError(f"observed {observed.shape} vs rigid {rigid.shape}")
    if observed.dt != rigid.dt:
        raise GeometryError(f"dt mismatch: observed {observed.dt} s, rigid {rigid.dt} s")
    valid = observed.valid & rigid.valid
    r = np.hypot(observed.u - rigid.u, observed.v - rigid.v)
    valid = valid & np.isfinite(r)
    return ResidualField(np.where(valid, r, 0.0), valid)


def residual_histogram(res: ResidualField, bins: int = 256, clip_value: float = 10.0) -> ResidualHistogram:
    """Histogram of valid residuals; anything at or above ``clip_value`` lands in the last bin."""
    r = res.r.ravel() if res.valid.all() else res.r[res.valid]
    idx = np.floor(r * (bins / clip_value)).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    return ResidualHistogram(np.bincount(idx, minlength=bins), clip_value)


def _best_split(counts, n0s, s0s):
    """Index of the largest between-class variance, compared exactly.

    Between-class variance at split k (bins ``<= k`` are background) equals
    ``D^2 / (N^2 n0 n1)`` in squared bin units with ``D = N*S0 - n0*S``.
    A float pass shortlists the splits within a relative 1e-9 of the best;
    those are then compared by cross-multiplication in Python integers, so
    ties are genuine and resolve to the smallest k.  Splits with an empty
    background class are not candidates.
    """
    n0s = np.asarray(n0s, dtype=np.int64)
    s0s = np.asarray(s0s, dtype=np.int64)
    n, s = int(n0s[-1]), int(s0s[-1])
    candidates = np.flatnonzero(n0s > 0)
    # D fits in int64 (exact) unless the histogram is enormous
    if n * s < 2**62:
        n1s = n - n0s[candidates]
        d = (n * s0s[candidates] - n0s[candidates] * s).astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            score = np.where(n1s > 0, d * d / (n0s[candidates] * n1s.astype(np.float64)), 0.0)
        candidates = candidates[score >= score.max() * (1 - 1e-9)]
    best_k, best_num, best_den = None, 0, 1
    for k in candidates.tolist():
        n0 = int(n0s[k])
        n1 = n - n0
        if n1 == 0:
            num, den = 0, 1
        else:
            d = n * int(s0s[k]) - n0 * s
            num, den = d * d, n0 * n1
        if best_k is None or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def _class_stats(hist: ResidualHistogram, k: int):
    p = hist.counts / hist.total
    c = hist.centers()
    mu = float(p @ c)
    total_var = float(p @ (c - mu) ** 2)
    w0 = float(p[: k + 1].sum())
    w1 = 1.0 - w0
    between = 0.0
    if w0 > 0 and w1 > 0:
        mu0 = float(p[: k + 1] @ c[: k + 1]) / w0
        mu1 = float(p[k + 1 :] @ c[k + 1 :]) / w1
        between = w0 * (mu0 - mu) ** 2 + w1 * (mu1 - mu) ** 2
    return total_var, min(between, total_var)


def otsu_threshold(hist: ResidualHistogram):
    """Otsu split of a residual histogram.

    Returns:
        ``(threshold, between_class_variance, total_variance)``; the threshold
        is the upper edge of the last background bin, variances are in px^2
        computed from bin centres.
    """
    if hist.total <= 0:
        raise EmptyHistogramError("histogram has no mass")
    counts = hist.counts
    n0s = np.cumsum(counts)
    s0s = np.cumsum(counts * np.arange(counts.size, dtype=np.int64))
    k = _best_split(counts, n0s, s0s)
    total_var, between = _class_stats(hist, k)
    return (k + 1) * hist.bin_width, between, total_var


def decide_threshold(
    hist: ResidualHistogram,
    eps_total_var: float = 4.0,
    eps_separation: float = 0.25,
    total_variance_comparator: str = "greater",
) -> ThresholdDecision:
    """Two-stage confidence filter on top of the Otsu split.

    Stage one rejects the slice on its total residual variance (by default when
    it is *greater* than ``eps_total_var``; pass ``"less"`` to flip).  Stage
    two rejects when the between-class variance is below ``eps_separation``.
    """
    threshold, between, total = otsu_threshold(hist)
    if total_variance_comparator == "greater":
        stage1 = total > eps_total_var
    elif total_variance_comparator == "less":
        stage1 = total < eps_total_var
    else:
        raise LabelerError(f"unknown comparator {total_variance_comparator!r}")
    if stage1:
        reason = RejectionReason.TOTAL_VARIANCE_TOO_HIGH
    elif between < eps_separation:
        reason = RejectionReason.SEPARATION_TOO_LOW
    else:
        reason = RejectionReason.NONE
    return ThresholdDecision(
        threshold=threshold,
        total_variance=total,
        between_class_variance=between,
        accepted=reason is RejectionReason.NONE,
        rejection_reason=reason,
    )


def _sweep(a: np.ndarray, radius: int, axis: int, op) -> np.ndarray:
    """Combine every pixel with its neighbours up to ``radius`` along ``axis``.

    Pixels beyond the array edge count as background.
    """
    out = a.copy()
    n = a.shape[axis]
    for d in range(1, min(radius, n - 1) + 1):
        head = [slice(None)] * a.ndim
        tail = [slice(None)] * a.ndim
        head[axis], tail[axis] = slice(d, None), slice(None, -d)
        head, tail = tuple(head), tuple(tail)
        op(out[head], a[tail], out=out[head])
        op(out[tail], a[head], out=out[tail])
    if op is np.logical_and:
        edge = [slice(None)] * a.ndim
        edge[axis] = slice(0, radius)
        out[tuple(edge)] = False
        edge[axis] = slice(max(n - radius, 0), None)
        out[tuple(edge)] = False
    return out


def close_binary(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilate then erode with a square of side ``2*radius+1``.

    The image is treated as embedded in an infinite background, so objects
    touching the border are not eaten by the erosion.  The square is
    separable, so each pass is a row sweep followed by a column sweep.
    """
    if radius < 0:
        raise LabelerError(f"radius must be >= 0, got {radius}")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    padded = np.pad(mask, radius)
    grown = _sweep(_sweep(padded, radius, 1, np.logical_or), radius, 0, np.logical_or)
    closed = _sweep(_sweep(grown, radius, 1, np.logical_and), radius, 0, np.logical_and)
    return closed[radius:-radius, radius:-radius]


def morphological_close(mask: LabelMask, radius: int = 1) -> LabelMask:
    invalid = mask.label == INVALID
    imo = close_binary(mask.label == IMO, radius)
    label = np.where(imo, IMO, BACKGROUND).astype(np.uint8)
    label[invalid] = INVALID
    return LabelMask(label, mask.decision, mask.slice_time)


def make_label_mask(
    res: ResidualField,
    decision: ThresholdDecision,
    morph_radius: int = 0,
    slice_time: float = 0.0,
) -> LabelMask:
    """Threshold residuals into a ternary mask; residuals equal to the threshold stay background."""
    if not decision.accepted:
        raise RejectedSliceError(
            f"slice rejected ({decision.rejection_reason.value}); skip it instead of labeling"
        )
    label = np.full(res.r.shape, INVALID, dtype=np.uint8)
    label[res.valid] = BACKGROUND
    label[res.valid & (res.r > decision.threshold)] = IMO
    mask = LabelMask(label, decision, slice_time)
    if morph_radius:
        mask = morphological_close(mask, morph_radius)
    return mask
