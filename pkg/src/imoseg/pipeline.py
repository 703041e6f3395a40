"""Per-slice pseudo-labeling: egomotion, rigid field, residual, decision, mask."""

from __future__ import annotations

from dataclasses import dataclass

from .config import PipelineConfig
from .egomotion import EgomotionError, EgomotionEstimate, RansacConfig, estimate_egomotion
from .geometry import DepthMap, FlowField, render_rigid_field
from .labeler import (
    LabelMask,
    ResidualField,
    ThresholdDecision,
    decide_threshold,
    make_label_mask,
    residual_field,
    residual_histogram,
)


@dataclass(frozen=True, eq=False)
class SliceResult:
    """``status`` is ``labeled``, ``rejected`` (confidence filter) or ``failed`` (egomotion)."""

    status: str
    slice_time: float
    estimate: EgomotionEstimate | None = None
    residual: ResidualField | None = None
    decision: ThresholdDecision | None = None
    mask: LabelMask | None = None
    message: str = ""


def label_slice(
    flow: FlowField,
    depth: DepthMap,
    cfg: PipelineConfig,
    ransac: RansacConfig | None = None,
    slice_time: float = 0.0,
) -> SliceResult:
    try:
        est = estimate_egomotion(flow, depth, cfg.intrinsics, ransac or cfg.ransac)
    except EgomotionError as exc:
        return SliceResult("failed", slice_time, message=str(exc))
    if est.residual is not None:
        # the estimator already measured every valid pixel against the final twist
        res = ResidualField(est.residual, est.residual_valid)
    else:
        res = residual_field(flow, render_rigid_field(depth, est.velocity, cfg.intrinsics, flow.dt))
    lab = cfg.labeler
    if not res.valid.any():
        return SliceResult("failed", slice_time, est, res, message="no valid residuals")
    hist = residual_histogram(res, lab.bins, lab.clip_value)
    decision = decide_threshold(hist, lab.eps_total_var, lab.eps_separation, lab.total_variance_comparator)
    if not decision.accepted:
        return SliceResult("rejected", slice_time, est, res, decision, message=decision.rejection_reason.value)
    mask = make_label_mask(res, decision, lab.morph_radius, slice_time)
    return SliceResult("labeled", slice_time, est, res, decision, mask)
