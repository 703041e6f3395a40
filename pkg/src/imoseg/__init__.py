"""Geometric pseudo-labels for independently moving objects."""

from .config import PipelineConfig, load_config
from .egomotion import EgomotionEstimate, RansacConfig, estimate_egomotion
from .events import EventSlice, EventVolume, build_volume, project_events, slice_stream
from .geometry import (
    CameraIntrinsics,
    CameraVelocity,
    DepthMap,
    FlowField,
    PixelSample,
    compose_motion_field,
    render_rigid_field,
    rigid_flow_at,
)
from .labeler import LabelMask, ThresholdDecision, decide_threshold, make_label_mask, otsu_threshold
from .metrics import IoUReport, detection_rate, epe, event_masked_iou, focal_loss
from .pipeline import SliceResult, label_slice
from .simulator import GroundTruthBundle, SceneSpec, generate, sweep

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "load_config",
    "EgomotionEstimate",
    "RansacConfig",
    "estimate_egomotion",
    "EventSlice",
    "EventVolume",
    "build_volume",
    "project_events",
    "slice_stream",
    "CameraIntrinsics",
    "CameraVelocity",
    "DepthMap",
    "FlowField",
    "PixelSample",
    "compose_motion_field",
    "render_rigid_field",
    "rigid_flow_at",
    "LabelMask",
    "ThresholdDecision",
    "decide_threshold",
    "make_label_mask",
    "otsu_threshold",
    "IoUReport",
    "detection_rate",
    "epe",
    "event_masked_iou",
    "focal_loss",
    "SliceResult",
    "label_slice",
    "GroundTruthBundle",
    "SceneSpec",
    "generate",
    "sweep",
]
