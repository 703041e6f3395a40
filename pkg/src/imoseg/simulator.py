"""Synthetic scenes with exact ground truth for every pipeline stage.

A scene is a depth map seen by a moving camera plus a set of disjoint object
regions, each moving with its own twist.  Object fields follow the
convention that an object moving with twist ``(v_o, omega_o)`` in the camera
frame adds the rigid field of the *negated* twist, evaluated at the object's
depth, on top of the camera-induced field.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .events import EventSlice, make_events, project_events
from .geometry import (
    CameraIntrinsics,
    CameraVelocity,
    DepthDomainError,
    DepthMap,
    DisjointnessError,
    FlowField,
    compose_motion_field,
    render_rigid_field,
)
from .labeler import BACKGROUND, IMO, INVALID, LabelMask
from .metrics import event_masked_iou

log = logging.getLogger(__name__)


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class DepthModel:
    """``constant`` uses ``z``; ``plane`` uses ``z0 + gx*x + gy*y`` in calibrated
    coordinates; ``textured`` draws each pixel uniformly from ``[z_min, z_max]``."""

    kind: str = "constant"
    z: float = 2.0
    z0: float = 2.0
    gradient: tuple[float, float] = (0.0, 0.0)
    z_min: float = 1.0
    z_max: float = 3.0

    def __post_init__(self):
        if self.kind not in ("constant", "plane", "textured"):
            raise SceneSpecError(f"unknown depth model {self.kind!r}")
        if self.kind == "textured" and not 0 < self.z_min <= self.z_max:
            raise SceneSpecError("textured depth needs 0 < z_min <= z_max")
        object.__setattr__(self, "gradient", tuple(float(g) for g in self.gradient))

    def render(self, intr: CameraIntrinsics, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "constant":
            return np.full(intr.shape, float(self.z))
        if self.kind == "plane":
            x, y = intr.calibrated_grid()
            return self.z0 + self.gradient[0] * x + self.gradient[1] * y
        return rng.uniform(self.z_min, self.z_max, size=intr.shape)

    def upper_bound(self, intr: CameraIntrinsics, region: np.ndarray) -> float:
        """Largest depth this model can produce inside ``region``."""
        if self.kind == "constant":
            return float(self.z)
        if self.kind == "textured":
            return float(self.z_max)
        x, y = intr.calibrated_grid()
        return float((self.z0 + self.gradient[0] * x + self.gradient[1] * y)[region].max())


@dataclass(frozen=True)
class SceneObject:
    """A moving region: an axis-aligned box ``[x0, x1) x [y0, y1)`` in pixels, or a disk."""

    shape: str = "box"
    box: tuple[int, int, int, int] = (0, 0, 0, 0)
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.0
    velocity: CameraVelocity = field(default_factory=CameraVelocity)
    depth_offset: float = 0.0

    def __post_init__(self):
        if self.shape not in ("box", "disk"):
            raise SceneSpecError(f"unknown object shape {self.shape!r}")

    def region(self, intr: CameraIntrinsics) -> np.ndarray:
        rows, cols = np.mgrid[0 : intr.height, 0 : intr.width]
        if self.shape == "box":
            x0, y0, x1, y1 = self.box
            return (cols >= x0) & (cols < x1) & (rows >= y0) & (rows < y1)
        cx, cy = self.center
        return (cols - cx) ** 2 + (rows - cy) ** 2 <= self.radius**2


@dataclass(frozen=True)
class SceneSpec:
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.desk)
    depth_model: DepthModel = field(default_factory=DepthModel)
    camera_velocity: CameraVelocity = field(default_factory=CameraVelocity)
    objects: tuple[SceneObject, ...] = ()
    flow_noise_sigma: float = 0.0
    event_texture_density: float = 0.2
    events_per_pixel: int = 8
    outlier_fraction: float = 0.0
    outlier_max_px: float = 10.0
    dt: float = 0.025
    t_start: float = 0.0
    z_max: float = 3.0
    rng_seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.flow_noise_sigma < 0:
            raise SceneSpecError("flow_noise_sigma must be >= 0")
        if not 0 <= self.event_texture_density <= 1:
            raise SceneSpecError("event_texture_density must lie in [0, 1]")
        if not 0 <= self.outlier_fraction <= 1:
            raise SceneSpecError("outlier_fraction must lie in [0, 1]")
        if self.events_per_pixel < 1:
            raise SceneSpecError("events_per_pixel must be >= 1")
        if not self.dt > 0:
            raise SceneSpecError("dt must be positive")


@dataclass(frozen=True, eq=False)
class GroundTruthBundle:
    flow: FlowField
    clean_flow: FlowField
    depth: DepthMap
    rigid_flow: FlowField
    imo_mask: LabelMask
    events: EventSlice
    camera_velocity: CameraVelocity
    event_origin: np.ndarray | None = None
    spec: SceneSpec | None = None


def _object_regions(spec: SceneSpec) -> list[np.ndarray]:
    regions = []
    claimed = np.zeros(spec.intrinsics.shape, dtype=bool)
    for i, obj in enumerate(spec.objects):
        region = obj.region(spec.intrinsics)
        if np.any(region & claimed):
            raise DisjointnessError(f"object {i} overlaps an earlier object")
        claimed |= region
        regions.append(region)
    return regions


def _synthesize_events(spec, flow: FlowField, rng):
    intr = spec.intrinsics
    texture = (rng.random(intr.shape) < spec.event_texture_density) & flow.valid
    rows, cols = np.nonzero(texture)
    origin = np.repeat(rows * intr.width + cols, spec.events_per_pixel)
    n = origin.size
    tau = rng.random(n)
    pol = np.where(rng.random(n) < 0.5, -1, 1)
    u = flow.u.ravel()[origin]
    v = flow.v.ravel()[origin]
    ex = np.rint(np.repeat(cols, spec.events_per_pixel) + u * tau)
    ey = np.rint(np.repeat(rows, spec.events_per_pixel) + v * tau)
    keep = (ex >= 0) & (ex < intr.width) & (ey >= 0) & (ey < intr.height)
    t_end = spec.t_start + spec.dt
    t = np.minimum(spec.t_start + tau * spec.dt, np.nextafter(t_end, -np.inf))
    order = np.lexsort((np.arange(n)[keep], t[keep]))
    ev = make_events(t[keep][order], ex[keep][order], ey[keep][order], pol[keep][order])
    return EventSlice(ev, spec.t_start, t_end), origin[keep][order]


def generate(spec: SceneSpec) -> GroundTruthBundle:
    """Render flow, depth, ground-truth mask and events for one slice."""
    intr = spec.intrinsics
    rng = np.random.default_rng(spec.rng_seed)
    regions = _object_regions(spec)

    z = spec.depth_model.render(intr, rng)
    for obj, region in zip(spec.objects, regions):
        z[region] += obj.depth_offset
    if np.any(~(z > 0)):
        raise DepthDomainError("scene depth must stay positive after object offsets")
    depth = DepthMap.from_array(z, spec.z_max)

    rigid = render_rigid_field(depth, spec.camera_velocity, intr, spec.dt)
    object_fields = [
        (render_rigid_field(depth, -obj.velocity, intr, spec.dt), region)
        for obj, region in zip(spec.objects, regions)
    ]
    clean = compose_motion_field(rigid, object_fields)

    u = np.array(clean.u)
    v = np.array(clean.v)
    valid = clean.valid
    if spec.flow_noise_sigma > 0:
        u += np.where(valid, rng.normal(0.0, spec.flow_noise_sigma, intr.shape), 0.0)
        v += np.where(valid, rng.normal(0.0, spec.flow_noise_sigma, intr.shape), 0.0)
    if spec.outlier_fraction > 0:
        hit = valid & (rng.random(intr.shape) < spec.outlier_fraction)
        mag = rng.uniform(0.0, spec.outlier_max_px, intr.shape)
        ang = rng.uniform(0.0, 2 * np.pi, intr.shape)
        u += np.where(hit, mag * np.cos(ang), 0.0)
        v += np.where(hit, mag * np.sin(ang), 0.0)
    flow = FlowField(u, v, valid, spec.dt)

    label = np.full(intr.shape, BACKGROUND, dtype=np.uint8)
    label[~depth.valid] = INVALID
    for region in regions:
        label[region] = IMO
    imo_mask = LabelMask(label, None, spec.t_start)

    events, origin = _synthesize_events(spec, clean, rng)
    return GroundTruthBundle(
        flow=flow,
        clean_flow=clean,
        depth=depth,
        rigid_flow=rigid,
        imo_mask=imo_mask,
        events=events,
        camera_velocity=spec.camera_velocity,
        event_origin=origin,
        spec=spec,
    )


# -- randomized specs ---------------------------------------------------------


def _place_boxes(rng, intr, n, fraction, max_tries=1000):
    """Disjoint boxes covering roughly ``fraction`` of the sensor."""
    area = fraction * intr.width * intr.height / n
    boxes = []
    claimed = np.zeros(intr.shape, dtype=bool)
    for _ in range(n):
        for _ in range(max_tries):
            aspect = rng.uniform(0.6, 1.6)
            w = int(round(np.sqrt(area * aspect)))
            h = int(round(area / max(w, 1)))
            w = min(max(w, 4), intr.width - 2)
            h = min(max(h, 4), intr.height - 2)
            x0 = int(rng.integers(1, intr.width - w))
            y0 = int(rng.integers(1, intr.height - h))
            box = (x0, y0, x0 + w, y0 + h)
            region = SceneObject(box=box).region(intr)
            if not np.any(region & claimed):
                claimed |= region
                boxes.append(box)
                break
        else:
            raise SceneSpecError("could not place disjoint objects")
    return boxes


def random_spec(
    seed: int,
    *,
    intrinsics: CameraIntrinsics | None = None,
    depth_kind: str = "textured",
    n_objects: int = 1,
    object_fraction: float = 0.15,
    imo_residual_px: float = 3.0,
    flow_noise_sigma: float = 0.0,
    outlier_fraction: float = 0.0,
    camera_speed: float = 0.5,
    event_texture_density: float = 0.2,
) -> SceneSpec:
    """Seeded random scene whose objects move by at least ``imo_residual_px``.

    Each object translates parallel to the image plane; its speed is chosen so
    that the residual it leaves, evaluated at the deepest point its region can
    reach, equals ``imo_residual_px`` pixels per slice.
    """
    intr = intrinsics or CameraIntrinsics.desk()
    rng = np.random.default_rng(seed)
    if depth_kind == "textured":
        depth = DepthModel("textured", z_min=1.0, z_max=2.8)
    elif depth_kind == "plane":
        depth = DepthModel(
            "plane", z0=float(rng.uniform(1.6, 2.2)), gradient=tuple(rng.uniform(-0.8, 0.8, 2))
        )
    else:
        depth = DepthModel("constant", z=float(rng.uniform(1.5, 2.5)))
    cam = CameraVelocity(
        rng.uniform(-camera_speed, camera_speed, 3), rng.uniform(-camera_speed, camera_speed, 3)
    )
    objects = []
    if n_objects and object_fraction > 0:
        for box in _place_boxes(rng, intr, n_objects, object_fraction):
            offset = -float(rng.uniform(0.0, 0.4))
            region = SceneObject(box=box).region(intr)
            z_far = depth.upper_bound(intr, region) + offset
            speed = imo_residual_px * z_far / (intr.fx * 0.025)
            ang = rng.uniform(0, 2 * np.pi)
            # an equal-flow split across axes needs fx == fy; scale per axis otherwise
            vel = CameraVelocity(
                [speed * np.cos(ang), speed * np.sin(ang) * intr.fx / intr.fy, 0.0], [0.0, 0.0, 0.0]
            )
            objects.append(SceneObject("box", box=box, velocity=vel, depth_offset=offset))
    return SceneSpec(
        intrinsics=intr,
        depth_model=depth,
        camera_velocity=cam,
        objects=tuple(objects),
        flow_noise_sigma=flow_noise_sigma,
        outlier_fraction=outlier_fraction,
        event_texture_density=event_texture_density,
        rng_seed=int(rng.integers(0, 2**63 - 1)),
    )


def noise_p99(sigma: float) -> float:
    """99th percentile of the norm of isotropic 2-D Gaussian noise (Rayleigh)."""
    return sigma * np.sqrt(2.0 * np.log(100.0))


def min_imo_residual(bundle: GroundTruthBundle) -> float:
    """Smallest clean residual over ground-truth object pixels (inf without objects)."""
    imo = bundle.imo_mask.imo & bundle.clean_flow.valid
    if not imo.any():
        return float("inf")
    r = np.hypot(bundle.clean_flow.u - bundle.rigid_flow.u, bundle.clean_flow.v - bundle.rigid_flow.v)
    return float(r[imo].min())


# -- sweeps -------------------------------------------------------------------


@dataclass
class SweepRow:
    index: int
    status: str
    egomotion_error: float = float("nan")
    inlier_count: int = 0
    iou: float | None = None
    pixel_accuracy: float = float("nan")
    detected: bool | None = None
    decision: object = None
    message: str = ""


def pixel_accuracy(gt: LabelMask, pred: LabelMask) -> float:
    both = gt.valid & pred.valid
    if not both.any():
        return float("nan")
    return float(np.mean(gt.imo[both] == pred.imo[both]))


def evaluate_scene(spec: SceneSpec, cfg, index: int = 0, seed: int | None = None) -> SweepRow:
    """Generate one scene, run estimate -> label, and score the result."""
    from .pipeline import label_slice

    try:
        bundle = generate(spec)
    except (ValueError, ArithmeticError) as exc:
        return SweepRow(index, "failed", message=f"generation: {exc}")
    ransac = cfg.ransac if seed is None else replace(cfg.ransac, rng_seed=seed)
    result = label_slice(bundle.flow, bundle.depth, cfg, ransac=ransac, slice_time=spec.t_start)
    row = SweepRow(index, result.status, message=result.message)
    if result.estimate is not None:
        row.egomotion_error = float(
            np.max(np.abs(result.estimate.velocity.as_vector() - bundle.camera_velocity.as_vector()))
        )
        row.inlier_count = result.estimate.inlier_count
    row.decision = result.decision
    intr = spec.intrinsics
    events = project_events(bundle.events, intr.width, intr.height)
    has_object = bool(np.any(bundle.imo_mask.imo & events))
    if not has_object:
        if result.status == "labeled":
            row.status = "no-object"
        return row
    pred = result.mask.imo if result.mask is not None else np.zeros(intr.shape, dtype=bool)
    row.iou = event_masked_iou(bundle.imo_mask.imo, pred, events)
    if result.mask is not None:
        row.pixel_accuracy = pixel_accuracy(bundle.imo_mask, result.mask)
    row.detected = row.iou is not None and row.iou >= cfg.pipeline.detection_iou
    return row


def sweep(specs, cfg, workers: int = 1) -> list[SweepRow]:
    """Evaluate every scene; failures become rows rather than exceptions.

    RANSAC seeds are spawned per scene from ``cfg.ransac.rng_seed`` so the
    rows do not depend on ``workers``.
    """
    specs = list(specs)
    if not specs:
        raise SceneSpecError("sweep needs at least one scene")
    seeds = [
        int(s.generate_state(1, np.uint64)[0] >> np.uint64(1))
        for s in np.random.SeedSequence(cfg.ransac.rng_seed).spawn(len(specs))
    ]
    jobs = [(spec, cfg, i, seeds[i]) for i, spec in enumerate(specs)]
    if workers <= 1:
        return [evaluate_scene(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: evaluate_scene(*job), jobs))


# -- spec files ---------------------------------------------------------------


_TOP_KEYS = {
    "seed", "flow_noise_sigma", "event_texture_density", "events_per_pixel", "outlier_fraction",
    "outlier_max_px", "dt", "t_start", "z_max", "preset", "intrinsics", "depth", "camera", "objects",
}


def spec_from_dict(data: dict) -> SceneSpec:
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise SceneSpecError(f"unknown scene keys: {', '.join(sorted(unknown))}")
    preset = data.get("preset", "desk")
    if preset == "desk":
        intr = CameraIntrinsics.desk()
    elif preset == "evimo":
        intr = CameraIntrinsics.evimo_crop()
    else:
        raise SceneSpecError(f"unknown preset {preset!r}")
    try:
        if "intrinsics" in data:
            intr = replace(intr, **data["intrinsics"])
        d = dict(data.get("depth", {}))
        depth = DepthModel(kind=d.pop("model", "constant"), **d)
        camera = data.get("camera", {})
        cam = CameraVelocity(camera.get("v", [0.0] * 3), camera.get("omega", [0.0] * 3))
        objects = []
        for o in data.get("objects", []):
            o = dict(o)
            vel = CameraVelocity(o.pop("v", [0.0] * 3), o.pop("omega", [0.0] * 3))
            for k in ("box", "center"):
                if k in o:
                    o[k] = tuple(o[k])
            objects.append(SceneObject(velocity=vel, **o))
        return SceneSpec(
            intrinsics=intr,
            depth_model=depth,
            camera_velocity=cam,
            objects=tuple(objects),
            flow_noise_sigma=float(data.get("flow_noise_sigma", 0.0)),
            event_texture_density=float(data.get("event_texture_density", 0.2)),
            events_per_pixel=int(data.get("events_per_pixel", 8)),
            outlier_fraction=float(data.get("outlier_fraction", 0.0)),
            outlier_max_px=float(data.get("outlier_max_px", 10.0)),
            dt=float(data.get("dt", 0.025)),
            t_start=float(data.get("t_start", 0.0)),
            z_max=float(data.get("z_max", 3.0)),
            rng_seed=int(data.get("seed", 42)),
        )
    except TypeError as exc:
        raise SceneSpecError(str(exc)) from None


def spec_to_dict(spec: SceneSpec) -> dict:
    i = spec.intrinsics
    dm = spec.depth_model
    depth = {"model": dm.kind}
    if dm.kind == "constant":
        depth["z"] = dm.z
    elif dm.kind == "plane":
        depth.update(z0=dm.z0, gradient=list(dm.gradient))
    else:
        depth.update(z_min=dm.z_min, z_max=dm.z_max)
    objects = []
    for o in spec.objects:
        d = {"shape": o.shape}
        if o.shape == "box":
            d["box"] = [int(c) for c in o.box]
        else:
            d.update(center=[float(c) for c in o.center], radius=float(o.radius))
        d.update(v=o.velocity.v.tolist(), omega=o.velocity.omega.tolist(), depth_offset=o.depth_offset)
        objects.append(d)
    out = {
        "seed": spec.rng_seed,
        "flow_noise_sigma": spec.flow_noise_sigma,
        "event_texture_density": spec.event_texture_density,
        "events_per_pixel": spec.events_per_pixel,
        "outlier_fraction": spec.outlier_fraction,
        "outlier_max_px": spec.outlier_max_px,
        "dt": spec.dt,
        "t_start": spec.t_start,
        "z_max": spec.z_max,
        "intrinsics": {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy, "width": i.width, "height": i.height},
        "depth": depth,
        "camera": {"v": spec.camera_velocity.v.tolist(), "omega": spec.camera_velocity.omega.tolist()},
    }
    if objects:
        out["objects"] = objects
    return out
