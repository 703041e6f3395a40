import numpy as np
import pytest

from imoseg.config import load_config
from imoseg.geometry import CameraIntrinsics, CameraVelocity, DisjointnessError, rigid_flow_at
from imoseg.labeler import BACKGROUND
from imoseg.simulator import (
    DepthModel,
    SceneObject,
    SceneSpec,
    SceneSpecError,
    generate,
    min_imo_residual,
    noise_p99,
    random_spec,
    spec_from_dict,
    spec_to_dict,
    sweep,
)

SMALL = CameraIntrinsics(fx=80.0, fy=90.0, cx=19.5, cy=14.0, width=40, height=30)


def test_zero_velocity():
    b = generate(SceneSpec(intrinsics=SMALL))
    assert not b.flow.u.any() and not b.flow.v.any()
    assert (b.imo_mask.label == BACKGROUND).all()


def test_box_residual_matches_point_formula():
    obj_vel = CameraVelocity([0.3, -0.2, 0.1], [0.0, 0.0, 0.0])
    spec = SceneSpec(
        intrinsics=SMALL,
        depth_model=DepthModel("constant", z=2.0),
        camera_velocity=CameraVelocity([0.1, 0.0, 0.2], [0.05, -0.1, 0.02]),
        objects=(SceneObject("box", box=(5, 4, 15, 12), velocity=obj_vel),),
    )
    b = generate(spec)
    du = b.clean_flow.u - b.rigid_flow.u
    dv = b.clean_flow.v - b.rigid_flow.v
    region = b.imo_mask.imo
    assert region.sum() == 80
    assert not du[~region].any() and not dv[~region].any()
    x, y = SMALL.calibrated_grid()
    for i, j in zip(*np.nonzero(region)):
        ref = rigid_flow_at(x[i, j], y[i, j], 2.0, -obj_vel)
        assert du[i, j] == pytest.approx(SMALL.fx * spec.dt * ref[0], rel=1e-12, abs=1e-15)
        assert dv[i, j] == pytest.approx(SMALL.fy * spec.dt * ref[1], rel=1e-12, abs=1e-15)


def test_same_seed_bit_identical():
    spec = random_spec(5, intrinsics=SMALL, flow_noise_sigma=0.1, outlier_fraction=0.1)
    a, b = generate(spec), generate(spec)
    for name in ("flow", "clean_flow", "rigid_flow"):
        assert getattr(a, name).u.tobytes() == getattr(b, name).u.tobytes()
        assert getattr(a, name).v.tobytes() == getattr(b, name).v.tobytes()
    assert a.depth.z.tobytes() == b.depth.z.tobytes()
    assert a.events.events.tobytes() == b.events.events.tobytes()
    assert np.array_equal(a.imo_mask.label, b.imo_mask.label)


def test_different_seed_differs():
    a = generate(random_spec(1, intrinsics=SMALL))
    b = generate(random_spec(2, intrinsics=SMALL))
    assert not np.array_equal(a.depth.z, b.depth.z)


def test_clean_equals_rigid_outside_objects():
    b = generate(random_spec(3, intrinsics=SMALL, n_objects=2, object_fraction=0.2))
    out = ~b.imo_mask.imo
    assert np.array_equal(b.clean_flow.u[out], b.rigid_flow.u[out])
    assert np.array_equal(b.clean_flow.v[out], b.rigid_flow.v[out])
    assert min_imo_residual(b) >= 3.0 - 1e-9


def test_event_displacement_consistent():
    spec = random_spec(4, intrinsics=SMALL, event_texture_density=0.5)
    b = generate(spec)
    ev = b.events.events
    assert ev.size > 0
    assert np.all(np.diff(ev["t"]) >= 0)
    rows, cols = np.divmod(b.event_origin, SMALL.width)
    tau = (ev["t"] - spec.t_start) / spec.dt
    u = b.clean_flow.u.ravel()[b.event_origin]
    v = b.clean_flow.v.ravel()[b.event_origin]
    assert np.all(np.abs(ev["x"] - (cols + u * tau)) <= 0.5 + 1e-6)
    assert np.all(np.abs(ev["y"] - (rows + v * tau)) <= 0.5 + 1e-6)


def test_overlapping_objects():
    objs = (SceneObject(box=(0, 0, 10, 10)), SceneObject(box=(5, 5, 15, 15)))
    with pytest.raises(DisjointnessError):
        generate(SceneSpec(intrinsics=SMALL, objects=objs))


def test_spec_validation():
    with pytest.raises(SceneSpecError):
        SceneSpec(flow_noise_sigma=-1.0)
    with pytest.raises(SceneSpecError):
        DepthModel("wavy")
    with pytest.raises(SceneSpecError):
        SceneObject("triangle")


def test_noise_p99():
    rng = np.random.default_rng(0)
    r = np.hypot(*rng.normal(0, 0.1, (2, 400000)))
    assert np.quantile(r, 0.99) == pytest.approx(noise_p99(0.1), rel=0.01)


class TestSweep:
    def test_rigid_scene(self):
        cfg = load_config()
        spec = SceneSpec(
            depth_model=DepthModel("textured"),
            camera_velocity=CameraVelocity([0.2, -0.1, 0.3], [0.1, 0.05, -0.2]),
        )
        (row,) = sweep([spec], cfg)
        assert row.egomotion_error < 1e-6
        assert row.status in ("no-object", "rejected")
        assert row.iou is None

    def test_outliers_reduce_inliers(self):
        cfg = load_config()
        base = random_spec(11, n_objects=0)
        specs = [
            SceneSpec(**{**base.__dict__, "outlier_fraction": f}) for f in (0.0, 0.1, 0.2, 0.3, 0.4)
        ]
        counts = [r.inlier_count for r in sweep(specs, cfg)]
        assert all(a >= b for a, b in zip(counts, counts[1:])), counts
        assert counts[0] > counts[-1]

    def test_workers_do_not_change_rows(self):
        cfg = load_config()
        specs = [random_spec(s) for s in range(3)]
        a = sweep(specs, cfg, workers=1)
        b = sweep(specs, cfg, workers=3)
        assert [(r.status, r.egomotion_error, r.iou) for r in a] == [(r.status, r.egomotion_error, r.iou) for r in b]

    def test_empty(self):
        with pytest.raises(SceneSpecError):
            sweep([], load_config())


def test_spec_dict_round_trip():
    spec = random_spec(7, n_objects=2, depth_kind="plane", flow_noise_sigma=0.2)
    again = spec_from_dict(spec_to_dict(spec))
    assert spec_to_dict(again) == spec_to_dict(spec)
    a, b = generate(spec), generate(again)
    assert a.flow.u.tobytes() == b.flow.u.tobytes()


def test_spec_from_dict_errors():
    with pytest.raises(SceneSpecError):
        spec_from_dict({"bogus": 1})
    with pytest.raises(SceneSpecError):
        spec_from_dict({"preset": "mars"})
    with pytest.raises(SceneSpecError):
        spec_from_dict({"objects": [{"colour": "red"}]})
