import numpy as np
import pytest

from imoseg.egomotion import (
    DegenerateSampleError,
    EstimationFailedError,
    InsufficientDataError,
    RansacConfig,
    build_design_rows,
    design_rows,
    estimate_egomotion,
    lstsq_svd,
    solve_least_squares,
    solve_minimal,
)
from imoseg.geometry import (
    CameraIntrinsics,
    CameraVelocity,
    DepthDomainError,
    DepthMap,
    FlowField,
    PixelSample,
    render_rigid_field,
    rigid_flow_at,
)


def _sample(x, y, z, vel):
    return PixelSample(x, y, z, tuple(rigid_flow_at(x, y, z, vel)))


def _random_vel(rng, scale=0.5):
    return CameraVelocity(rng.uniform(-scale, scale, 3), rng.uniform(-scale, scale, 3))


def _scene(rng, intr=None, imo_fraction=0.3, offset=(3.0, 4.0)):
    """Rigid flow over textured depth with a box of pixels shifted by a constant offset."""
    intr = intr or CameraIntrinsics.desk()
    depth = DepthMap.from_array(rng.uniform(1.0, 2.8, intr.shape))
    vel = _random_vel(rng)
    rigid = render_rigid_field(depth, vel, intr)
    h, w = intr.shape
    box = np.zeros(intr.shape, bool)
    bw = int(round(w * imo_fraction))
    box[:, :bw] = True
    u = rigid.u + np.where(box, offset[0], 0.0)
    v = rigid.v + np.where(box, offset[1], 0.0)
    return FlowField(u, v, rigid.valid, rigid.dt), depth, vel, box, intr


class TestDesignRows:
    def test_principal_point(self):
        ax, ay, bx, by = build_design_rows(PixelSample(0.0, 0.0, 1.0, (0.3, -0.1)))
        assert ax.tolist() == [-1, 0, 0, 0, -1, 0]
        assert ay.tolist() == [0, -1, 0, 1, 0, 0]
        assert (bx, by) == (0.3, -0.1)

    def test_hand_expansion(self):
        ax, ay, _, _ = build_design_rows(PixelSample(0.2, 0.1, 2.0))
        assert np.allclose(ax, [-0.5, 0, 0.1, 0.02, -1.04, 0.1], rtol=0, atol=1e-15)
        assert np.allclose(ay, [0, -0.5, 0.05, 1.01, -0.02, -0.2], rtol=0, atol=1e-15)

    def test_consistent_with_rigid_flow(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = PixelSample(*rng.uniform(-1, 1, 2), rng.uniform(0.2, 4))
            ax, ay, _, _ = build_design_rows(s)
            for _ in range(100):
                theta = rng.normal(size=6)
                ref = rigid_flow_at(s.x, s.y, s.z, CameraVelocity.from_vector(theta))
                assert abs(ax @ theta - ref[0]) <= 1e-12 * max(1.0, abs(ref[0]))
                assert abs(ay @ theta - ref[1]) <= 1e-12 * max(1.0, abs(ref[1]))

    def test_vectorised(self):
        rng = np.random.default_rng(1)
        x, y = rng.uniform(-1, 1, (2, 30))
        z = rng.uniform(0.5, 3, 30)
        ax, ay = design_rows(x, y, z)
        for i in range(30):
            rx, ry, _, _ = build_design_rows(PixelSample(x[i], y[i], z[i]))
            assert np.array_equal(ax[i], rx) and np.array_equal(ay[i], ry)

    def test_bad_depth(self):
        with pytest.raises(DepthDomainError):
            design_rows([0.0], [0.0], [0.0])


class TestSolveMinimal:
    def test_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            vel = _random_vel(rng)
            samples = [_sample(*rng.uniform(-0.5, 0.5, 2), rng.uniform(1, 3), vel) for _ in range(3)]
            got = solve_minimal(samples)
            assert np.max(np.abs(got.as_vector() - vel.as_vector())) < 1e-9

    def test_duplicated_pixel_is_degenerate(self):
        vel = CameraVelocity([0.1, 0.2, 0.3], [0.0, 0.1, 0.0])
        s = _sample(0.1, 0.2, 1.5, vel)
        with pytest.raises(DegenerateSampleError):
            solve_minimal([s, s, s])

    def test_zero_flow(self):
        samples = [PixelSample(0.1, 0.0, 1.0), PixelSample(-0.2, 0.3, 2.0), PixelSample(0.25, -0.15, 1.4)]
        assert np.array_equal(solve_minimal(samples).as_vector(), np.zeros(6))

    def test_wrong_count(self):
        with pytest.raises(InsufficientDataError):
            solve_minimal([PixelSample(0.0, 0.0, 1.0)] * 4)


class TestSolveLeastSquares:
    def test_round_trip(self):
        rng = np.random.default_rng(3)
        vel = _random_vel(rng)
        samples = [_sample(*rng.uniform(-0.5, 0.5, 2), rng.uniform(1, 3), vel) for _ in range(200)]
        got = solve_least_squares(samples)
        assert np.max(np.abs(got.as_vector() - vel.as_vector())) < 1e-9

    def test_zero_flow(self):
        rng = np.random.default_rng(4)
        samples = [PixelSample(*rng.uniform(-0.5, 0.5, 2), rng.uniform(1, 3)) for _ in range(10)]
        assert np.allclose(solve_least_squares(samples).as_vector(), 0.0, atol=0)

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            solve_least_squares([PixelSample(0.0, 0.0, 1.0)] * 2)

    def test_error_shrinks_with_samples(self):
        rng = np.random.default_rng(5)
        vel = _random_vel(rng)
        sizes = [10, 100, 1000, 5000]
        mean_err = []
        for n in sizes:
            errs = []
            for _ in range(20):
                x, y = rng.uniform(-0.5, 0.5, (2, n))
                z = rng.uniform(1, 3, n)
                samples = []
                for i in range(n):
                    f = rigid_flow_at(x[i], y[i], z[i], vel) + rng.normal(0, 0.01, 2)
                    samples.append(PixelSample(x[i], y[i], z[i], tuple(f)))
                errs.append(np.linalg.norm(solve_least_squares(samples).as_vector() - vel.as_vector()))
            mean_err.append(np.mean(errs))
        assert all(a > b for a, b in zip(mean_err, mean_err[1:]))


class TestEstimate:
    def test_rejects_imo_offset(self):
        rng = np.random.default_rng(6)
        flow, depth, vel, box, intr = _scene(rng)
        est = estimate_egomotion(flow, depth, intr, RansacConfig())
        assert np.max(np.abs(est.velocity.as_vector() - vel.as_vector())) < 1e-6
        excluded = np.count_nonzero(box & ~est.inlier_mask) / np.count_nonzero(box)
        assert excluded >= 0.99

    def test_fully_rigid(self):
        rng = np.random.default_rng(7)
        flow, depth, vel, _, intr = _scene(rng, imo_fraction=0.0)
        est = estimate_egomotion(flow, depth, intr)
        assert np.max(np.abs(est.velocity.as_vector() - vel.as_vector())) < 1e-9
        assert est.inlier_count == np.count_nonzero(depth.valid)
        assert est.inlier_fraction == 1.0

    def test_zero_flow(self):
        intr = CameraIntrinsics.desk()
        depth = DepthMap.from_array(np.random.default_rng(8).uniform(1, 3, intr.shape))
        est = estimate_egomotion(FlowField.zeros(intr.shape), depth, intr)
        assert np.allclose(est.velocity.as_vector(), 0.0, atol=1e-15)
        assert est.inlier_count == intr.width * intr.height

    def test_estimate_invariants(self):
        rng = np.random.default_rng(9)
        flow, depth, _, _, intr = _scene(rng)
        noisy = FlowField(flow.u + rng.normal(0, 0.1, intr.shape), flow.v + rng.normal(0, 0.1, intr.shape), flow.valid)
        cfg = RansacConfig()
        est = estimate_egomotion(noisy, depth, intr, cfg)
        assert est.inlier_count == np.count_nonzero(est.inlier_mask)
        assert est.mean_inlier_residual <= cfg.inlier_threshold
        assert 1 <= est.iterations_used <= cfg.max_iterations

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        flow, depth, _, _, intr = _scene(rng)
        noisy = FlowField(flow.u + rng.normal(0, 0.2, intr.shape), flow.v, flow.valid)
        cfg = RansacConfig(rng_seed=123)
        a = estimate_egomotion(noisy, depth, intr, cfg)
        b = estimate_egomotion(noisy, depth, intr, cfg)
        assert np.array_equal(a.velocity.as_vector(), b.velocity.as_vector())
        assert np.array_equal(a.inlier_mask, b.inlier_mask)
        assert a.iterations_used == b.iterations_used

    def test_invalid_pixels_ignored(self):
        rng = np.random.default_rng(11)
        flow, depth, vel, box, intr = _scene(rng, imo_fraction=0.0)
        u = np.array(flow.u)
        u[:20] = np.nan
        valid = np.array(flow.valid)
        valid[:20] = False
        est = estimate_egomotion(FlowField(np.nan_to_num(u), flow.v, valid), depth, intr)
        assert np.max(np.abs(est.velocity.as_vector() - vel.as_vector())) < 1e-9
        assert not est.inlier_mask[:20].any()

    def test_noise_only_fails(self):
        rng = np.random.default_rng(12)
        intr = CameraIntrinsics.desk()
        depth = DepthMap.from_array(rng.uniform(1, 3, intr.shape))
        flow = FlowField(rng.uniform(-20, 20, intr.shape), rng.uniform(-20, 20, intr.shape), np.ones(intr.shape, bool))
        with pytest.raises(EstimationFailedError):
            estimate_egomotion(flow, depth, intr, RansacConfig(max_iterations=50))

    def test_too_few_valid(self):
        intr = CameraIntrinsics.desk()
        depth = DepthMap(np.ones(intr.shape), np.zeros(intr.shape, bool))
        with pytest.raises(InsufficientDataError):
            estimate_egomotion(FlowField.zeros(intr.shape), depth, intr)

    def test_refit_matches_svd_on_consensus(self):
        # once the inlier set is stable the refit is the SVD solution on it
        rng = np.random.default_rng(14)
        flow, depth, _, _, intr = _scene(rng, intr=CameraIntrinsics.desk())
        noisy = FlowField(flow.u + rng.normal(0, 0.1, intr.shape), flow.v + rng.normal(0, 0.1, intr.shape), flow.valid)
        est = estimate_egomotion(noisy, depth, intr, RansacConfig(refine_rounds=10))
        inl = est.inlier_mask
        x, y = intr.calibrated_grid()
        ax, ay = design_rows(x[inl], y[inl], depth.z[inl])
        a = np.vstack([ax * intr.fx * noisy.dt, ay * intr.fy * noisy.dt])
        b = np.concatenate([noisy.u[inl], noisy.v[inl]])
        ref = lstsq_svd(a, b)
        assert np.max(np.abs(est.velocity.as_vector() - ref)) <= 1e-9 * np.max(np.abs(ref))

    def test_naive_least_squares_is_biased(self):
        rng = np.random.default_rng(13)
        flow, depth, vel, _, intr = _scene(rng)
        est = estimate_egomotion(flow, depth, intr)
        x, y = intr.calibrated_grid()
        s = intr.fx * flow.dt
        idx = np.flatnonzero(depth.valid)[::7]
        samples = [
            PixelSample(x.flat[i], y.flat[i], depth.z.flat[i], (flow.u.flat[i] / s, flow.v.flat[i] / s))
            for i in idx
        ]
        naive = solve_least_squares(samples)
        err_naive = np.linalg.norm(naive.as_vector() - vel.as_vector())
        err_ransac = np.linalg.norm(est.velocity.as_vector() - vel.as_vector())
        assert err_naive > err_ransac


def test_config_validation():
    with pytest.raises(ValueError):
        RansacConfig(stop_probability=1.0)
    with pytest.raises(ValueError):
        RansacConfig(sample_size=2)
    with pytest.raises(ValueError):
        RansacConfig(max_iterations=0)
