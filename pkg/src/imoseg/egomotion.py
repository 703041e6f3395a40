"""Robust camera egomotion from dense flow and depth.

The linear system relating a 6-DOF twist to calibrated flow is built from
the basis functions and coefficient tables in :mod:`imoseg.geometry`, the
same ones behind :func:`imoseg.geometry.rigid_flow`, so the design matrix
cannot drift from the motion-field equations.  RANSAC over 3-pixel minimal samples rejects
independently moving pixels; the consensus set is then refit by least squares.
"""

from __future__ import annotations

import functools
import logging
import threading
from dataclasses import dataclass

import numpy as np

from .geometry import (
    BASIS_COEFFS_X,
    BASIS_COEFFS_Y,
    BASIS_SIZE,
    DEPTH_TERMS,
    CameraIntrinsics,
    CameraVelocity,
    DepthDomainError,
    DepthMap,
    FlowField,
    PixelSample,
    ShapeMismatchError,
    depth_basis,
    motion_field_columns,
    pixel_basis,
)

log = logging.getLogger(__name__)

class EgomotionError(RuntimeError):
    pass


class DegenerateSampleError(EgomotionError):
    """Minimal sample is too ill-conditioned to define a twist."""


class InsufficientDataError(EgomotionError, ValueError):
    pass


class EstimationFailedError(EgomotionError):
    """No hypothesis gathered enough consensus."""


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 300
    stop_probability: float = 0.999
    sample_size: int = 3
    inlier_threshold: float = 0.5
    min_inlier_fraction: float = 0.3
    rng_seed: int = 0
    max_eval_pixels: int = 10_000
    max_condition: float = 1e12
    refine_rounds: int = 1

    def __post_init__(self):
        if not 0 < self.stop_probability < 1:
            raise ValueError(f"stop_probability must lie in (0, 1), got {self.stop_probability}")
        if self.sample_size < 3:
            raise ValueError(f"sample_size must be >= 3, got {self.sample_size}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.inlier_threshold > 0:
            raise ValueError(f"inlier_threshold must be positive, got {self.inlier_threshold}")
        if not 0 <= self.min_inlier_fraction <= 1:
            raise ValueError(f"min_inlier_fraction must lie in [0, 1], got {self.min_inlier_fraction}")
        if self.max_eval_pixels < self.sample_size:
            raise ValueError("max_eval_pixels must be at least sample_size")


@dataclass(frozen=True, eq=False)
class EgomotionEstimate:
    velocity: CameraVelocity
    inlier_mask: np.ndarray
    inlier_count: int
    iterations_used: int
    mean_inlier_residual: float
    valid_count: int
    # residual magnitude in pixels against the final twist, 0 where not valid
    residual: np.ndarray | None = None
    residual_valid: np.ndarray | None = None

    @property
    def inlier_fraction(self) -> float:
        return self.inlier_count / self.valid_count if self.valid_count else 0.0


def design_rows(x, y, z):
    """Coefficient rows of the twist for many calibrated points.

    Returns ``(ax, ay)``, each shaped ``(N, 6)``, with ``ax @ theta`` equal
    to the x component of :func:`~imoseg.geometry.rigid_flow` for twist
    ``theta``.
    """
    x = np.ravel(np.asarray(x, dtype=np.float64))
    y = np.ravel(np.asarray(y, dtype=np.float64))
    z = np.ravel(np.asarray(z, dtype=np.float64))
    if np.any(~(z > 0)):
        raise DepthDomainError("depth must be positive")
    cx, cy = motion_field_columns(x, y, z)
    ax = np.stack([np.broadcast_to(c, x.shape) for c in cx], axis=1)
    ay = np.stack([np.broadcast_to(c, x.shape) for c in cy], axis=1)
    return ax, ay


_BLOCK = 8192


@functools.lru_cache(maxsize=8)
def _pixel_basis_grid(intr: CameraIntrinsics):
    gx, gy = intr.calibrated_grid()
    out = np.stack(pixel_basis(gx.ravel(), gy.ravel()))
    out.setflags(write=False)
    return out


def build_design_rows(sample: PixelSample):
    """Two rows of the linear system plus their right-hand sides."""
    if not sample.z > 0:
        raise DepthDomainError(f"depth must be positive, got {sample.z}")
    ax, ay = design_rows(sample.x, sample.y, sample.z)
    return ax[0], ay[0], float(sample.flow[0]), float(sample.flow[1])


def _stack(samples):
    rows, rhs = [], []
    for s in samples:
        ax, ay, bx, by = build_design_rows(s)
        rows += [ax, ay]
        rhs += [bx, by]
    return np.array(rows), np.array(rhs)


def _solve_square(a, b, max_condition):
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > max_condition:
        raise DegenerateSampleError(f"condition number {cond:.3g} exceeds {max_condition:.3g}")
    return np.linalg.solve(a, b)


def solve_minimal(samples, max_condition: float = 1e12) -> CameraVelocity:
    """Exact twist from three pixels (six equations)."""
    samples = list(samples)
    if len(samples) != 3:
        raise InsufficientDataError(f"minimal solve needs exactly 3 samples, got {len(samples)}")
    a, b = _stack(samples)
    return CameraVelocity.from_vector(_solve_square(a, b, max_condition))


def lstsq_svd(a, b):
    """Minimum-norm least-squares solution via a thin SVD."""
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = max(a.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    keep = s > cutoff
    coeffs = np.zeros_like(s)
    coeffs[keep] = (u.T[keep] @ b) / s[keep]
    return vt.T @ coeffs


def solve_least_squares(samples) -> CameraVelocity:
    samples = list(samples)
    if len(samples) < 3:
        raise InsufficientDataError(f"least squares needs >= 3 samples, got {len(samples)}")
    a, b = _stack(samples)
    return CameraVelocity.from_vector(lstsq_svd(a, b))


class _Workspace(threading.local):
    """Per-thread scratch memory reused across calls.

    Large fresh allocations are paid for in page faults on every slice;
    handing out views of one grown buffer avoids that.
    """

    def __init__(self):
        self.flat = np.empty(0)

    def take(self, n):
        """Basis ``(8, n)``, observations ``(2, n)`` and one vector of length n."""
        size = (BASIS_SIZE + 3) * n
        if self.flat.size < size:
            self.flat = np.empty(size)
        f = self.flat[:size]
        k = BASIS_SIZE * n
        return f[:k].reshape(BASIS_SIZE, n), f[k : k + 2 * n].reshape(2, n), f[k + 2 * n :]


_WORKSPACE = _Workspace()


class _ConsensusSolver:
    """Least squares over changing row subsets of one tall system.

    Rows are stored as the eight basis functions of the motion field, one
    column per pixel, and mapped to twist coefficients by the small tables
    ``mx``/``my``.  The basis cross-product of the selected pixels is
    obtained from the full one by removing the excluded pixels when they are
    the minority, columns are equilibrated, the small system is solved by
    SVD and one step of iterative refinement on the true residual restores
    full accuracy.  Every pass walks the data in cache-sized blocks and does
    all the work needed from that block at once.
    """

    def __init__(self, basis, obs, sq, mx, my, gram_all):
        self.basis, self.obs, self.sq = basis, obs, sq
        self.mx, self.my = mx, my
        self.gram_all = gram_all
        n = sq.size
        self.blocks = [slice(lo, min(lo + _BLOCK, n)) for lo in range(0, n, _BLOCK)]

    def _coeffs(self, theta):
        return np.stack((theta @ self.mx, theta @ self.my))

    def _twist(self, g):
        return self.mx @ g[:, 0] + self.my @ g[:, 1]

    def classify(self, theta, thr2, inliers) -> np.ndarray:
        """Squared residuals at ``theta`` into ``sq``, pixels under ``thr2`` into
        ``inliers``; returns the design projection of the inlier observations."""
        p = self._coeffs(theta)
        g = np.zeros((BASIS_SIZE, 2))
        for s in self.blocks:
            b, obs, m = self.basis[:, s], self.obs[:, s], inliers[s]
            r = obs - p @ b
            np.square(r, out=r)
            np.add(r[0], r[1], out=self.sq[s])
            np.less(self.sq[s], thr2, out=m)
            g += b @ (obs * m).T
        return self._twist(g)

    def _gram(self, mask):
        drop = np.flatnonzero(~mask)
        if 2 * drop.size <= mask.size:
            out = self.basis.take(drop, axis=1)
            basis_gram = self.gram_all - out @ out.T
        else:
            keep = self.basis.take(np.flatnonzero(mask), axis=1)
            basis_gram = keep @ keep.T
        return self.mx @ basis_gram @ self.mx.T + self.my @ basis_gram @ self.my.T

    def solve(self, mask, h) -> np.ndarray:
        """Fit on the pixels in ``mask``; ``h`` is what ``classify`` returned for it."""
        gram = self._gram(mask)
        scale = np.sqrt(np.clip(np.diag(gram), 0.0, None))
        scale[scale == 0] = 1.0
        pinv = np.linalg.pinv(gram / np.outer(scale, scale), rcond=1e-13, hermitian=True)
        theta = (pinv @ (h / scale)) / scale
        p = self._coeffs(theta)
        g = np.zeros((BASIS_SIZE, 2))
        for s in self.blocks:
            b = self.basis[:, s]
            r = self.obs[:, s] - p @ b
            r *= mask[s]
            g += b @ r.T
        return theta + (pinv @ (self._twist(g) / scale)) / scale


def _needed_iterations(inlier_ratio, sample_size, stop_probability):
    """Iterations after which a clean sample was drawn with the stop probability."""
    good = inlier_ratio**sample_size
    if good >= 1.0:
        return 0.0
    if good <= 0.0:
        return np.inf
    return np.log1p(-stop_probability) / np.log1p(-good)


def estimate_egomotion(
    flow: FlowField,
    depth: DepthMap,
    intr: CameraIntrinsics,
    cfg: RansacConfig | None = None,
) -> EgomotionEstimate:
    """RANSAC twist estimate, refined by least squares on the consensus set.

    Residuals and the inlier threshold are measured in pixels per slice.
    The result depends only on the inputs and ``cfg.rng_seed``.
    """
    cfg = cfg or RansacConfig()
    if flow.shape != depth.shape or flow.shape != intr.shape:
        raise ShapeMismatchError(
            f"flow {flow.shape}, depth {depth.shape} and sensor {intr.shape} disagree"
        )
    valid = flow.valid & depth.valid & np.isfinite(flow.u) & np.isfinite(flow.v)
    idx = np.flatnonzero(valid)
    if idx.size < cfg.sample_size:
        raise InsufficientDataError(f"only {idx.size} jointly valid pixels")

    gx, gy = intr.calibrated_grid()
    sx, sy = intr.fx * flow.dt, intr.fy * flow.dt
    n = idx.size
    dense = n == valid.size
    basis, obs, sq = _WORKSPACE.take(n)
    x, y, z = gx.ravel(), gy.ravel(), depth.z.ravel()
    if not dense:
        x, y, z = x[idx], y[idx], z[idx]
    pixel_terms = _pixel_basis_grid(intr)
    gram_all = np.zeros((BASIS_SIZE, BASIS_SIZE))
    for lo in range(0, n, _BLOCK):
        blk = slice(lo, min(lo + _BLOCK, n))
        depth_basis(x[blk], y[blk], z[blk], out=basis[:DEPTH_TERMS, blk])
        basis[DEPTH_TERMS:, blk] = pixel_terms[:, blk] if dense else pixel_terms[:, idx[blk]]
        part = basis[:, blk]
        gram_all += part @ part.T
    obs[0] = flow.u.ravel() if dense else flow.u.ravel()[idx]
    obs[1] = flow.v.ravel() if dense else flow.v.ravel()[idx]
    # pixel-unit coefficients so residuals compare directly against the threshold
    mx, my = sx * BASIS_COEFFS_X, sy * BASIS_COEFFS_Y
    thr2 = cfg.inlier_threshold**2

    rng = np.random.default_rng(cfg.rng_seed)
    if n > cfg.max_eval_pixels:
        pool = np.sort(rng.choice(n, size=cfg.max_eval_pixels, replace=False))
        pool_basis, pool_obs = basis[:, pool], obs[:, pool]
    else:
        pool = np.arange(n)
        pool_basis, pool_obs = basis, obs

    best_theta, best_count, best_iter = None, -1, -1
    draws, iterations = 0, 0
    max_draws = 10 * cfg.max_iterations
    needed = np.inf
    a = np.empty((2 * cfg.sample_size, 6))
    b = np.empty(2 * cfg.sample_size)
    while iterations < cfg.max_iterations and draws < max_draws:
        draws += 1
        pick = rng.choice(pool.size, size=cfg.sample_size, replace=False)
        # calibrated units, as in solve_minimal
        chosen = pool_basis[:, pick]
        a[0::2] = (BASIS_COEFFS_X @ chosen).T
        a[1::2] = (BASIS_COEFFS_Y @ chosen).T
        b[0::2] = pool_obs[0, pick] / sx
        b[1::2] = pool_obs[1, pick] / sy
        try:
            if cfg.sample_size == 3:
                theta = _solve_square(a, b, cfg.max_condition)
            else:
                if np.linalg.cond(a) > cfg.max_condition:
                    raise DegenerateSampleError("ill-conditioned sample")
                theta = lstsq_svd(a, b)
        except (DegenerateSampleError, np.linalg.LinAlgError):
            continue
        iterations += 1
        r = pool_obs - np.stack((theta @ mx, theta @ my)) @ pool_basis
        np.square(r, out=r)
        count = int(np.count_nonzero(r[0] + r[1] < thr2))
        if count > best_count:
            best_theta, best_count, best_iter = theta, count, iterations
            needed = _needed_iterations(count / pool.size, cfg.sample_size, cfg.stop_probability)
        if iterations >= needed:
            break

    if best_theta is None:
        raise EstimationFailedError(f"every one of {draws} minimal samples was degenerate")
    best_ratio = best_count / pool.size
    if best_ratio < cfg.min_inlier_fraction:
        raise EstimationFailedError(
            f"best consensus {best_ratio:.3f} below min_inlier_fraction {cfg.min_inlier_fraction}"
        )
    log.debug("ransac: %d iterations, best %d/%d at iteration %d", iterations, best_count, pool.size, best_iter)

    solver = _ConsensusSolver(basis, obs, sq, mx, my, gram_all)
    inliers = np.empty(n, dtype=bool)
    fitted = np.empty(n, dtype=bool)
    h = solver.classify(best_theta, thr2, inliers)
    for _ in range(max(1, cfg.refine_rounds)):
        if np.count_nonzero(inliers) < cfg.sample_size:
            raise EstimationFailedError("consensus set collapsed during refinement")
        theta = solver.solve(inliers, h)
        inliers, fitted = fitted, inliers
        h = solver.classify(theta, thr2, inliers)
        if np.array_equal(inliers, fitted):
            break

    count = int(np.count_nonzero(inliers))
    if count < cfg.min_inlier_fraction * idx.size or count == 0:
        raise EstimationFailedError(f"refined consensus {count}/{idx.size} too small")

    residual = np.zeros(flow.shape)
    if dense:
        full = np.sqrt(sq, out=residual.reshape(-1))
    else:
        full = np.sqrt(sq)
        residual.ravel()[idx] = full
    mask = np.zeros(flow.shape, dtype=bool)
    mask.ravel()[idx[inliers]] = True
    return EgomotionEstimate(
        velocity=CameraVelocity.from_vector(theta),
        inlier_mask=mask,
        inlier_count=count,
        iterations_used=iterations,
        mean_inlier_residual=float(full[inliers].mean()),
        valid_count=int(idx.size),
        residual=residual,
        residual_valid=valid,
    )
