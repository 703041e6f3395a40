"""Calibrated pinhole camera and the instantaneous rigid motion field.

Flow rasters are stored in pixel units per slice (``dt`` seconds).  The
motion-field equations are evaluated in calibrated coordinates, in units of
calibrated displacement per second, and converted at the raster boundary.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Base class for invalid geometric inputs."""


class DepthDomainError(GeometryError):
    """Depth was non-positive or non-finite where a positive depth is needed."""


class ShapeMismatchError(GeometryError):
    """Rasters (or rasters and intrinsics) disagree on dimensions."""


class DisjointnessError(GeometryError):
    """Two object regions claim the same pixel."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"sensor size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} sensor"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def calibrated_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Calibrated (x, y) coordinates of every pixel centre, each shaped (H, W).

        The arrays are cached per sensor and read-only.
        """
        return _grid(self)

    def to_calibrated(self, col, row):
        return (np.asarray(col, dtype=np.float64) - self.cx) / self.fx, (
            np.asarray(row, dtype=np.float64) - self.cy
        ) / self.fy

    @classmethod
    def desk(cls) -> "CameraIntrinsics":
        """Small 120 x 160 sensor used by default for fast suites."""
        return cls(fx=200.0, fy=200.0, cx=79.5, cy=59.5, width=160, height=120)

    @classmethod
    def evimo_crop(cls) -> "CameraIntrinsics":
        """215 x 320 crop of a DAVIS 346 sensor."""
        return cls(fx=250.0, fy=250.0, cx=159.5, cy=107.0, width=320, height=215)


@dataclass(frozen=True)
class CameraVelocity:
    """Instantaneous twist: linear ``v`` (m/s) and angular ``omega`` (rad/s)."""

    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64).reshape(3)
        w = np.asarray(self.omega, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
            raise GeometryError("velocity components must be finite")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "omega", w)

    @classmethod
    def from_vector(cls, theta) -> "CameraVelocity":
        theta = np.asarray(theta, dtype=np.float64).reshape(6)
        return cls(theta[:3].copy(), theta[3:].copy())

    def as_vector(self) -> np.ndarray:
        """``(v_x, v_y, v_z, omega_x, omega_y, omega_z)``."""
        return np.concatenate([self.v, self.omega])

    def __neg__(self) -> "CameraVelocity":
        return CameraVelocity(-self.v, -self.omega)

    def __eq__(self, other):
        if not isinstance(other, CameraVelocity):
            return NotImplemented
        return bool(np.array_equal(self.as_vector(), other.as_vector()))

    def __hash__(self):
        return hash(self.as_vector().tobytes())


@dataclass(frozen=True)
class PixelSample:
    """One calibrated observation: position, depth and flow per second."""

    x: float
    y: float
    z: float
    flow: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (np.isfinite(self.z) and self.z > 0):
            raise DepthDomainError(f"depth must be positive, got {self.z}")


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense flow in pixels per slice; ``u`` is along columns, ``v`` along rows."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    dt: float = 0.025

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if u.ndim != 2 or u.shape != v.shape or u.shape != valid.shape:
            raise ShapeMismatchError(
                f"u, v, valid must share a 2-D shape, got {u.shape}, {v.shape}, {valid.shape}"
            )
        if not self.dt > 0:
            raise GeometryError(f"dt must be positive, got {self.dt}")
        for name, arr in (("u", u), ("v", v), ("valid", valid)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def zeros(cls, shape, dt=0.025, valid=None) -> "FlowField":
        if valid is None:
            valid = np.ones(shape, dtype=bool)
        return cls(np.zeros(shape), np.zeros(shape), valid, dt)

    def with_valid(self, valid) -> "FlowField":
        return FlowField(self.u, self.v, valid, self.dt)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric depth; pixels outside ``(0, z_max]`` or non-finite are invalid."""

    z: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if z.ndim != 2 or z.shape != valid.shape:
            raise ShapeMismatchError(f"z and valid must share a 2-D shape, got {z.shape}, {valid.shape}")
        with np.errstate(invalid="ignore"):
            if np.any(valid & ~(np.isfinite(z) & (z > 0))):
                raise DepthDomainError("valid depth pixels must be finite and positive")
        z.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape

    @classmethod
    def from_array(cls, z, z_max: float = 3.0) -> "DepthMap":
        z = np.asarray(z, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(z) & (z > 0) & (z <= z_max)
        return cls(z, valid)


@functools.lru_cache(maxsize=8)
def _grid(intr: CameraIntrinsics):
    cols = (np.arange(intr.width, dtype=np.float64) - intr.cx) / intr.fx
    rows = (np.arange(intr.height, dtype=np.float64) - intr.cy) / intr.fy
    x, y = np.meshgrid(cols, rows)
    x.setflags(write=False)
    y.setflags(write=False)
    return x, y


# The motion field is linear in the twist and every coefficient is, up to
# sign, one of eight functions of the calibrated pixel and its depth.  Three
# of them involve depth; the other five depend on the pixel alone.
DEPTH_TERMS = 3
BASIS_SIZE = 8
# (basis index, sign) of each twist coefficient, None where it vanishes
_BASIS_X = ((0, -1.0), None, (1, 1.0), (3, 1.0), (4, -1.0), (7, 1.0))
_BASIS_Y = (None, (0, -1.0), (2, 1.0), (5, 1.0), (3, -1.0), (6, -1.0))


def _table(entries):
    m = np.zeros((6, BASIS_SIZE))
    for j, e in enumerate(entries):
        if e is not None:
            m[j, e[0]] = e[1]
    m.setflags(write=False)
    return m


# ``cx[j] = sum_k BASIS_COEFFS_X[j, k] * basis[k]``, likewise for y
BASIS_COEFFS_X = _table(_BASIS_X)
BASIS_COEFFS_Y = _table(_BASIS_Y)


def _rows(out, n):
    return (None,) * n if out is None else tuple(out[k, ...] for k in range(n))


def depth_basis(x, y, z, out=None):
    """Depth-dependent basis terms ``(1/z, x/z, y/z)``.

    With ``out`` (shape ``(3, ...)``) the terms are written into its rows.
    """
    o = _rows(out, DEPTH_TERMS)
    inv_z = np.divide(1.0, z, out=o[0])
    return inv_z, np.multiply(x, inv_z, out=o[1]), np.multiply(y, inv_z, out=o[2])


def pixel_basis(x, y, out=None):
    """Pixel-only basis terms ``(xy, 1 + x^2, 1 + y^2, x, y)``; ``out`` as in :func:`depth_basis`."""
    o = _rows(out, BASIS_SIZE - DEPTH_TERMS)
    return (
        np.multiply(x, y, out=o[0]),
        np.add(np.multiply(x, x, out=o[1]), 1.0, out=o[1]),
        np.add(np.multiply(y, y, out=o[2]), 1.0, out=o[2]),
        np.positive(x, out=o[3]),
        np.positive(y, out=o[4]),
    )


def motion_field_columns(x, y, z):
    """Coefficients of the twist in the instantaneous motion field.

    Returns two 6-tuples ``(cx, cy)``; ``sum(cx[j] * theta[j])`` is the x
    component of the calibrated flow per second for the twist
    ``theta = (v_x, v_y, v_z, omega_x, omega_y, omega_z)``.  Entries are
    arrays broadcast from the inputs, or the scalar 0 where the coefficient
    vanishes identically.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    basis = (*depth_basis(x, y, z), *pixel_basis(x, y))

    def pick(entries):
        return tuple(0.0 if e is None else (basis[e[0]] if e[1] > 0 else -basis[e[0]]) for e in entries)

    return pick(_BASIS_X), pick(_BASIS_Y)


def rigid_flow(x, y, z, v, omega):
    """Vectorised motion field of static points seen from a moving camera.

    Args:
        x, y: calibrated image coordinates (broadcastable arrays).
        z: depth along the optical axis, strictly positive.
        v, omega: linear and angular camera velocity, 3-vectors.

    Returns:
        Tuple ``(xdot, ydot)`` in calibrated units per second.
    """
    theta = [float(c) for c in v] + [float(c) for c in omega]
    cx, cy = motion_field_columns(x, y, z)
    xdot = sum(t * c for t, c in zip(theta, cx) if t != 0.0)
    ydot = sum(t * c for t, c in zip(theta, cy) if t != 0.0)
    shape = np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(z))

    def full(a):
        # fresh writable arrays of the broadcast shape, also when a term vanished
        return a + 0.0 if np.shape(a) == shape else np.broadcast_to(a, shape) + 0.0

    return full(xdot), full(ydot)


def rigid_flow_at(x: float, y: float, z: float, vel: CameraVelocity) -> np.ndarray:
    """Motion field at a single calibrated point, as a 2-vector per second."""
    if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
        raise GeometryError("inputs must be finite")
    if z <= 0:
        raise DepthDomainError(f"depth must be positive, got {z}")
    xdot, ydot = rigid_flow(x, y, z, vel.v, vel.omega)
    return np.array([float(xdot), float(ydot)])


def render_rigid_field(
    depth: DepthMap, vel: CameraVelocity, intr: CameraIntrinsics, dt: float = 0.025
) -> FlowField:
    """Flow induced by camera motion alone, in pixels per slice."""
    if depth.shape != intr.shape:
        raise ShapeMismatchError(f"depth {depth.shape} does not match sensor {intr.shape}")
    x, y = intr.calibrated_grid()
    # depth at invalid pixels is arbitrary, keep the division finite
    z = np.where(depth.valid, depth.z, 1.0)
    xdot, ydot = rigid_flow(x, y, z, vel.v, vel.omega)
    u = np.where(depth.valid, xdot * intr.fx * dt, 0.0)
    v = np.where(depth.valid, ydot * intr.fy * dt, 0.0)
    return FlowField(u, v, depth.valid.copy(), dt)


def compose_motion_field(rigid: FlowField, object_fields) -> FlowField:
    """Add each object's field to the rigid field inside its region.

    ``object_fields`` is a sequence of ``(FlowField, region_mask)`` pairs whose
    regions must be pairwise disjoint.  Outside every region the rigid field
    is returned untouched.
    """
    u = np.array(rigid.u)
    v = np.array(rigid.v)
    valid = np.array(rigid.valid)
    claimed = np.zeros(rigid.shape, dtype=bool)
    for i, (obj, region) in enumerate(object_fields):
        region = np.asarray(region, dtype=bool)
        if obj.shape != rigid.shape or region.shape != rigid.shape:
            raise ShapeMismatchError(f"object {i} does not match rigid field shape {rigid.shape}")
        if obj.dt != rigid.dt:
            raise GeometryError(f"object {i} has dt={obj.dt}, rigid field has dt={rigid.dt}")
        if np.any(claimed & region):
            raise DisjointnessError(f"object {i} overlaps an earlier object region")
        claimed |= region
        u[region] += obj.u[region]
        v[region] += obj.v[region]
        valid[region] &= obj.valid[region]
    return FlowField(u, v, valid, rigid.dt)
