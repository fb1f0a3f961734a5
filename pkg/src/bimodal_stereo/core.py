"""Grids, masks, point clouds and similarity poses shared by every stage.

Pixel ``(row, col)`` of a grid sits at scene coordinates
``x = col * pitch_x``, ``y = row * pitch_y`` (orthographic lift).  Masked-out
cells are stored as NaN so that an accidental read poisons any reduction
instead of silently counting as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9
LOG_FLOOR = 1e-6


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _check_mask(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match grid shape {shape}")
    return mask


@dataclass(frozen=True, eq=False)
class DepthGrid:
    """Per-pixel depth ``z`` with a validity mask and pixel pitch ``(px, py)``."""

    z: np.ndarray
    mask: np.ndarray = None
    pitch: tuple = (1.0, 1.0)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim != 2:
            raise ValueError("depth must be a 2-D array")
        mask = np.isfinite(z) if self.mask is None else _check_mask(self.mask, z.shape)
        if not np.all(np.isfinite(z[mask])):
            raise ValueError("masked-in depth values must be finite")
        pitch = tuple(float(p) for p in np.broadcast_to(np.asarray(self.pitch, float), (2,)))
        if min(pitch) <= 0:
            raise ValueError("pixel pitch must be positive")
        object.__setattr__(self, "z", _frozen(np.where(mask, z, np.nan)))
        object.__setattr__(self, "mask", _frozen(mask, bool))
        object.__setattr__(self, "pitch", pitch)

    @property
    def shape(self):
        return self.z.shape

    @property
    def height(self):
        return self.z.shape[0]

    @property
    def width(self):
        return self.z.shape[1]

    def with_mask(self, mask):
        return DepthGrid(self.z, self.mask & mask, self.pitch)


@dataclass(frozen=True, eq=False)
class NormalField:
    """Unit normals ``(H, W, 3)``, oriented towards the camera (``n3 >= 0``)."""

    n: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float)
        if n.ndim != 3 or n.shape[2] != 3:
            raise ValueError("normal field must have shape (H, W, 3)")
        mask = np.all(np.isfinite(n), axis=2) if self.mask is None else _check_mask(self.mask, n.shape[:2])
        v = n[mask]
        if v.size:
            if np.max(np.abs(np.linalg.norm(v, axis=1) - 1.0)) > UNIT_TOL:
                raise ValueError("masked-in normals must have unit length")
            if np.min(v[:, 2]) < 0:
                raise ValueError("masked-in normals must face the camera (n3 >= 0)")
        object.__setattr__(self, "n", _frozen(np.where(mask[..., None], n, np.nan)))
        object.__setattr__(self, "mask", _frozen(mask, bool))

    @property
    def shape(self):
        return self.mask.shape


@dataclass(frozen=True, eq=False)
class LogShadingImage:
    """Per-pixel RGB log-intensities ``(H, W, 3)``."""

    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError("log-shading image must have shape (H, W, 3)")
        mask = np.all(np.isfinite(v), axis=2) if self.mask is None else _check_mask(self.mask, v.shape[:2])
        if not np.all(np.isfinite(v[mask])):
            raise ValueError("masked-in log-shading values must be finite")
        object.__setattr__(self, "values", _frozen(np.where(mask[..., None], v, np.nan)))
        object.__setattr__(self, "mask", _frozen(mask, bool))

    @property
    def shape(self):
        return self.mask.shape

    @classmethod
    def from_intensity(cls, intensity, mask=None):
        """Clamp linear intensities to ``LOG_FLOOR`` and take logs."""
        intensity = np.asarray(intensity, dtype=float)
        return cls(np.log(np.maximum(intensity, LOG_FLOOR)), mask)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """3-D points with an optional flat source-pixel index per point."""

    points: np.ndarray
    index: np.ndarray = None
    grid_shape: tuple = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        if self.index is not None:
            idx = np.asarray(self.index, dtype=np.int64).ravel()
            if idx.shape[0] != pts.shape[0]:
                raise ValueError("index length must match number of points")
            if np.unique(idx).size != idx.size:
                raise ValueError("source indices must be unique")
            if self.grid_shape is not None:
                size = int(np.prod(self.grid_shape))
                if idx.size and (idx.min() < 0 or idx.max() >= size):
                    raise ValueError("source index outside the originating grid")
            object.__setattr__(self, "index", _frozen(idx, np.int64))

    def __len__(self):
        return self.points.shape[0]


def rot_x(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(alpha, beta, gamma):
    """``Rx(alpha) @ Ry(beta) @ Rz(gamma)``, angles in degrees."""
    return rot_x(alpha) @ rot_y(beta) @ rot_z(gamma)


def matrix_to_euler(R):
    """Closed-form XYZ angles (degrees) of a rotation ``Rx Ry Rz``."""
    R = np.asarray(R, dtype=float)
    beta = np.arcsin(np.clip(R[0, 2], -1.0, 1.0))
    alpha = np.arctan2(-R[1, 2], R[2, 2])
    gamma = np.arctan2(-R[0, 1], R[0, 0])
    return tuple(float(v) for v in np.degrees([alpha, beta, gamma]))


@dataclass(frozen=True, eq=False)
class SimilarityPose:
    """``T(p) = s R p + t``."""

    s: float = 1.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float).reshape(3)
        s = float(self.s)
        if R.shape != (3, 3):
            raise ValueError("R must be 3x3")
        if not s > 0:
            raise ValueError("scale must be positive")
        if abs(np.linalg.det(R) - 1.0) > UNIT_TOL or np.linalg.norm(R.T @ R - np.eye(3)) > UNIT_TOL:
            raise ValueError("R must be a proper rotation")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "R", _frozen(R))
        object.__setattr__(self, "t", _frozen(t))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_euler(cls, s=1.0, angles=(0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)):
        return cls(s, euler_to_matrix(*angles), t)

    @property
    def euler(self):
        """``(alpha, beta, gamma)`` in degrees."""
        return matrix_to_euler(self.R)

    def inverse(self):
        Rt = self.R.T
        return SimilarityPose(1.0 / self.s, Rt, -(Rt @ self.t) / self.s)

    def compose(self, other):
        """``self(other(p))``."""
        return SimilarityPose(self.s * other.s, self.R @ other.R, self.s * self.R @ other.t + self.t)

    def transform(self, points):
        pts = np.asarray(points, dtype=float)
        return self.s * pts @ self.R.T + self.t

    def to_dict(self):
        a, b, g = self.euler
        return {
            "s": self.s,
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t],
            "alpha_deg": a,
            "beta_deg": b,
            "gamma_deg": g,
        }

    @classmethod
    def from_dict(cls, d):
        R = np.asarray(d["R"], dtype=float).reshape(3, 3)
        if np.linalg.norm(R.T @ R - np.eye(3)) > UNIT_TOL:
            # rounded text values: snap to the nearest rotation
            U, _, Vt = np.linalg.svd(R)
            R = U @ Vt
        return cls(d["s"], R, d["t"])


def stencil(shape, axis, spacing):
    """Finite-difference stencil along ``axis`` (1 = x/columns, 0 = y/rows).

    Returns flat index arrays ``(plus, minus)`` and the divisor so that the
    derivative at every pixel is ``(z[plus] - z[minus]) / divisor``: central
    differences inside the grid, one-sided at the borders.  Pixels along an
    axis of length 1 get ``plus == minus`` and no usable derivative.
    """
    h, w = shape
    rows, cols = np.indices(shape)
    pos = cols if axis == 1 else rows
    n = w if axis == 1 else h
    lo = np.clip(pos - 1, 0, n - 1)
    hi = np.clip(pos + 1, 0, n - 1)
    div = (hi - lo) * float(spacing)
    if axis == 1:
        plus, minus = rows * w + hi, rows * w + lo
    else:
        plus, minus = hi * w + cols, lo * w + cols
    return plus.ravel(), minus.ravel(), div.ravel()


def depth_gradients(depth):
    """``(p, q, valid)`` with ``p = dz/dx`` and ``q = dz/dy``.

    A pixel is valid only when it and every cell its stencils touch are
    masked in.
    """
    z = depth.z.ravel()
    m = depth.mask.ravel()
    out = []
    valid = m.copy()
    for axis, spacing in ((1, depth.pitch[0]), (0, depth.pitch[1])):
        plus, minus, div = stencil(depth.shape, axis, spacing)
        ok = m[plus] & m[minus] & (div > 0)
        d = np.full(z.shape, np.nan)
        d[ok] = (z[plus[ok]] - z[minus[ok]]) / div[ok]
        valid &= ok
        out.append(d)
    p, q = (np.where(valid, d, np.nan).reshape(depth.shape) for d in out)
    return p, q, valid.reshape(depth.shape)


def gradients_to_normals(p, q):
    norm = np.sqrt(1.0 + p * p + q * q)
    return np.stack([-p / norm, -q / norm, 1.0 / norm], axis=-1)


def depth_to_normals(depth):
    """Unit normals ``(-p, -q, 1) / sqrt(1 + p^2 + q^2)`` from finite differences."""
    if np.count_nonzero(depth.mask) < 4:
        raise ValueError("need at least 4 masked-in pixels to take derivatives")
    p, q, valid = depth_gradients(depth)
    n = gradients_to_normals(np.where(valid, p, 0.0), np.where(valid, q, 0.0))
    # third component is positive by construction; the flip only guards rounding
    n = np.where(n[..., 2:3] < 0, -n, n)
    return NormalField(n, valid)


def pixel_coordinates(shape, pitch=(1.0, 1.0)):
    rows, cols = np.indices(shape)
    return cols * float(pitch[0]), rows * float(pitch[1])


def depth_to_pointcloud(depth):
    """One point ``(x, y, z)`` per masked-in pixel, in row-major order."""
    x, y = pixel_coordinates(depth.shape, depth.pitch)
    m = depth.mask
    pts = np.column_stack([x[m], y[m], depth.z[m]])
    return PointCloud(pts, np.flatnonzero(m.ravel()), depth.shape)


def apply_pose(pose, cloud):
    return PointCloud(pose.transform(cloud.points), cloud.index, cloud.grid_shape)


def rotate_normals(pose, normals):
    """Rotate normals by ``pose.R`` only; results facing away (``n3 <= 0``) are masked out."""
    n = normals.n @ pose.R.T
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    mask = normals.mask & (n[..., 2] > 0)
    return NormalField(np.where(mask[..., None], n, np.nan), mask)


def angular_error(a, b):
    """Angle in radians between direction vectors along the last axis."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.arctan2(cross, np.sum(a * b, axis=-1))
