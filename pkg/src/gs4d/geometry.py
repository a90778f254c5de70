"""Pinhole camera model and world-coordinate math for the pipeline.

Conventions: intrinsics map camera-frame points to continuous pixel
coordinates where a pixel's center sits at (index + 0.5). The extrinsic
rotation maps camera axes into the world frame (x right, y down, z along
the optical axis in camera space), and the world origin is anchored at
the first frame of the clip. Depth means camera-frame z in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gs4d.tensor import Tensor, concat

BEHIND_EPS = 1e-6


@dataclass
class CameraPose:
    """Intrinsics E, camera-to-world rotation R, world translation V."""

    E: np.ndarray
    R: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.V = np.asarray(self.V, dtype=np.float64).reshape(3)
        if abs(self.E[2, 2] - 1.0) > 1e-12:
            raise ValueError(f"intrinsic matrix must have E[2][2] == 1, got {self.E[2, 2]}")
        if abs(np.linalg.det(self.E)) < 1e-12:
            raise ValueError("intrinsic matrix is singular")
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > 1e-9:
            raise ValueError("extrinsic rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise ValueError("extrinsic rotation must have determinant +1")

    @property
    def E_inv(self) -> np.ndarray:
        return np.linalg.inv(self.E)


@dataclass(frozen=True)
class DepthBins:
    """Linearly spaced depth categories over [d_min, d_max] meters."""

    L: int = 64
    d_min: float = 0.5
    d_max: float = 80.0

    def __post_init__(self):
        if not (0.0 < self.d_min < self.d_max):
            raise ValueError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.L < 2:
            raise ValueError(f"need at least 2 bins, got {self.L}")

    @property
    def centers(self) -> np.ndarray:
        width = (self.d_max - self.d_min) / self.L
        return self.d_min + (np.arange(self.L) + 0.5) * width

    def index_of(self, depth) -> np.ndarray:
        """Bin index containing each metric depth (clipped to valid range)."""
        width = (self.d_max - self.d_min) / self.L
        idx = np.floor((np.asarray(depth) - self.d_min) / width).astype(np.int64)
        return np.clip(idx, 0, self.L - 1)


def expected_depth(d_c: Tensor, d_r, bins: DepthBins, axis: int = -1) -> Tensor:
    """Softmax-weighted mean of bin-center depths plus a scalar refinement.

    Bin indices map to meters through the bin centers, so the result lives
    in world units; the refinement adds with slope exactly 1.
    """
    probs = d_c.softmax(axis=axis)
    centers = bins.centers
    if axis not in (-1, d_c.ndim - 1):
        shape = [1] * d_c.ndim
        shape[axis] = bins.L
        centers = centers.reshape(shape)
    return (probs * centers).sum(axis=axis) + d_r


def _stack3(x, y, z):
    if any(isinstance(v, Tensor) for v in (x, y, z)):
        parts = []
        for v in (x, y, z):
            v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
            parts.append(v.reshape(v.shape + (1,)))
        return concat(parts, axis=parts[0].ndim - 1)
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def unproject(u, v, du, dv, depth, cam: CameraPose):
    """Lift pixel coordinates (plus sub-pixel shifts) at a depth to world xyz.

    xyz = R E^-1 (depth * [u+du, v+dv, 1]) + V. Accepts scalars, arrays, or
    autodiff tensors for du, dv, depth; the result stacks xyz on a new last
    axis and stays differentiable when tensors are passed.
    """
    m = cam.R @ cam.E_inv
    hx = u + du
    hy = v + dv
    out = []
    for i in range(3):
        out.append(depth * (m[i, 0] * hx + m[i, 1] * hy + m[i, 2]) + cam.V[i])
    return _stack3(*out)


def project(xyz, cam: CameraPose, eps: float = BEHIND_EPS):
    """World point(s) to (u, v, depth); depth <= eps signals behind-camera.

    Callers cull on the depth signal; u, v are zeroed there rather than
    divided through a vanishing z.
    """
    p = np.asarray(xyz, dtype=np.float64)
    squeeze = p.ndim == 1
    p = np.atleast_2d(p)
    p_cam = (p - cam.V) @ cam.R  # rows: R^T (xyz - V)
    z = p_cam[..., 2]
    valid = z > eps
    safe_z = np.where(valid, z, 1.0)
    proj = p_cam @ cam.E.T
    u = np.where(valid, proj[..., 0] / safe_z, 0.0)
    v = np.where(valid, proj[..., 1] / safe_z, 0.0)
    if squeeze:
        return float(u[0]), float(v[0]), float(z[0])
    return u, v, z


def advance(xyz, flow):
    """Move points by per-point scene flow: position at t+1 = xyz + flow."""
    return xyz + flow


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) [w, x, y, z] to rotation matrix(es).

    Applies the standard quadratic form without renormalizing, so it is a
    smooth function of all four components.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def compose_rotation(r: np.ndarray, dr: np.ndarray) -> np.ndarray:
    """Hamilton product r * dr, renormalized to a unit quaternion."""
    r = np.asarray(r, dtype=np.float64)
    dr = np.asarray(dr, dtype=np.float64)
    w1, x1, y1, z1 = np.moveaxis(r, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(dr, -1, 0)
    out = np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("quaternion product has vanishing norm")
    return out / norm
