"""Differentiable tile-based Gaussian splatting.

Forward: project every Gaussian to a 2-d splat (EWA first-order
covariance projection), bin splats into 16x16 pixel tiles, and composite
front to back per pixel with transmittance tracking. RGB, expected depth,
accumulated alpha and raw semantic logits share one packed render target
so one backward kernel serves all of them.

Backward is analytic: the compositing kernel produces gradients for the
2-d splat parameters, and a vectorized chain maps those through the
perspective Jacobian, the world-to-camera transform and the
quaternion/scale covariance factorization back to every Gaussian field.

``rasterize_reference`` is a deliberately separate per-pixel compositor
(no tiles, no bounding boxes, cumulative-product transmittance) used as
the correctness oracle for the tile renderer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from gs4d import _raster_kernels as kern
from gs4d.geometry import BEHIND_EPS, CameraPose, project, quat_to_rot
from gs4d.tensor import Tensor, concat, make_node, take

TILE = 16
LOW_PASS = 0.3  # px^2 added to the projected covariance diagonal
RADIUS_SIGMA = 3.5  # beyond this many sigmas alpha < 1/255 for any opacity
ALPHA_CLAMP = kern.ALPHA_CLAMP
ALPHA_MIN = kern.ALPHA_MIN
T_STOP = kern.T_STOP

GAUSSIAN_MAGIC = b"G4D1"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


@dataclass
class GaussianSet:
    """Struct-of-arrays batch of 4D Gaussian primitives.

    Fields follow the per-primitive structure: position, color, opacity,
    scale, rotation, semantic logits, scene flow, rotation delta.
    """

    xyz: Tensor  # (M, 3) world meters
    rgb: Tensor  # (M, 3) in [0, 1]
    a: Tensor  # (M,) opacity in (0, 1)
    s: Tensor  # (M, 3) scale meters
    r: Tensor  # (M, 4) unit quaternion
    c: Tensor  # (M, C_seg) semantic logits
    flow: Tensor  # (M, 3) world-frame motion per frame step
    dr: Tensor  # (M, 4) rotation delta

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, _as_tensor(getattr(self, f.name)))
        m = len(self)
        expect = {"xyz": (m, 3), "rgb": (m, 3), "a": (m,), "s": (m, 3), "r": (m, 4), "flow": (m, 3), "dr": (m, 4)}
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"GaussianSet.{name} has shape {got}, expected {shape}")
        if self.c.ndim != 2 or self.c.shape[0] != m:
            raise ValueError(f"GaussianSet.c has shape {self.c.shape}, expected ({m}, C_seg)")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def n_classes(self) -> int:
        return self.c.shape[1]

    def validate(self, tol=1e-9):
        if np.any(self.s.data <= 0):
            raise ValueError("scales must be positive")
        if np.any((self.a.data <= 0) | (self.a.data >= 1)):
            raise ValueError("opacities must lie in (0, 1)")
        if np.max(np.abs(np.linalg.norm(self.r.data, axis=-1) - 1.0)) > tol:
            raise ValueError("rotations must be unit quaternions")
        return self

    def subset(self, idx) -> "GaussianSet":
        """Differentiable row gather (gradients scatter back on backward)."""
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.nonzero(idx)[0]
        return GaussianSet(**{f.name: take(getattr(self, f.name), idx, axis=0) for f in fields(self)})

    def detached(self) -> "GaussianSet":
        return GaussianSet(**{f.name: getattr(self, f.name).detach() for f in fields(self)})

    @classmethod
    def cat(cls, sets: list["GaussianSet"]) -> "GaussianSet":
        return cls(**{f.name: concat([getattr(s, f.name) for s in sets], axis=0) for f in fields(cls)})


@dataclass
class Splat2D:
    """Screen-space Gaussian after EWA projection (numpy, per splat)."""

    mean2d: np.ndarray  # (M, 2) pixels
    cov2d: np.ndarray  # (M, 2, 2) px^2, low-pass floored
    depth: np.ndarray  # (M,) camera-frame z
    color: np.ndarray  # (M, 3)
    opacity: np.ndarray  # (M,)
    seg: np.ndarray  # (M, C_seg)
    valid: np.ndarray  # (M,) in front of camera and SPD after floor


@dataclass
class RenderOutput:
    """Per-pixel render targets; tensor fields stay on the autodiff tape."""

    rgb: Tensor  # (H, W, 3)
    depth: Tensor  # (H, W)
    alpha: Tensor  # (H, W)
    seg: Tensor  # (H, W, C_seg)
    packed: Tensor  # (H, W, 5 + C_seg) backing node
    t_final: np.ndarray  # (H, W) transmittance after compositing
    n_contrib: np.ndarray  # (H, W) entries examined per pixel


def covariance3d(s, r) -> np.ndarray:
    """World covariance R(r) diag(s^2) R(r)^T for one or many Gaussians."""
    s = np.asarray(s, dtype=np.float64)
    rot = quat_to_rot(r)
    left = rot * s[..., None, :]
    return left @ np.swapaxes(left, -1, -2)


def _perspective_jacobian(p_cam: np.ndarray, cam: CameraPose, width: int, height: int):
    """First-order projection Jacobian with the usual frustum guard.

    Returns J (M, 2, 3) and the clamp pass-through masks for x/z and y/z.
    """
    fx, sk = cam.E[0, 0], cam.E[0, 1]
    fy = cam.E[1, 1]
    tz = p_cam[:, 2]
    lim_x = 1.3 * (0.5 * width) / abs(fx)
    lim_y = 1.3 * (0.5 * height) / abs(fy)
    ratio_x = p_cam[:, 0] / tz
    ratio_y = p_cam[:, 1] / tz
    pass_x = np.abs(ratio_x) <= lim_x
    pass_y = np.abs(ratio_y) <= lim_y
    tx = np.clip(ratio_x, -lim_x, lim_x) * tz
    ty = np.clip(ratio_y, -lim_y, lim_y) * tz
    j = np.zeros((p_cam.shape[0], 2, 3))
    j[:, 0, 0] = fx / tz
    j[:, 0, 1] = sk / tz
    j[:, 0, 2] = -(fx * tx + sk * ty) / (tz * tz)
    j[:, 1, 1] = fy / tz
    j[:, 1, 2] = -(fy * ty) / (tz * tz)
    return j, pass_x, pass_y, tx, ty


def project_gaussian(gs: GaussianSet, cam: CameraPose, width: int, height: int) -> Splat2D:
    """EWA projection of every Gaussian to screen space; behind-camera
    splats are flagged invalid rather than raised."""
    xyz = gs.xyz.data
    p_cam = (xyz - cam.V) @ cam.R
    depth = p_cam[:, 2]
    u, v, _ = project(xyz, cam)
    cov3d = covariance3d(gs.s.data, gs.r.data)
    j, _, _, _, _ = _perspective_jacobian(p_cam, cam, width, height)
    t = j @ cam.R.T  # world -> screen linearization
    cov2d = t @ cov3d @ np.swapaxes(t, 1, 2)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    valid = (depth > BEHIND_EPS) & (det > 0) & (cov2d[:, 0, 0] > 0) & (cov2d[:, 1, 1] > 0)
    return Splat2D(
        mean2d=np.stack([u, v], axis=-1),
        cov2d=cov2d,
        depth=depth,
        color=gs.rgb.data,
        opacity=gs.a.data,
        seg=gs.c.data,
        valid=valid,
    )


class _Prepared:
    """Sorted, culled, tile-binned splat arrays shared by forward/backward."""

    __slots__ = (
        "orig",
        "mean2d",
        "conic",
        "opacity",
        "colors",
        "depth",
        "p_cam",
        "cov3d",
        "jac",
        "pass_x",
        "pass_y",
        "tx",
        "ty",
        "tile_start",
        "entries",
        "tiles_x",
        "n_classes",
        "cam",
    )


def _prepare(gs: GaussianSet, cam: CameraPose, width: int, height: int) -> _Prepared | None:
    m = len(gs)
    if m == 0:
        return None
    xyz = gs.xyz.data
    p_cam = (xyz - cam.V) @ cam.R
    depth = p_cam[:, 2]
    u, v, _ = project(xyz, cam)
    cov3d = covariance3d(gs.s.data, gs.r.data)
    jac, pass_x, pass_y, tx, ty = _perspective_jacobian(p_cam, cam, width, height)
    t = jac @ cam.R.T
    cov2d = t @ cov3d @ np.swapaxes(t, 1, 2)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    valid = (depth > BEHIND_EPS) & (det > 0) & (cov2d[:, 0, 0] > 0) & (cov2d[:, 1, 1] > 0)

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = RADIUS_SIGMA * np.sqrt(np.maximum(lam_max, 0.0)) + 1.0

    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    x0 = np.floor((u - radius) / TILE).astype(np.int64)
    x1 = np.floor((u + radius) / TILE).astype(np.int64)
    y0 = np.floor((v - radius) / TILE).astype(np.int64)
    y1 = np.floor((v + radius) / TILE).astype(np.int64)
    x0 = np.clip(x0, 0, tiles_x - 1)
    x1 = np.clip(x1, 0, tiles_x - 1)
    y0 = np.clip(y0, 0, tiles_y - 1)
    y1 = np.clip(y1, 0, tiles_y - 1)
    on_screen = (u + radius > 0) & (u - radius < width) & (v + radius > 0) & (v - radius < height)
    valid &= on_screen

    keep = np.nonzero(valid)[0]
    if keep.size == 0:
        return None
    # global stable depth sort, index tie-break
    order = keep[np.lexsort((keep, depth[keep]))]

    prep = _Prepared()
    prep.orig = order
    prep.cam = cam
    prep.n_classes = gs.n_classes
    prep.mean2d = np.ascontiguousarray(np.stack([u[order], v[order]], axis=-1))
    c2 = cov2d[order]
    dete = det[order]
    prep.conic = np.ascontiguousarray(
        np.stack([c2[:, 1, 1] / dete, -c2[:, 0, 1] / dete, c2[:, 0, 0] / dete], axis=-1)
    )
    prep.opacity = np.ascontiguousarray(gs.a.data[order])
    prep.colors = np.ascontiguousarray(
        np.concatenate([gs.rgb.data[order], depth[order, None], gs.c.data[order]], axis=-1)
    )
    prep.depth = depth[order]
    prep.p_cam = p_cam[order]
    prep.cov3d = cov3d[order]
    prep.jac = jac[order]
    prep.pass_x = pass_x[order]
    prep.pass_y = pass_y[order]
    prep.tx = tx[order]
    prep.ty = ty[order]

    # duplicate splats across the tiles their bounding boxes touch
    sx0, sx1, sy0, sy1 = x0[order], x1[order], y0[order], y1[order]
    spans_w = sx1 - sx0 + 1
    counts = spans_w * (sy1 - sy0 + 1)
    total = int(counts.sum())
    rank = np.repeat(np.arange(order.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - starts[rank]
    tile_ids = (sy0[rank] + local // spans_w[rank]) * tiles_x + (sx0[rank] + local % spans_w[rank])
    sort_idx = np.lexsort((rank, tile_ids))
    prep.entries = np.ascontiguousarray(rank[sort_idx])
    prep.tile_start = np.concatenate(
        [[0], np.cumsum(np.bincount(tile_ids, minlength=tiles_x * tiles_y))]
    ).astype(np.int64)
    prep.tiles_x = tiles_x
    return prep


_DRDQ_SIGNS = None


def _quat_rot_partials(q: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(quaternion component): (M, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=-1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=-1)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)


def _vjp(prep: _Prepared, gs: GaussianSet, grad_packed: np.ndarray, bg: np.ndarray, height: int, width: int, t_final, n_contrib):
    n = prep.orig.size
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_colors = np.zeros_like(prep.colors)
    kern.composite_backward(
        prep.tile_start,
        prep.entries,
        prep.mean2d,
        prep.conic,
        prep.opacity,
        prep.colors,
        bg,
        prep.tiles_x,
        TILE,
        height,
        width,
        np.ascontiguousarray(grad_packed),
        t_final,
        n_contrib,
        d_mean2d,
        d_conic,
        d_opacity,
        d_colors,
    )
    cam = prep.cam
    fx, sk = cam.E[0, 0], cam.E[0, 1]
    fy = cam.E[1, 1]
    tz = prep.depth
    px_cam, py_cam = prep.p_cam[:, 0], prep.p_cam[:, 1]

    # conic(A,B,C) -> full cov2d gradient: dM = -F Gf F with Gf off-diagonal halved
    conic_full = np.empty((n, 2, 2))
    conic_full[:, 0, 0] = prep.conic[:, 0]
    conic_full[:, 0, 1] = conic_full[:, 1, 0] = prep.conic[:, 1]
    conic_full[:, 1, 1] = prep.conic[:, 2]
    gf = np.empty((n, 2, 2))
    gf[:, 0, 0] = d_conic[:, 0]
    gf[:, 0, 1] = gf[:, 1, 0] = 0.5 * d_conic[:, 1]
    gf[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -conic_full @ gf @ conic_full

    # cov2d = T cov3d T^t (+ const floor): split into cov3d and Jacobian parts
    tmat = prep.jac @ cam.R.T
    d_cov3d = np.swapaxes(tmat, 1, 2) @ d_cov2d @ tmat
    d_tmat = 2.0 * d_cov2d @ tmat @ prep.cov3d
    d_jac = d_tmat @ cam.R  # (M,2,3) @ (3,3): d(J W)/dJ with W = R^T

    # Jacobian entries -> camera-frame position (frustum clamp aware)
    d_pc = np.zeros((n, 3))
    inv_z2 = 1.0 / (tz * tz)
    d_tx = -fx * inv_z2 * d_jac[:, 0, 2]
    d_ty = -sk * inv_z2 * d_jac[:, 0, 2] - fy * inv_z2 * d_jac[:, 1, 2]
    d_pc[:, 0] += np.where(prep.pass_x, d_tx, 0.0)
    d_pc[:, 1] += np.where(prep.pass_y, d_ty, 0.0)
    lim_x = 1.3 * (0.5 * width) / abs(fx)
    lim_y = 1.3 * (0.5 * height) / abs(fy)
    dtx_dz = np.where(prep.pass_x, 0.0, np.sign(prep.tx) * lim_x)
    dty_dz = np.where(prep.pass_y, 0.0, np.sign(prep.ty) * lim_y)
    d_pc[:, 2] += (
        d_jac[:, 0, 0] * (-fx * inv_z2)
        + d_jac[:, 0, 1] * (-sk * inv_z2)
        + d_jac[:, 1, 1] * (-fy * inv_z2)
        + d_jac[:, 0, 2] * (2.0 * (fx * prep.tx + sk * prep.ty) / (tz**3) - (fx * dtx_dz + sk * dty_dz) * inv_z2)
        + d_jac[:, 1, 2] * (2.0 * fy * prep.ty / (tz**3) - fy * dty_dz * inv_z2)
    )

    # projected mean -> camera-frame position (unclamped pinhole)
    du, dv = d_mean2d[:, 0], d_mean2d[:, 1]
    d_pc[:, 0] += du * fx / tz
    d_pc[:, 1] += du * sk / tz + dv * fy / tz
    d_pc[:, 2] += du * (-(fx * px_cam + sk * py_cam) * inv_z2) + dv * (-(fy * py_cam) * inv_z2)

    # composited depth channel is camera z directly
    d_pc[:, 2] += d_colors[:, 3]

    d_xyz = d_pc @ cam.R.T

    # cov3d = L L^t with L = R(q) diag(s)
    rot = quat_to_rot(gs.r.data[prep.orig])
    svec = gs.s.data[prep.orig]
    lmat = rot * svec[:, None, :]
    d_l = 2.0 * d_cov3d @ lmat
    d_s = np.einsum("mik,mik->mk", rot, d_l)
    d_rot = d_l * svec[:, None, :]
    d_q = np.einsum("mij,mqij->mq", d_rot, _quat_rot_partials(gs.r.data[prep.orig]))

    m_total = len(gs)
    out = {
        "xyz": np.zeros((m_total, 3)),
        "rgb": np.zeros((m_total, 3)),
        "a": np.zeros(m_total),
        "s": np.zeros((m_total, 3)),
        "r": np.zeros((m_total, 4)),
        "c": np.zeros((m_total, prep.n_classes)),
    }
    out["xyz"][prep.orig] = d_xyz
    out["rgb"][prep.orig] = d_colors[:, :3]
    out["a"][prep.orig] = d_opacity
    out["s"][prep.orig] = d_s
    out["r"][prep.orig] = d_q
    out["c"][prep.orig] = d_colors[:, 4:]
    return out


def rasterize(gs: GaussianSet, cam: CameraPose, height: int, width: int, background=None) -> RenderOutput:
    """Render a Gaussian set; outputs stay differentiable w.r.t. all fields
    except flow and dr (those enter through advancement before rendering)."""
    n_cls = gs.n_classes
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64).reshape(3)
    packed_np = np.zeros((height, width, 5 + n_cls))
    t_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    prep = _prepare(gs, cam, width, height)
    if prep is not None:
        kern.composite_forward(
            prep.tile_start,
            prep.entries,
            prep.mean2d,
            prep.conic,
            prep.opacity,
            prep.colors,
            prep.tiles_x,
            TILE,
            height,
            width,
            packed_np,
            t_final,
            n_contrib,
        )
    packed_np[:, :, :3] += t_final[:, :, None] * bg
    packed_np[:, :, 4] = 1.0 - t_final

    parents = (gs.xyz, gs.rgb, gs.a, gs.s, gs.r, gs.c)

    def backward(grad):
        if prep is None:
            return
        grads = _vjp(prep, gs, grad, bg, height, width, t_final, n_contrib)
        for tens, key in zip(parents, ("xyz", "rgb", "a", "s", "r", "c")):
            if tens.requires_grad:
                tens._accumulate(grads[key])

    packed = make_node(packed_np, parents, backward)
    return RenderOutput(
        rgb=packed[:, :, 0:3],
        depth=packed[:, :, 3],
        alpha=packed[:, :, 4],
        seg=packed[:, :, 5:],
        packed=packed,
        t_final=t_final,
        n_contrib=n_contrib,
    )


def rasterize_backward(render: RenderOutput, grad_packed: np.ndarray) -> None:
    """Push a packed-output gradient through the render node directly."""
    node = render.packed
    if node._backward is None:
        return
    node._backward(np.asarray(grad_packed, dtype=np.float64))


def rasterize_reference(gs: GaussianSet, cam: CameraPose, height: int, width: int, background=None) -> dict:
    """Naive oracle: evaluate every splat at every pixel, sort globally by
    depth (index tie-break), composite with masked cumulative products.

    Shares only the projection/covariance math with the tile renderer; the
    compositing implementation is independent by construction.
    """
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64).reshape(3)
    n_cls = gs.n_classes
    out = {
        "rgb": np.zeros((height, width, 3)),
        "depth": np.zeros((height, width)),
        "alpha": np.zeros((height, width)),
        "seg": np.zeros((height, width, n_cls)),
    }
    splats = project_gaussian(gs, cam, width, height)
    keep = np.nonzero(splats.valid)[0]
    if keep.size == 0:
        out["rgb"] += bg
        return out
    order = keep[np.lexsort((keep, splats.depth[keep]))]

    ys, xs = np.mgrid[0:height, 0:width]
    centers = np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2)  # (P, 2)
    delta = centers[None, :, :] - splats.mean2d[order][:, None, :]  # (M, P, 2)
    conic = np.linalg.inv(splats.cov2d[order])  # (M, 2, 2)
    q = np.einsum("mpi,mij,mpj->mp", delta, conic, delta)
    alpha = splats.opacity[order][:, None] * np.exp(-0.5 * q)
    alpha = np.minimum(alpha, ALPHA_CLAMP)
    alpha[alpha < ALPHA_MIN] = 0.0

    trans_before = np.cumprod(np.concatenate([np.ones((1, alpha.shape[1])), 1.0 - alpha], axis=0), axis=0)
    live = trans_before[:-1] >= T_STOP  # early-stop rule: composited iff T before >= threshold
    weights = alpha * trans_before[:-1] * live
    n_live = live.sum(axis=0)
    t_final = np.take_along_axis(trans_before, n_live[None, :], axis=0)[0]

    colors = np.concatenate(
        [gs.rgb.data[order], splats.depth[order][:, None], gs.c.data[order]], axis=-1
    )
    composited = weights.T @ colors  # (P, 4 + n_cls)
    out["rgb"] = (composited[:, :3] + t_final[:, None] * bg).reshape(height, width, 3)
    out["depth"] = composited[:, 3].reshape(height, width)
    out["seg"] = composited[:, 4:].reshape(height, width, n_cls)
    out["alpha"] = (1.0 - t_final).reshape(height, width)
    return out


# -- binary Gaussian-set file ("G4D1") -----------------------------------------


def save_gaussians(path, gs: GaussianSet) -> None:
    """Little-endian f32 record per Gaussian: xyz rgb a s r c flow dr (24 values)."""
    if gs.n_classes != 3:
        raise ValueError("the G4D1 file format stores exactly 3 semantic classes")
    rows = np.concatenate(
        [
            gs.xyz.data,
            gs.rgb.data,
            gs.a.data[:, None],
            gs.s.data,
            gs.r.data,
            gs.c.data,
            gs.flow.data,
            gs.dr.data,
        ],
        axis=-1,
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(GAUSSIAN_MAGIC)
        fh.write(struct.pack("<Q", rows.shape[0]))
        fh.write(rows.tobytes())


def load_gaussians(path) -> GaussianSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GAUSSIAN_MAGIC:
            raise ValueError(f"not a Gaussian set file (magic {magic!r})")
        (count,) = struct.unpack("<Q", fh.read(8))
        data = np.frombuffer(fh.read(count * 24 * 4), dtype="<f4").reshape(count, 24)
    data = data.astype(np.float64)
    return GaussianSet(
        xyz=data[:, 0:3],
        rgb=data[:, 3:6],
        a=data[:, 6],
        s=data[:, 7:10],
        r=data[:, 10:14],
        c=data[:, 14:17],
        flow=data[:, 17:20],
        dr=data[:, 20:24],
    )
