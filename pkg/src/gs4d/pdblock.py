"""Prune-and-dilate feature clustering over range-view feature maps.

Adjacent camera features are concatenated side by side into a wide range
view, cut into foldable regions, and clustered: a regular grid of centers
is proposed per region, every point is softly assigned to centers through
a gated cosine similarity, assigned features are averaged into the
centers (prune), and each center's aggregate is dispatched back to its
member points (dilate). Redundant cross-view and background points thus
collapse onto shared features while complex regions keep distinct ones.

Two assignment modes exist: a pure argmax mode (exactly one center per
point) and a thresholded mode where any similarity >= tau also joins,
with the argmax always retained.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gs4d import tensor as tt
from gs4d.tensor import Tensor, concat, conv2d, rearrange

EPS_NORM = 1e-12


@dataclass
class PDBlockConfig:
    heads: int = 4
    fold_w: int = 2
    fold_h: int = 2
    centers_w: int = 8
    centers_h: int = 8
    tau: float | None = 0.9  # None -> argmax-only assignment
    return_center: bool = False

    def __post_init__(self):
        if isinstance(self.tau, str):
            if self.tau != "argmax-only":
                raise ValueError(f"unknown tau mode {self.tau!r}")
            self.tau = None
        if self.tau is not None and not (0.0 <= self.tau <= 1.0):
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        for name in ("heads", "fold_w", "fold_h", "centers_w", "centers_h"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def num_centers(self) -> int:
        return self.centers_w * self.centers_h


@dataclass
class AssignmentMask:
    """Binary center-membership M and the gated similarity with pruned entries zeroed."""

    M: np.ndarray
    S: Tensor


@dataclass
class PDBlockWeights:
    w_v: Tensor
    b_v: Tensor
    w_f: Tensor
    b_f: Tensor
    w_proj: Tensor
    b_proj: Tensor
    sim_alpha: Tensor
    sim_beta: Tensor

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, zero_proj: bool = True):
        """He-normal value/feature projections; output projection zeroed so a
        residual wrapper starts as the identity."""

        def he(cout, cin):
            return Tensor(rng.standard_normal((cout, cin, 1, 1)) * np.sqrt(2.0 / cin), requires_grad=True)

        proj = np.zeros((channels, channels, 1, 1)) if zero_proj else rng.standard_normal(
            (channels, channels, 1, 1)
        ) * np.sqrt(2.0 / channels)
        return cls(
            w_v=he(channels, channels),
            b_v=Tensor(np.zeros(channels), requires_grad=True),
            w_f=he(channels, channels),
            b_f=Tensor(np.zeros(channels), requires_grad=True),
            w_proj=Tensor(proj, requires_grad=True),
            b_proj=Tensor(np.zeros(channels), requires_grad=True),
            sim_alpha=Tensor(np.array(1.0), requires_grad=True),
            sim_beta=Tensor(np.array(0.0), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.b_v": self.b_v,
            f"{prefix}.w_f": self.w_f,
            f"{prefix}.b_f": self.b_f,
            f"{prefix}.w_proj": self.w_proj,
            f"{prefix}.b_proj": self.b_proj,
            f"{prefix}.sim_alpha": self.sim_alpha,
            f"{prefix}.sim_beta": self.sim_beta,
        }


def range_view_concat(features: Sequence[Tensor], view_order: Sequence[int] | None = None) -> Tensor:
    """Concatenate per-view [.., C, H, W] features width-wise in rig order.

    Physically adjacent cameras must be adjacent in ``view_order`` so that
    overlapping content ends up side by side in the range view.
    """
    if view_order is None:
        view_order = range(len(features))
    ordered = [features[i] for i in view_order]
    first = ordered[0].shape
    for f in ordered[1:]:
        if f.shape != first:
            raise ValueError(f"all views must share a shape, got {first} vs {f.shape}")
    if len(ordered) == 1:
        return ordered[0]
    return concat(ordered, axis=ordered[0].ndim - 1)


def split_range_view(rv: Tensor, n_views: int) -> list[Tensor]:
    """Inverse of range_view_concat for equal-width views."""
    w = rv.shape[-1]
    if w % n_views:
        raise ValueError(f"range-view width {w} not divisible into {n_views} views")
    step = w // n_views
    sl = (slice(None),) * (rv.ndim - 1)
    return [rv[sl + (slice(i * step, (i + 1) * step),)] for i in range(n_views)]


def fold(x: Tensor, fold_w: int, fold_h: int) -> Tensor:
    """Partition [B, C, H, W] into a fold_h x fold_w grid of regions moved to batch."""
    _, _, h, w = x.shape
    if h % fold_h or w % fold_w:
        raise ValueError(f"feature map {h}x{w} is not foldable by {fold_h}x{fold_w}")
    if fold_w == 1 and fold_h == 1:
        return x
    return rearrange(x, "b c (fh h) (fw w) -> (b fh fw) c h w", fh=fold_h, fw=fold_w)


def unfold(x: Tensor, fold_w: int, fold_h: int) -> Tensor:
    """Exact inverse of fold."""
    if fold_w == 1 and fold_h == 1:
        return x
    return rearrange(x, "(b fh fw) c h w -> b c (fh h) (fw w)", fh=fold_h, fw=fold_w)


def propose_centers(x: Tensor, centers_h: int, centers_w: int) -> Tensor:
    """Evenly spaced center features: mean over each rectangular grid cell."""
    _, _, h, w = x.shape
    if centers_h > h or centers_w > w:
        raise ValueError(f"center grid {centers_h}x{centers_w} exceeds spatial grid {h}x{w}")
    if h % centers_h == 0 and w % centers_w == 0:
        cells = rearrange(x, "b c (ch hh) (cw ww) -> b c ch cw (hh ww)", ch=centers_h, cw=centers_w)
        return cells.mean(axis=-1)
    # uneven grid: fall back to explicit cell slices
    rows = []
    hb = [int(np.floor(i * h / centers_h)) for i in range(centers_h + 1)]
    wb = [int(np.floor(j * w / centers_w)) for j in range(centers_w + 1)]
    for i in range(centers_h):
        cols = []
        for j in range(centers_w):
            cell = x[:, :, hb[i] : hb[i + 1], wb[j] : wb[j + 1]]
            cols.append(cell.mean(axis=(2, 3), keepdims=True))
        rows.append(concat(cols, axis=3))
    return concat(rows, axis=2)


def gated_similarity(centers: Tensor, points: Tensor, sim_alpha, sim_beta) -> Tensor:
    """sigmoid(sim_beta + sim_alpha * cos(centers, points)) over [.., K, C] x [.., P, C]."""
    cn = centers / ((centers * centers).sum(axis=-1, keepdims=True).sqrt() + EPS_NORM)
    pn = points / ((points * points).sum(axis=-1, keepdims=True).sqrt() + EPS_NORM)
    cos = cn @ pn.transpose(tuple(range(pn.ndim - 2)) + (pn.ndim - 1, pn.ndim - 2))
    return tt.sigmoid(sim_beta + sim_alpha * cos)


def make_mask(S: Tensor, tau: float | None) -> AssignmentMask:
    """Binary assignment from gated similarity.

    A point joins every center whose similarity clears tau, and always its
    argmax center (ties go to the lowest center index). With tau None only
    the argmax clause applies, giving exactly one center per point.
    """
    sim = S.data
    arg = sim.argmax(axis=-2)
    m = np.zeros_like(sim)
    np.put_along_axis(m, np.expand_dims(arg, -2), 1.0, axis=-2)
    if tau is not None:
        m = np.maximum(m, (sim >= tau).astype(np.float64))
    return AssignmentMask(M=m, S=S * Tensor(m))


def aggregate(values: Tensor, value_centers: Tensor, S_masked: Tensor) -> Tensor:
    """Blend member values into each center; the +1 denominator keeps the
    center's own value when nothing is assigned."""
    num = S_masked @ values + value_centers
    den = S_masked.sum(axis=-1, keepdims=True) + 1.0
    return num / den


def dispatch(aggregated: Tensor, S_masked: Tensor) -> Tensor:
    """Send each center's aggregate back to its members, similarity-weighted."""
    st = S_masked.transpose(tuple(range(S_masked.ndim - 2)) + (S_masked.ndim - 1, S_masked.ndim - 2))
    return st @ aggregated


def pd_block(
    views: Sequence[Tensor],
    cfg: PDBlockConfig,
    weights: PDBlockWeights,
    view_order: Sequence[int] | None = None,
):
    """Full prune-and-dilate block over per-view [B, C, H, W] features.

    Returns per-view features of the input spatial extents, or the
    center-grid range view when cfg.return_center is set.
    """
    n_views = len(views)
    rv = range_view_concat(views, view_order)
    b, c, h, w = rv.shape
    if c % cfg.heads:
        raise ValueError(f"heads={cfg.heads} must divide channels={c}")

    value = conv2d(rv, weights.w_v, bias=weights.b_v)
    feat = conv2d(rv, weights.w_f, bias=weights.b_f)
    value = rearrange(value, "b (e c) h w -> (b e) c h w", e=cfg.heads)
    feat = rearrange(feat, "b (e c) h w -> (b e) c h w", e=cfg.heads)

    value = fold(value, cfg.fold_w, cfg.fold_h)
    feat = fold(feat, cfg.fold_w, cfg.fold_h)
    _, _, fh, fw = feat.shape

    centers = propose_centers(feat, cfg.centers_h, cfg.centers_w)
    value_centers = propose_centers(value, cfg.centers_h, cfg.centers_w)
    centers = rearrange(centers, "b c h w -> b (h w) c")
    value_centers = rearrange(value_centers, "b c h w -> b (h w) c")
    points = rearrange(feat, "b c h w -> b (h w) c")
    value_points = rearrange(value, "b c h w -> b (h w) c")

    sim = gated_similarity(centers, points, weights.sim_alpha, weights.sim_beta)
    mask = make_mask(sim, cfg.tau)
    out = aggregate(value_points, value_centers, mask.S)

    if cfg.return_center:
        out = rearrange(out, "b (h w) c -> b c h w", h=cfg.centers_h)
    else:
        out = dispatch(out, mask.S)
        out = rearrange(out, "b (h w) c -> b c h w", h=fh)
    out = unfold(out, cfg.fold_w, cfg.fold_h)
    out = rearrange(out, "(b e) c h w -> b (e c) h w", e=cfg.heads)
    out = conv2d(out, weights.w_proj, bias=weights.b_proj)
    if cfg.return_center:
        return out
    return split_range_view(out, n_views)
