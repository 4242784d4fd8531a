"""Ground-truth signals from depth, relative pose and intrinsics.

Pixel coordinates are (x, y) with pixel centres on integers; a continuous
point belongs to pixel ``floor(p + 0.5)`` and to coarse cell
``pixel // 8``. Coarse cell (r, c) is anchored at pixel (8c + 4, 8r + 4).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputShapeError

COARSE_STRIDE = 8
FINE_STRIDE = 2


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking camera-A coordinates to camera-B: X_B = R X_A + t."""

    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def inverse(self):
        return Pose(self.R.T, -self.R.T @ self.t)

    def apply(self, points):
        return points @ self.R.T + self.t

    def as_matrix(self):
        return np.hstack([self.R, self.t.reshape(3, 1)])


@dataclass
class PairSample:
    image_a: np.ndarray  # (H, W) in [0, 1]
    image_b: np.ndarray
    depth_a: np.ndarray  # (H, W), 0 = invalid
    depth_b: np.ndarray
    pose_ab: Pose
    K_a: np.ndarray
    K_b: np.ndarray
    homography: np.ndarray | None = None  # maps A pixels to B pixels
    seed: int | None = None

    @property
    def shape(self):
        return self.image_a.shape

    def swapped(self):
        H = None if self.homography is None else np.linalg.inv(self.homography)
        return PairSample(self.image_b, self.image_a, self.depth_b, self.depth_a, self.pose_ab.inverse(),
                          self.K_b, self.K_a, H, self.seed)

    def check(self, tol=1e-6):
        """Raise ValueError if any type invariant fails."""
        for d in (self.depth_a, self.depth_b):
            if np.any(d < 0) or not np.all(np.isfinite(d)):
                raise ValueError("depth must be finite and non-negative")
        for K in (self.K_a, self.K_b):
            if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
                raise ValueError("intrinsics must be upper-triangular with positive focal lengths")
        if self.homography is not None:
            err = homography_consistency(self)
            if err > tol:
                raise ValueError(f"homography disagrees with depth/pose projection by {err:.3g} px")


def coarse_shape(image_shape):
    h, w = image_shape
    if h % COARSE_STRIDE or w % COARSE_STRIDE:
        raise InputShapeError(f"image dims must be multiples of 8, got {h}x{w}")
    return h // COARSE_STRIDE, w // COARSE_STRIDE


def cell_anchors(hc, wc, indices=None):
    """(n, 2) anchor pixels (x, y) of coarse cells in raster order."""
    idx = np.arange(hc * wc) if indices is None else np.asarray(indices)
    r, c = np.divmod(idx, wc)
    return np.stack([COARSE_STRIDE * c + COARSE_STRIDE // 2, COARSE_STRIDE * r + COARSE_STRIDE // 2], axis=1).astype(float)


def pixel_of(points):
    return np.floor(np.asarray(points) + 0.5).astype(np.int64)


def cell_of(points, image_shape):
    """Raster coarse-cell index of each point; -1 outside the image."""
    h, w = image_shape
    px = pixel_of(points)
    inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    cells = (px[:, 1] // COARSE_STRIDE) * (w // COARSE_STRIDE) + px[:, 0] // COARSE_STRIDE
    return np.where(inside, cells, -1)


def depth_validity(depth):
    """1 for coarse cells whose anchor pixel has positive depth, raster order."""
    depth = np.asarray(depth)
    hc, wc = coarse_shape(depth.shape)
    anchors = cell_anchors(hc, wc).astype(np.int64)
    return (depth[anchors[:, 1], anchors[:, 0]] > 0).astype(float)


def sample_depth(depth, points):
    """Nearest-pixel depth at points; 0 outside the image."""
    h, w = depth.shape
    px = pixel_of(points)
    inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    out = np.zeros(len(px))
    out[inside] = depth[px[inside, 1], px[inside, 0]]
    return out


def warp_points(points_a, depth_a, pose_ab, K_a, K_b, shape_b=None):
    """Project image-A points into image B through their depth.

    Returns ``(points_b, visible)``; a point is visible when its depth is
    positive, it lands in front of camera B and inside image B.
    """
    points_a = np.asarray(points_a, dtype=float).reshape(-1, 2)
    depth_a = np.asarray(depth_a)
    shape_b = depth_a.shape if shape_b is None else shape_b
    z = sample_depth(depth_a, points_a)
    homog = np.hstack([points_a, np.ones((len(points_a), 1))])
    cam_a = (homog @ np.linalg.inv(K_a).T) * z[:, None]
    cam_b = pose_ab.apply(cam_a)
    zb = cam_b[:, 2]
    front = zb > 0
    proj = cam_b @ K_b.T
    with np.errstate(divide="ignore", invalid="ignore"):
        points_b = proj[:, :2] / np.where(front, proj[:, 2], 1.0)[:, None]
    points_b[~front] = np.nan
    h, w = shape_b
    px = pixel_of(np.nan_to_num(points_b, nan=-1.0))
    inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    return points_b, (z > 0) & front & inside


def pixel_grid(shape):
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


def covisible_points(points, depth_src, depth_dst, pose, K_src, K_dst):
    """Points whose warp is visible and lands on valid target depth."""
    warped, visible = warp_points(points, depth_src, pose, K_src, K_dst, depth_dst.shape)
    ok = visible.copy()
    ok[visible] = sample_depth(depth_dst, warped[visible]) > 0
    return ok


def covisible_labels(sample, grid_indices_a, grid_indices_b, mode="bbox"):
    """Per-candidate co-visibility labels for both images.

    ``pointwise``: the cell anchor warps onto valid depth in the other image.
    ``bbox``: the anchor lies inside the axis-aligned box around every
    pointwise co-visible pixel and has valid depth of its own.
    """
    if mode not in ("bbox", "pointwise"):
        raise ValueError(f"unknown co-visibility mode {mode!r}")
    hc, wc = coarse_shape(sample.shape)
    out = []
    sides = (
        (grid_indices_a, sample.depth_a, sample.depth_b, sample.pose_ab, sample.K_a, sample.K_b),
        (grid_indices_b, sample.depth_b, sample.depth_a, sample.pose_ab.inverse(), sample.K_b, sample.K_a),
    )
    for indices, d_src, d_dst, pose, K_src, K_dst in sides:
        anchors = cell_anchors(hc, wc, indices)
        if mode == "pointwise":
            out.append(covisible_points(anchors, d_src, d_dst, pose, K_src, K_dst).astype(float))
            continue
        pixels = pixel_grid(d_src.shape)
        covis = covisible_points(pixels, d_src, d_dst, pose, K_src, K_dst)
        labels = np.zeros(len(anchors))
        if covis.any():
            lo, hi = pixels[covis].min(axis=0), pixels[covis].max(axis=0)
            inside = np.all((anchors >= lo) & (anchors <= hi), axis=1)
            labels = (inside & (sample_depth(d_src, anchors) > 0)).astype(float)
        out.append(labels)
    return out[0], out[1]


def gt_cell_correspondence(sample):
    """For every coarse cell of A (and of B), the cell its anchor warps into, or -1."""
    hc, wc = coarse_shape(sample.shape)
    anchors = cell_anchors(hc, wc)
    fwd_pts, fwd_vis = warp_points(anchors, sample.depth_a, sample.pose_ab, sample.K_a, sample.K_b)
    bwd_pts, bwd_vis = warp_points(anchors, sample.depth_b, sample.pose_ab.inverse(), sample.K_b, sample.K_a)
    fwd = np.where(fwd_vis, cell_of(np.nan_to_num(fwd_pts, nan=-1.0), sample.shape), -1)
    bwd = np.where(bwd_vis, cell_of(np.nan_to_num(bwd_pts, nan=-1.0), sample.shape), -1)
    return fwd, bwd


def selected_covisible_labels(sample, grid_indices_a, grid_indices_b):
    """Pointwise co-visible candidates whose counterpart cell is itself a candidate on the other side."""
    lab_a, lab_b = covisible_labels(sample, grid_indices_a, grid_indices_b, "pointwise")
    fwd, bwd = gt_cell_correspondence(sample)
    ia, ib = np.asarray(grid_indices_a), np.asarray(grid_indices_b)
    return lab_a * np.isin(fwd[ia], ib), lab_b * np.isin(bwd[ib], ia)


def gt_coarse_assignment(sample, grid_indices_a, grid_indices_b):
    """(k_A, k_B) 0/1 matrix of mutually consistent cell correspondences."""
    fwd, bwd = gt_cell_correspondence(sample)
    ia = np.asarray(grid_indices_a)
    ib = np.asarray(grid_indices_b)
    target = fwd[ia]  # cell in B for each A candidate
    back = bwd[ib]  # cell in A for each B candidate
    gt = (target[:, None] == ib[None, :]) & (back[None, :] == ia[:, None]) & (target[:, None] >= 0)
    return gt.astype(float)


def fine_gt_points(sample, grid_indices_a):
    """Warped anchor of each A cell in image B (NaN where invisible)."""
    hc, wc = coarse_shape(sample.shape)
    anchors = cell_anchors(hc, wc, grid_indices_a)
    pts, vis = warp_points(anchors, sample.depth_a, sample.pose_ab, sample.K_a, sample.K_b)
    pts = pts.copy()
    pts[~vis] = np.nan
    return pts


def apply_homography(H, points):
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    homog = np.hstack([points, np.ones((len(points), 1))]) @ H.T
    return homog[:, :2] / homog[:, 2:3]


def plane_homography(pose_ab, K_a, K_b, plane_depth):
    """Homography induced by the fronto-parallel plane Z_A = plane_depth."""
    n = np.array([0.0, 0.0, 1.0])
    H = K_b @ (pose_ab.R + np.outer(pose_ab.t, n) / plane_depth) @ np.linalg.inv(K_a)
    return H / H[2, 2]


def homography_consistency(sample):
    """Max pixel disagreement between homography and depth warping on valid pixels."""
    pixels = pixel_grid(sample.shape)
    valid = sample.depth_a.ravel() > 0
    if not valid.any():
        return 0.0
    warped, _ = warp_points(pixels[valid], sample.depth_a, sample.pose_ab, sample.K_a, sample.K_b)
    ok = np.all(np.isfinite(warped), axis=1)
    via_h = apply_homography(sample.homography, pixels[valid][ok])
    return float(np.max(np.abs(via_h - warped[ok]))) if ok.any() else 0.0
