"""Homography fitting and the corner-error evaluation protocol."""

from __future__ import annotations

import numpy as np

from .geometry import apply_homography

THRESHOLDS = (3, 5, 10)


def _normalizer(points):
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    c = points.mean(axis=0)
    dist = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / dist if dist > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def fit_homography(points_a, points_b):
    """Normalised DLT least-squares estimate of H with points_b ~ H points_a.

    Returns None for fewer than 4 correspondences or a degenerate system.
    """
    pa = np.asarray(points_a, dtype=float).reshape(-1, 2)
    pb = np.asarray(points_b, dtype=float).reshape(-1, 2)
    if len(pa) < 4 or len(pa) != len(pb):
        return None
    Ta, Tb = _normalizer(pa), _normalizer(pb)
    na = np.hstack([pa, np.ones((len(pa), 1))]) @ Ta.T
    nb = np.hstack([pb, np.ones((len(pb), 1))]) @ Tb.T
    x, y = na[:, 0], na[:, 1]
    u, v = nb[:, 0], nb[:, 1]
    zeros, ones = np.zeros_like(x), np.ones_like(x)
    rows_u = np.stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u], axis=1)
    rows_v = np.stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v], axis=1)
    A = np.vstack([rows_u, rows_v])
    _, s, vt = np.linalg.svd(A)
    if s.size >= 8 and s[7] < 1e-12 * max(s[0], 1e-300):
        return None
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tb) @ Hn @ Ta
    if not np.all(np.isfinite(H)) or abs(H[2, 2]) < 1e-15:
        return None
    return H / H[2, 2]


def image_corners(shape):
    h, w = shape
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def corner_error(H_est, H_true, shape):
    """Max distance between the four image corners warped by each homography."""
    if H_est is None:
        return np.inf
    corners = image_corners(shape)
    with np.errstate(all="ignore"):
        err = np.linalg.norm(apply_homography(H_est, corners) - apply_homography(H_true, corners), axis=1)
    return float(err.max()) if np.all(np.isfinite(err)) else np.inf


def error_auc(errors, thresholds=THRESHOLDS):
    """Area under the recall-vs-error curve up to each threshold, normalised to [0, 1]."""
    errors = np.sort(np.asarray(errors, dtype=float))
    n = len(errors)
    out = {}
    if n == 0:
        return {t: 0.0 for t in thresholds}
    recall = np.arange(1, n + 1) / n
    errors = np.concatenate([[0.0], errors])
    recall = np.concatenate([[0.0], recall])
    for t in thresholds:
        last = np.searchsorted(errors, t)
        e = np.concatenate([errors[:last], [t]])
        r = np.concatenate([recall[:last], [recall[last - 1]]])
        out[t] = float(np.trapezoid(r, x=e) / t)
    return out


def match_precision(points_a, points_b, H_true, threshold=3.0):
    """Fraction of matches whose B point is within ``threshold`` px of the true warp."""
    pa = np.asarray(points_a, dtype=float).reshape(-1, 2)
    if len(pa) == 0:
        return np.nan
    err = np.linalg.norm(apply_homography(H_true, pa) - np.asarray(points_b).reshape(-1, 2), axis=1)
    return float(np.mean(err <= threshold))
