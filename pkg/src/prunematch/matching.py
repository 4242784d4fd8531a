"""Dual-softmax coarse matching and windowed sub-pixel refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import FINE, FeatureGrid
from .errors import DimensionError, ScaleError, SelectionError
from .geometry import COARSE_STRIDE, FINE_STRIDE, cell_anchors
from .tensor import Tensor, as_tensor, concat, softmax, take, where

DEAD_LOGIT = -1e9
FINE_PER_CELL = COARSE_STRIDE // FINE_STRIDE  # fine positions per coarse cell along an axis


@dataclass
class MatchSet:
    confidence_matrix: Tensor  # (k_A, k_B)
    idx_a: np.ndarray  # candidate indices of matched pairs
    idx_b: np.ndarray
    confidence: np.ndarray
    grid_a: np.ndarray  # coarse cell indices of matched pairs
    grid_b: np.ndarray
    points_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    points_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    fine_confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    variance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dropped: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.idx_a)

    @property
    def coarse(self):
        return [(int(i), int(j), float(c)) for i, j, c in zip(self.idx_a, self.idx_b, self.confidence)]

    @property
    def fine(self):
        return [(tuple(a), tuple(b)) for a, b in zip(self.points_a, self.points_b)]


def dual_softmax(sim, live_a=None, live_b=None):
    """Row softmax times column softmax, restricted to live rows and columns.

    Dead entries get a large negative logit before normalisation and an
    exact zero afterwards.
    """
    sim = as_tensor(sim)
    ka, kb = sim.shape
    live_a = np.ones(ka, bool) if live_a is None else np.asarray(live_a, bool)
    live_b = np.ones(kb, bool) if live_b is None else np.asarray(live_b, bool)
    alive = live_a[:, None] & live_b[None, :]
    logits = where(alive, sim, np.full(sim.shape, DEAD_LOGIT))
    conf = softmax(logits, axis=0) * softmax(logits, axis=1)
    return conf * alive.astype(float)


def mutual_nearest(conf, theta_c, live_a=None, live_b=None):
    """Pairs (i, j) that are each other's argmax and reach ``theta_c``."""
    c = np.asarray(conf.data if isinstance(conf, Tensor) else conf)
    if c.size == 0:
        return np.zeros(0, int), np.zeros(0, int)
    best_j = c.argmax(axis=1)
    best_i = c.argmax(axis=0)
    i = np.arange(c.shape[0])
    ok = (best_i[best_j] == i) & (c[i, best_j] >= theta_c)
    if live_a is not None:
        ok &= np.asarray(live_a, bool)
    if live_b is not None:
        ok &= np.asarray(live_b, bool)[best_j]
    return i[ok], best_j[ok]


def coarse_match(cand_a, cand_b, theta_c=0.2, tau_m=0.1, exclude_dead=True):
    """Mutual nearest neighbours of the dual-softmax confidence.

    With ``exclude_dead`` the softmax runs over live candidates only.
    Otherwise every candidate takes part in the normalisation and dead
    candidates are only filtered out of the emitted pairs.
    """
    fa, fb = as_tensor(cand_a.features), as_tensor(cand_b.features)
    if fa.shape[1] != fb.shape[1]:
        raise DimensionError(f"feature dims differ: {fa.shape} vs {fb.shape}")
    live_a = np.asarray(as_tensor(cand_a.mask).data) > 0.5
    live_b = np.asarray(as_tensor(cand_b.mask).data) > 0.5
    if not live_a.any() or not live_b.any():
        raise SelectionError("coarse matching needs at least one live candidate per image")
    sim = (fa @ fb.T) * (1.0 / tau_m)
    if exclude_dead:
        conf = dual_softmax(sim, live_a, live_b)
    else:
        conf = dual_softmax(sim)
    ia, ib = mutual_nearest(conf, theta_c, live_a, live_b)
    return MatchSet(
        confidence_matrix=conf,
        idx_a=ia,
        idx_b=ib,
        confidence=conf.data[ia, ib].copy(),
        grid_a=np.asarray(cand_a.grid_indices)[ia],
        grid_b=np.asarray(cand_b.grid_indices)[ib],
    )


def window_offsets(w):
    r = (w - 1) // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return dx.ravel(), dy.ravel()


def expectation_from_heatmap(heat, w):
    """Expected (dx, dy) and mean per-axis variance of a (m, w*w) heatmap."""
    heat = as_tensor(heat)
    if heat.ndim != 2 or heat.shape[1] != w * w:
        raise DimensionError(f"heatmap must be (m, {w * w}), got {heat.shape}")
    gx, gy = window_offsets(w)
    ex = (heat * gx.astype(float)).sum(axis=1)
    ey = (heat * gy.astype(float)).sum(axis=1)
    ex2 = (heat * (gx.astype(float) ** 2)).sum(axis=1)
    ey2 = (heat * (gy.astype(float) ** 2)).sum(axis=1)
    var = ((ex2 - ex * ex) + (ey2 - ey * ey)) * 0.5
    offset = concat([ex.reshape(-1, 1), ey.reshape(-1, 1)], axis=1)
    return offset, var


@dataclass
class Refinement:
    offset: Tensor  # (m, 2) expected offset in fine-grid units
    variance: Tensor  # (m,)
    kept: np.ndarray  # positions into the input pair list that were refined
    points_a: np.ndarray  # (m, 2) pixel coords
    points_b: np.ndarray  # (m, 2) sub-pixel coords
    peak: np.ndarray  # (m,) max heatmap value
    dropped: int = 0


def fine_centers(cells, wc):
    r, c = np.divmod(np.asarray(cells, dtype=np.int64), wc)
    half = FINE_PER_CELL // 2
    return r * FINE_PER_CELL + half, c * FINE_PER_CELL + half


def fine_refine(fine_a, fine_b, cells_a, cells_b, w=5):
    """Refine coarse cell pairs to sub-pixel positions in image B.

    The centre fine feature of each A cell is correlated with the w x w
    window of B around the matched cell centre; the softmax heatmap's
    expectation gives the offset. Pairs whose window leaves the fine grid
    are dropped and counted.
    """
    for g in (fine_a, fine_b):
        if not isinstance(g, FeatureGrid) or g.scale != FINE:
            raise ScaleError("refinement needs fine-scale feature grids")
    if w % 2 != 1 or w < 1:
        raise ValueError(f"window size must be odd and positive, got {w}")
    cells_a = np.asarray(cells_a, dtype=np.int64).reshape(-1)
    cells_b = np.asarray(cells_b, dtype=np.int64).reshape(-1)
    hf, wf = fine_b.height, fine_b.width
    wc = fine_a.width // FINE_PER_CELL
    wc_b = wf // FINE_PER_CELL
    r = (w - 1) // 2
    ya, xa = fine_centers(cells_a, wc)
    yb, xb = fine_centers(cells_b, wc_b)
    inside = (yb - r >= 0) & (yb + r < hf) & (xb - r >= 0) & (xb + r < wf)
    kept = np.flatnonzero(inside)
    m = kept.size
    d = fine_a.channels
    if m == 0:
        empty = Tensor(np.zeros((0, 2)))
        return Refinement(empty, Tensor(np.zeros(0)), kept, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0),
                          int(len(cells_a)))
    gx, gy = window_offsets(w)
    win = (yb[kept, None] + gy[None]) * wf + (xb[kept, None] + gx[None])  # (m, w*w)
    centre = take(fine_a.flat(), ya[kept] * fine_a.width + xa[kept])  # (m, d)
    window = take(fine_b.flat(), win)  # (m, w*w, d)
    sim = (window * centre.reshape(m, 1, d)).sum(axis=2) * (1.0 / np.sqrt(d))
    heat = softmax(sim, axis=1)
    offset, var = expectation_from_heatmap(heat, w)
    hc_a = fine_a.height // FINE_PER_CELL
    hc_b = hf // FINE_PER_CELL
    points_a = cell_anchors(hc_a, wc, cells_a[kept])
    points_b = cell_anchors(hc_b, wc_b, cells_b[kept]) + FINE_STRIDE * offset.data
    return Refinement(offset, var, kept, points_a, points_b, heat.data.max(axis=1), int(len(cells_a) - m))


def refine_matches(matches, fine_a, fine_b, w=5):
    """Attach fine points to a MatchSet; border pairs are removed from the fine list."""
    ref = fine_refine(fine_a, fine_b, matches.grid_a, matches.grid_b, w)
    matches.points_a = ref.points_a
    matches.points_b = ref.points_b
    matches.fine_confidence = matches.confidence[ref.kept]
    matches.variance = ref.variance.data.copy()
    matches.dropped = {"window_out_of_bounds": ref.dropped}
    return matches
