"""Pruning, coarse-matching and fine-refinement losses, and their weighted total."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, as_tensor, clamp, log

logger = logging.getLogger(__name__)

EPS = 1e-7
WEIGHTS = {"sprune": 0.5, "iprune": 0.3, "coarse": 1.0, "fine": 1.0}


def _clamped(p):
    p = as_tensor(p)
    if np.any(p.data < EPS) or np.any(p.data > 1.0 - EPS):
        logger.debug("clamping probabilities to [%g, 1 - %g]", EPS, EPS)
    return clamp(p, EPS, 1.0 - EPS)


def _per_side(fn, first, second, *args, **kwargs):
    """Sum ``fn`` over sides when given sequences, else evaluate once."""
    if isinstance(first, (list, tuple)):
        if len(first) != len(second):
            raise DimensionError("per-side inputs differ in count")
        terms = [fn(a, b, *args, **kwargs) for a, b in zip(first, second)]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total
    return fn(first, second, *args, **kwargs)


def binary_cross_entropy(scores, labels):
    scores = as_tensor(scores)
    y = np.asarray(as_tensor(labels).data, dtype=float)
    if scores.shape != y.shape:
        raise DimensionError(f"scores {scores.shape} and labels {y.shape} differ")
    s = _clamped(scores)
    return -(log(s) * y + log(1.0 - s) * (1.0 - y)).mean()


def self_prune_loss(scores, labels):
    """Mean binary cross-entropy; sequences of per-image inputs are summed over images."""
    return _per_side(binary_cross_entropy, scores, labels)


def focal_loss(keep_prob, labels, gamma=2.0, alpha=0.25, live=None):
    """-alpha (1 - p_t)^gamma ln p_t averaged over (live) candidates.

    ``keep_prob`` rows are ``[drop, keep]``; ``labels`` are 1 for keep.
    """
    keep_prob = as_tensor(keep_prob)
    y = np.asarray(as_tensor(labels).data, dtype=float)
    if keep_prob.ndim != 2 or keep_prob.shape != (len(y), 2):
        raise DimensionError(f"keep probabilities {keep_prob.shape} vs {len(y)} labels")
    rows = np.arange(len(y)) if live is None else np.flatnonzero(np.asarray(live, bool))
    if rows.size == 0:
        return Tensor(0.0)
    onehot = np.zeros((rows.size, 2))
    onehot[np.arange(rows.size), (y[rows] > 0.5).astype(int)] = 1.0
    p_t = (keep_prob[rows] * onehot).sum(axis=1)
    p_t = _clamped(p_t)
    weight = (1.0 - p_t) ** gamma if gamma != 0 else 1.0
    return -(log(p_t) * weight * alpha).mean()


def interactive_prune_loss(keep_prob, labels, gamma=2.0, alpha=0.25, live=None):
    """Focal loss on DICS keep probabilities; sequences of per-image inputs are summed."""
    if isinstance(keep_prob, (list, tuple)):
        lives = live if live is not None else [None] * len(keep_prob)
        total = None
        for kp, y, lv in zip(keep_prob, labels, lives):
            term = focal_loss(kp, y, gamma, alpha, lv)
            total = term if total is None else total + term
        return total
    return focal_loss(keep_prob, labels, gamma, alpha, live)


def coarse_matching_loss(conf, gt, gamma=2.0, alpha=0.25):
    """Focal negative log-likelihood of the confidence at ground-truth cells.

    Returns ``(loss, n_positive)``; no positives gives zero.
    """
    conf = as_tensor(conf)
    gt = np.asarray(gt)
    if conf.shape != gt.shape:
        raise DimensionError(f"confidence {conf.shape} and assignment {gt.shape} differ")
    rows, cols = np.nonzero(gt > 0.5)
    if rows.size == 0:
        logger.debug("no ground-truth coarse matches; coarse loss is zero")
        return Tensor(0.0), 0
    c = _clamped(conf[rows, cols])
    weight = (1.0 - c) ** gamma if gamma != 0 else 1.0
    return -(log(c) * weight * alpha).mean(), int(rows.size)


def fine_loss(offset, gt_offset, variance, floor=0.0):
    """(1 / var) * |offset - gt|^2 averaged over matches; ``variance`` carries no gradient.

    Returns ``(loss, n_matches)``; no matches gives zero.
    """
    offset = as_tensor(offset)
    gt_offset = np.asarray(gt_offset, dtype=float)
    if offset.shape != gt_offset.shape:
        raise DimensionError(f"offsets {offset.shape} and targets {gt_offset.shape} differ")
    if offset.shape[0] == 0:
        logger.debug("no refined matches; fine loss is zero")
        return Tensor(0.0), 0
    var = np.asarray(as_tensor(variance).data, dtype=float)
    weight = 1.0 / np.maximum(var, floor)
    diff = offset - gt_offset
    return ((diff * diff).sum(axis=1) * weight).mean(), int(offset.shape[0])


@dataclass
class LossReport:
    l_sprune: Tensor
    l_iprune: Tensor
    l_coarse: Tensor
    l_fine: Tensor
    total: Tensor
    counts: dict = field(default_factory=dict)

    def values(self):
        out = {k: float(getattr(self, k).data) for k in ("l_sprune", "l_iprune", "l_coarse", "l_fine", "total")}
        out.update(self.counts)
        return out


def total_loss(l_sprune, l_iprune, l_coarse, l_fine, weights=None, counts=None):
    """Weighted sum 0.5 * sprune + 0.3 * iprune + 1.0 * coarse + 1.0 * fine (defaults)."""
    w = dict(WEIGHTS)
    if weights:
        w.update(weights)
    terms = [as_tensor(t) for t in (l_sprune, l_iprune, l_coarse, l_fine)]
    for t in terms:
        if t.size != 1:
            raise DimensionError(f"loss terms must be scalars, got shape {t.shape}")
    total = terms[0] * w["sprune"] + terms[1] * w["iprune"] + terms[2] * w["coarse"] + terms[3] * w["fine"]
    return LossReport(*terms, total, dict(counts or {}))


def weights_from_config(cfg):
    return {"sprune": cfg.w_sprune, "iprune": cfg.w_iprune, "coarse": cfg.w_coarse, "fine": cfg.w_fine}
