"""Self-pruning (score + top-k) and differentiable interactive candidate selection.

Keep-probability rows are ``[drop, keep]``. In training the hard keep
decision comes from a Gumbel-max sample with a straight-through gradient
of the tempered soft sample; in evaluation it is ``keep >= drop``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .encoder import COARSE, FeatureGrid
from .errors import ConfigError, DimensionError, ScaleError
from .layers import affine_norm, mlp2
from .tensor import Tensor, as_tensor, clamp, concat, log, sigmoid, softmax, straight_through, take

log_ = logging.getLogger(__name__)

TRAIN = "train"
EVAL = "eval"


@dataclass
class CandidateSet:
    features: Tensor  # (k, d)
    grid_indices: np.ndarray  # (k,) raster index into the coarse grid
    mask: Tensor  # (k,) in {0, 1}
    side: str
    scores: Tensor | None = None  # (k,) self-pruning scores of the kept cells

    def __len__(self):
        return len(self.grid_indices)

    @property
    def live(self):
        return np.flatnonzero(self.mask.data > 0.5)


@dataclass
class KeepDecision:
    keep_prob: Tensor  # (k, 2)
    hard_keep: Tensor  # (k,) in {0, 1}, straight-through in training
    updated_mask: Tensor
    forced: bool = False


KEEP_BIAS = 3.0  # initial keep logit margin: DICS starts close to keeping everything


def init_pruning(builder, cfg):
    builder.mlp2("self_prune.mlp", cfg.d_c, cfg.d_c // 2, 1)
    for b in range(1, cfg.n_blocks + 1):
        builder.norm(f"dics.{b}.norm", cfg.d_c)
        builder.mlp2(f"dics.{b}.mlp", cfg.d_c, cfg.d_c // 2, 2)
        builder.params[f"dics.{b}.mlp.fc2.bias"].data[1] = KEEP_BIAS


def self_prune_score(grid, params):
    """Per-cell informativeness score in [0, 1], raster order."""
    if not isinstance(grid, FeatureGrid) or grid.scale != COARSE:
        raise ScaleError("self-pruning scores are computed on the coarse grid")
    return sigmoid(mlp2(grid.flat(), params, "self_prune.mlp")).reshape(-1)


def selection_count(cells, alpha):
    """round-half-up(cells * alpha), clamped to [1, cells]."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    k = int((Decimal(cells) * Decimal(str(alpha))).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return min(max(k, 1), cells)


def topk_order(scores):
    """Indices by descending score; ties go to the lower index."""
    s = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(s.size), -s))


def topk_select(features, scores, alpha, side="A"):
    """Keep the ``round(cells * alpha)`` highest-scoring cells.

    ``features`` is the (cells, d) coarse map (or a coarse FeatureGrid).
    Selected features are scaled by their score so the scoring network
    receives gradient from everything downstream.
    """
    if isinstance(features, FeatureGrid):
        features = features.flat()
    scores = as_tensor(scores)
    cells = features.shape[0]
    if scores.shape != (cells,):
        raise DimensionError(f"{scores.shape} scores for {cells} cells")
    k = selection_count(cells, alpha)
    idx = topk_order(scores.data)[:k]
    kept_scores = take(scores, idx)
    return CandidateSet(
        features=take(features, idx) * kept_scores.reshape(k, 1),
        grid_indices=idx,
        mask=Tensor(np.ones(k)),
        side=side,
        scores=kept_scores,
    )


def dics_keep_probability(features, params, block):
    """(k, 2) softmax of a small MLP on layer-normalised candidate features."""
    if features.shape[0] < 1:
        raise DimensionError("DICS needs at least one candidate")
    normed = affine_norm(features, params, f"dics.{block}.norm")
    return softmax(mlp2(normed, params, f"dics.{block}.mlp"), axis=1)


def gumbel_softmax_sample(keep_prob, temperature=1.0, mode=TRAIN, rng=None, hard=True):
    """Keep indicator P (k,) from two-channel probabilities.

    Train mode draws Gumbel noise from ``rng``; with ``hard=True`` the value
    is the one-hot keep channel and the gradient is that of the soft sample.
    ``hard=False`` returns the soft keep channel itself. Eval mode ignores
    ``rng`` and returns ``keep >= drop`` without gradient.
    """
    keep_prob = as_tensor(keep_prob)
    if keep_prob.ndim != 2 or keep_prob.shape[1] != 2:
        raise DimensionError(f"keep probabilities must be (k, 2), got {keep_prob.shape}")
    if mode == EVAL:
        p = keep_prob.data
        return Tensor((p[:, 1] >= p[:, 0]).astype(float))
    if mode != TRAIN:
        raise ValueError(f"unknown mode {mode!r}")
    if temperature <= 0:
        raise ConfigError(f"Gumbel temperature must be positive, got {temperature}")
    if rng is None:
        raise ValueError("train-mode sampling needs an explicit rng")
    u = rng.random(keep_prob.shape)
    gumbel = -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))
    soft = softmax((log(clamp(keep_prob, 1e-30, None)) + gumbel) * (1.0 / temperature), axis=1)
    keep_soft = soft[:, 1]
    if not hard:
        return keep_soft
    return straight_through((soft.data[:, 1] > soft.data[:, 0]).astype(float), keep_soft)


def cumulative_keep_probability(keep_probs):
    """(k, 2) [drop, keep] probability of surviving every listed DICS step."""
    keep = None
    for kp in keep_probs:
        p = as_tensor(kp)[:, 1]
        keep = p if keep is None else keep * p
    if keep is None:
        raise ValueError("no keep probabilities given")
    n = keep.shape[0]
    return concat([(1.0 - keep).reshape(n, 1), keep.reshape(n, 1)], axis=1)


def update_mask(keep, mask):
    keep, mask = as_tensor(keep), as_tensor(mask)
    if keep.shape != mask.shape:
        raise DimensionError(f"keep decision {keep.shape} and mask {mask.shape} differ in length")
    return keep * mask


def dics(features, mask, params, block, temperature=1.0, mode=TRAIN, rng=None):
    """One interactive selection step; never returns an all-zero mask.

    If every live candidate would be dropped, the live candidate with the
    highest keep probability is kept and ``forced`` is set.
    """
    keep_prob = dics_keep_probability(features, params, block)
    keep = gumbel_softmax_sample(keep_prob, temperature, mode, rng)
    mask = as_tensor(mask)
    updated = update_mask(keep, mask)
    forced = False
    if not np.any(updated.data > 0.5):
        live = np.flatnonzero(mask.data > 0.5)
        if live.size:
            j = live[np.argmax(keep_prob.data[live, 1])]
            value = keep.data.copy()
            value[j] = 1.0
            keep = straight_through(value, keep)
            updated = update_mask(keep, mask)
            forced = True
            log_.debug("DICS block %d would prune every candidate; kept index %d", block, j)
    return KeepDecision(keep_prob, keep, updated, forced)
