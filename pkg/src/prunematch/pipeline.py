"""End-to-end matcher: encoder, self-pruning, attention blocks with DICS, matching, refinement.

``forward`` runs one image pair; ``compute_losses`` turns its result into
the four training terms; ``train``, ``evaluate`` and ``match_pair`` are
the entry points behind the command line.
"""

from __future__ import annotations

import contextlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .attention import init_sc_block, self_cross_block
from .checkpoint import save_checkpoint
from .data import SceneConfig, pair_at, read_pgm
from .encoder import encode, init_encoder, positional_encoding
from .errors import DivergenceError, InputShapeError
from .geometry import (
    cell_anchors,
    coarse_shape,
    covisible_labels,
    selected_covisible_labels,
    depth_validity,
    fine_gt_points,
    gt_coarse_assignment,
)
from .layers import ParamBuilder, count_parameters, frozen, zero_grads
from .losses import (
    coarse_matching_loss,
    fine_loss,
    interactive_prune_loss,
    self_prune_loss,
    total_loss,
    weights_from_config,
)
from .matching import coarse_match, fine_refine, refine_matches
from .metrics import THRESHOLDS, corner_error, error_auc, fit_homography, match_precision
from .optim import AdamW
from .pruning import (
    EVAL,
    TRAIN,
    CandidateSet,
    cumulative_keep_probability,
    dics,
    init_pruning,
    self_prune_score,
    topk_select,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

# Seed offsets keep training, probe and evaluation pairs disjoint.
PROBE_OFFSET = 20_000_000
EVAL_OFFSET = 10_000_000
PROBE_PAIRS = 8


def init_params(cfg, seed=None):
    """Fresh parameters in a fixed declaration order (the checkpoint order)."""
    builder = ParamBuilder(np.random.default_rng(cfg.seed if seed is None else seed))
    init_encoder(builder, cfg)
    for b in range(1, cfg.n_blocks + 1):
        init_sc_block(builder, f"blocks.{b}", cfg.d_c)
    init_pruning(builder, cfg)
    return builder.params


@dataclass
class ForwardResult:
    matches: object  # MatchSet
    cand_a: CandidateSet  # final features and the mask used for matching
    cand_b: CandidateSet
    scores: tuple | None  # full-grid self-pruning scores (A, B); None when self-pruning is off
    masks: list  # masks[0] initial, masks[b] after block b; (mask_A, mask_B) arrays
    mask_tensors: list  # same as ``masks`` but Tensors carrying straight-through gradients
    keep_probs: list  # per block (keep_prob_A, keep_prob_B) or None
    live_counts: list  # live candidates (A, B) at the input of each block
    forced: list  # per block: whether DICS had to force-keep a candidate
    fine: tuple  # fine FeatureGrids (A, B)
    exclude_dead: bool = False
    extras: dict = field(default_factory=dict)


def _stage(timer, name):
    return timer.stage(name) if timer is not None else contextlib.nullcontext()


def _image(image):
    arr = np.asarray(image, dtype=float)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return arr


def forward(sample, params, cfg, mode=EVAL, rng=None, timer=None, refine=True):
    """Run the matcher on one pair.

    In ``train`` mode DICS samples with ``rng``; ``eval`` is deterministic.
    With ``alpha == 1`` self-pruning is off and candidates are all cells in
    raster order; with ``dics_from_block > n_blocks`` DICS is off.
    """
    image_a, image_b = _image(sample.image_a), _image(sample.image_b)
    if image_a.shape != image_b.shape:
        raise InputShapeError(f"image sizes differ: {image_a.shape} vs {image_b.shape}")
    with _stage(timer, "encoder"):
        coarse_a, fine_a = encode(image_a, params)
        coarse_b, fine_b = encode(image_b, params)
        coarse_a, coarse_b = positional_encoding(coarse_a), positional_encoding(coarse_b)

    with _stage(timer, "self_prune"):
        if cfg.alpha < 1.0:
            score_a = self_prune_score(coarse_a, params)
            score_b = self_prune_score(coarse_b, params)
            cand_a = topk_select(coarse_a, score_a, cfg.alpha, "A")
            cand_b = topk_select(coarse_b, score_b, cfg.alpha, "B")
            scores = (score_a, score_b)
        else:
            cells = coarse_a.height * coarse_a.width
            cand_a = CandidateSet(coarse_a.flat(), np.arange(cells), Tensor(np.ones(cells)), "A")
            cand_b = CandidateSet(coarse_b.flat(), np.arange(cells), Tensor(np.ones(cells)), "B")
            scores = None

    feat_a, feat_b = cand_a.features, cand_b.features
    mask_a, mask_b = cand_a.mask, cand_b.mask
    masks = [(mask_a.data.copy(), mask_b.data.copy())]
    mask_tensors = [(mask_a, mask_b)]
    keep_probs, live_counts, forced = [], [], []
    for b in range(1, cfg.n_blocks + 1):
        live_counts.append((int((mask_a.data > 0.5).sum()), int((mask_b.data > 0.5).sum())))
        with _stage(timer, f"block_{b}"):
            feat_a, feat_b = self_cross_block(feat_a, feat_b, mask_a, mask_b, params, f"blocks.{b}",
                                              cfg.pruning_variant, cfg.heads)
        if cfg.dics_at(b):
            with _stage(timer, f"dics_{b}"):
                dec_a = dics(feat_a, mask_a, params, b, cfg.gumbel_tau, mode, rng)
                dec_b = dics(feat_b, mask_b, params, b, cfg.gumbel_tau, mode, rng)
            mask_a, mask_b = dec_a.updated_mask, dec_b.updated_mask
            keep_probs.append((dec_a.keep_prob, dec_b.keep_prob))
            forced.append(dec_a.forced or dec_b.forced)
        else:
            keep_probs.append(None)
            forced.append(False)
        masks.append((mask_a.data.copy(), mask_b.data.copy()))
        mask_tensors.append((mask_a, mask_b))

    scale = 1.0 / np.sqrt(cfg.d_c)
    final_a = CandidateSet(feat_a * scale, cand_a.grid_indices, mask_a, "A", cand_a.scores)
    final_b = CandidateSet(feat_b * scale, cand_b.grid_indices, mask_b, "B", cand_b.scores)
    with _stage(timer, "matching"):
        matches = coarse_match(final_a, final_b, cfg.theta_c, cfg.tau_m, exclude_dead=cfg.discard_after_prune)
    if refine:
        with _stage(timer, "refinement"):
            refine_matches(matches, fine_a, fine_b, cfg.w)
    return ForwardResult(matches, final_a, final_b, scores, masks, mask_tensors, keep_probs, live_counts,
                         forced, (fine_a, fine_b), cfg.discard_after_prune)


# -- losses -------------------------------------------------------------------


def _iprune_labels(sample, result, cfg):
    gi_a, gi_b = result.cand_a.grid_indices, result.cand_b.grid_indices
    if cfg.iprune_labels == "depth":
        return depth_validity(sample.depth_a)[gi_a], depth_validity(sample.depth_b)[gi_b]
    if cfg.iprune_labels == "selected":
        return selected_covisible_labels(sample, gi_a, gi_b)
    return covisible_labels(sample, gi_a, gi_b, cfg.covis_mode)


def fine_targets(sample, cells_a, cells_b, w):
    """Ground-truth offsets in fine units of each A cell anchor relative to its B cell anchor.

    Returns ``(offsets, ok)``; ``ok`` is False where the anchor is invisible
    or the target falls outside the refinement window.
    """
    pts = fine_gt_points(sample, cells_a)
    hc, wc = coarse_shape(sample.shape)
    anchors = cell_anchors(hc, wc, cells_b)
    offsets = (pts - anchors) / 2.0
    radius = (w - 1) / 2.0
    with np.errstate(invalid="ignore"):
        ok = np.all(np.isfinite(offsets), axis=1) & np.all(np.abs(offsets) <= radius, axis=1)
    return np.where(ok[:, None], offsets, 0.0), ok


def sample_fine_pairs(n, ratio, rng):
    """Seeded uniform subset of ``round(ratio * n)`` (at least one) positions, sorted."""
    if n == 0:
        return np.zeros(0, dtype=int)
    if ratio >= 1.0:
        return np.arange(n)
    m = max(1, int(round(ratio * n)))
    return np.sort(rng.choice(n, size=m, replace=False))


def compute_losses(result, sample, cfg, rng=None):
    """LossReport for one forward pass; ``rng`` drives fine-supervision sampling."""
    rng = rng if rng is not None else np.random.default_rng(0)
    counts = {}

    if result.scores is not None:
        labels = [depth_validity(sample.depth_a), depth_validity(sample.depth_b)]
        l_s = self_prune_loss(list(result.scores), labels)
        counts["n_sprune"] = int(sum(len(lb) for lb in labels))
    else:
        l_s = Tensor(0.0)
        counts["n_sprune"] = 0

    blocks = [b for b in range(1, cfg.n_blocks + 1) if result.keep_probs[b - 1] is not None]
    if blocks:
        y_a, y_b = _iprune_labels(sample, result, cfg)
        if cfg.supervise == "last":
            # the final selection: probability of surviving every DICS step, on all candidates
            kp_a = cumulative_keep_probability([result.keep_probs[b - 1][0] for b in blocks])
            kp_b = cumulative_keep_probability([result.keep_probs[b - 1][1] for b in blocks])
            l_i = interactive_prune_loss([kp_a, kp_b], [y_a, y_b], cfg.focal_gamma, cfg.focal_alpha)
            counts["n_iprune"] = len(y_a) + len(y_b)
        else:
            terms, n_live = [], 0
            for b in blocks:
                kp_a, kp_b = result.keep_probs[b - 1]
                live_a, live_b = (m > 0.5 for m in result.masks[b - 1])
                terms.append(interactive_prune_loss([kp_a, kp_b], [y_a, y_b], cfg.focal_gamma,
                                                    cfg.focal_alpha, live=[live_a, live_b]))
                n_live += int(live_a.sum() + live_b.sum())
            l_i = terms[0]
            for t in terms[1:]:
                l_i = l_i + t
            l_i = l_i * (1.0 / len(terms))
            counts["n_iprune"] = n_live
    else:
        l_i = Tensor(0.0)
        counts["n_iprune"] = 0

    gi_a, gi_b = result.cand_a.grid_indices, result.cand_b.grid_indices
    gt = gt_coarse_assignment(sample, gi_a, gi_b)
    if result.exclude_dead:
        live_a = result.masks[-1][0] > 0.5
        live_b = result.masks[-1][1] > 0.5
        gt = gt * live_a[:, None] * live_b[None, :]
    l_c, counts["n_coarse"] = coarse_matching_loss(result.matches.confidence_matrix, gt, cfg.focal_gamma,
                                                   cfg.focal_alpha)

    rows, cols = np.nonzero(gt > 0.5)
    pick = sample_fine_pairs(len(rows), cfg.fine_sample_ratio, rng)
    rows, cols = rows[pick], cols[pick]
    fine_a, fine_b = result.fine
    ref = fine_refine(fine_a, fine_b, gi_a[rows], gi_b[cols], cfg.w)
    target, ok = fine_targets(sample, gi_a[rows[ref.kept]], gi_b[cols[ref.kept]], cfg.w)
    sel = np.flatnonzero(ok)
    l_f, counts["n_fine"] = fine_loss(ref.offset[sel], target[sel], ref.variance.data[sel], cfg.fine_var_floor)
    counts["forced"] = int(sum(result.forced))
    return total_loss(l_s, l_i, l_c, l_f, weights_from_config(cfg), counts)


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    log: list
    checkpoint: str | None
    probe_initial: float
    probe_final: float


def probe_pairs(cfg, n=PROBE_PAIRS):
    scene = SceneConfig.from_pipeline(cfg, seed=cfg.seed + PROBE_OFFSET)
    return [pair_at(scene, i) for i in range(n)]


def probe_loss(params, cfg, pairs):
    """Mean eval-mode total loss over fixed pairs, with fixed fine sampling."""
    consts = frozen(params)
    totals = []
    for i, s in enumerate(pairs):
        res = forward(s, consts, cfg, EVAL, refine=False)
        totals.append(compute_losses(res, s, cfg, np.random.default_rng(i)).total.item())
    return float(np.mean(totals))


def _write_jsonl(fh, record):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def train(cfg, out_dir=None, steps=None, params=None, progress=None):
    """Optimise the total loss on synthetic pairs.

    Writes ``log.jsonl`` and ``checkpoint.hcpm`` into ``out_dir`` when given.
    Raises DivergenceError (after saving the last good parameters) if the
    loss or a gradient becomes non-finite.
    """
    steps = cfg.steps if steps is None else steps
    params = init_params(cfg) if params is None else params
    opt = AdamW(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    scene = SceneConfig.from_pipeline(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    probes = probe_pairs(cfg)
    ckpt = None
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "checkpoint.hcpm")
        fh = open(os.path.join(out_dir, "log.jsonl"), "w")
    log = []

    def record(entry):
        log.append(entry)
        _write_jsonl(fh, entry)

    try:
        initial = probe_loss(params, cfg, probes)
        record({"kind": "probe", "step": 0, "total": initial})
        running = []
        for step in range(1, steps + 1):
            zero_grads(params)
            reports = []
            for j in range(cfg.batch_size):
                idx = ((step - 1) * cfg.batch_size + j) % cfg.train_pairs
                sample = pair_at(scene, idx)
                res = forward(sample, params, cfg, TRAIN, rng)
                rep = compute_losses(res, sample, cfg, rng)
                if not np.isfinite(rep.total.data):
                    raise FloatingPointError
                if rep.total.requires_grad:  # a pair without supervision contributes a constant
                    (rep.total * (1.0 / cfg.batch_size)).backward()
                reports.append(rep.values())
            if not all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params.values()):
                raise FloatingPointError
            opt.step()
            running.extend(reports)
            if step % cfg.log_every == 0 or step == steps:
                keys = reports[0].keys()
                entry = {"kind": "train", "step": step}
                entry.update({k: float(np.mean([r[k] for r in running])) for k in keys})
                record(entry)
                running = []
                if progress is not None:
                    progress(entry)
        final = probe_loss(params, cfg, probes)
        record({"kind": "probe", "step": steps, "total": final})
    except FloatingPointError:
        # the failing step never reached the optimiser, so params hold the last good state
        failed = step
        if ckpt is not None:
            save_checkpoint(ckpt, params, cfg)
        if fh is not None:
            fh.close()
        raise DivergenceError(failed, ckpt) from None
    if ckpt is not None:
        save_checkpoint(ckpt, params, cfg)
    if fh is not None:
        fh.close()
    return TrainResult(params, log, ckpt, initial, final)


# -- evaluation ---------------------------------------------------------------


def eval_pairs(cfg, n, identity=False):
    scene = SceneConfig.from_pipeline(cfg, seed=cfg.seed + EVAL_OFFSET)
    if identity:
        scene = scene.identity()
    for i in range(n):
        yield pair_at(scene, i)


def evaluate(params, cfg, n_pairs, identity=False, pairs=None, with_flops=True):
    """Corner-error AUC, precision, identity-match rate and live counts over held-out pairs."""
    from .bench import count_flops

    consts = frozen(params)
    pairs = list(eval_pairs(cfg, n_pairs, identity)) if pairs is None else pairs
    errors, precisions, live, flops = [], [], [], []
    n_coarse = n_identity = 0
    for s in pairs:
        res = forward(s, consts, cfg, EVAL)
        ms = res.matches
        n_coarse += len(ms)
        n_identity += int(np.sum(ms.grid_a == ms.grid_b))
        H = fit_homography(ms.points_a, ms.points_b) if len(ms.points_a) >= 4 else None
        errors.append(corner_error(H, s.homography, s.shape))
        if len(ms.points_a):
            precisions.append(match_precision(ms.points_a, ms.points_b, s.homography))
        live.append(res.live_counts)
        if with_flops:
            flops.append(count_flops(cfg, res.live_counts, n_matches=len(ms.points_a)).total)
    auc = error_auc(errors, THRESHOLDS)
    live = np.asarray(live, dtype=float)  # (pairs, blocks, 2)
    out = {f"auc@{t}": auc[t] for t in THRESHOLDS}
    out.update({
        "n_pairs": len(pairs),
        "precision@3": float(np.mean(precisions)) if precisions else 0.0,
        "identity_rate": n_identity / n_coarse if n_coarse else 0.0,
        "coarse_matches": n_coarse / max(len(pairs), 1),
        "failures": int(np.sum(~np.isfinite(errors))),
        "live_per_block": live.mean(axis=(0, 2)).tolist() if live.size else [],
        "mean_corner_error": float(np.mean(np.where(np.isfinite(errors), errors, np.nan))) if np.isfinite(errors).any() else float("inf"),
    })
    if with_flops:
        out["flops"] = float(np.mean(flops))
    return out


# -- single-pair matching --------------------------------------------------------


@dataclass
class _ImagePair:
    image_a: np.ndarray
    image_b: np.ndarray


def match_images(image_a, image_b, params, cfg):
    """MatchSet for two grayscale images in [0, 1]."""
    a, b = _image(image_a), _image(image_b)
    if a.shape != b.shape:
        raise InputShapeError(f"image sizes differ: {a.shape} vs {b.shape}")
    coarse_shape(a.shape)
    return forward(_ImagePair(a, b), frozen(params), cfg, EVAL).matches


def match_pair(path_a, path_b, params, cfg):
    return match_images(read_pgm(path_a), read_pgm(path_b), params, cfg)


CSV_HEADER = "x_A,y_A,x_B,y_B,confidence"


def write_matches_csv(path, matches):
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for (xa, ya), (xb, yb), c in zip(matches.points_a, matches.points_b, matches.fine_confidence):
            fh.write(f"{xa:.6f},{ya:.6f},{xb:.6f},{yb:.6f},{c:.6f}\n")
    return len(matches.points_a)


def read_matches_csv(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header!r}")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return np.asarray(rows, dtype=float).reshape(-1, 5)


def parameter_count(cfg):
    return count_parameters(init_params(cfg))
