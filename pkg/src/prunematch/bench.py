"""Closed-form FLOP accounting and per-stage wall-clock timing.

Counting rules: a multiply-add is 2 FLOPs; a bias add, activation,
mask multiply, residual add or elementwise divide is 1 per element;
softmax is 3 per element (exp, sum, divide); layer norm is 7 per element
(mean, centre, square, variance, scale, then the affine pair). Gathers,
scatters, sorting and argmax are free.
"""

from __future__ import annotations

import json
import time
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .layers import frozen
from .pruning import selection_count

LAYER_NORM = 7
SOFTMAX = 3


def linear_flops(n, d_in, d_out, bias=True):
    return 2 * n * d_in * d_out + (n * d_out if bias else 0)


def linear_attention_flops(n_q, n_k, d, heads=1):
    """phi on both sides, K^T V per head, the key sum, numerator, denominator, divide."""
    dh = d // heads
    return (n_q * d + n_k * d  # elu + 1
            + 2 * n_k * d * dh  # phi(K)^T V, summed over heads
            + n_k * d  # key sum
            + 2 * n_q * d * dh  # phi(Q) (phi(K)^T V)
            + 2 * n_q * d  # normaliser dot products
            + n_q * d)  # divide


def attention_layer_flops(n_q, n_k, d, heads=1):
    """Projections, masked linear attention, merge, norms, MLP and residual."""
    f = linear_flops(n_q, d, d, False) + 2 * linear_flops(n_k, d, d, False)
    f += linear_attention_flops(n_q, n_k, d, heads)
    f += 2 * n_k * d + 2 * n_q * d  # key/value masks, query and residual masks
    f += linear_flops(n_q, d, d, False) + LAYER_NORM * n_q * d
    f += linear_flops(n_q, 2 * d, 2 * d) + n_q * 2 * d + linear_flops(n_q, 2 * d, d)
    f += LAYER_NORM * n_q * d + n_q * d
    return f


def sc_block_flops(n_a, n_b, d, heads=1):
    return (attention_layer_flops(n_a, n_a, d, heads) + attention_layer_flops(n_b, n_b, d, heads)
            + attention_layer_flops(n_a, n_b, d, heads) + attention_layer_flops(n_b, n_a, d, heads))


def encoder_flops(h, w, cfg):
    n1, n3 = (h // 2) * (w // 2), (h // 8) * (w // 8)
    n2 = (h // 4) * (w // 4)
    c1, c2 = cfg.enc_c1, cfg.enc_c2
    f = linear_flops(n1, 9, c1) + n1 * c1
    f += linear_flops(n2, 9 * c1, c2) + n2 * c2
    f += linear_flops(n3, 9 * c2, cfg.d_c)
    f += linear_flops(n1, 9 * c1, cfg.d_f) + linear_flops(n3, cfg.d_c, cfg.d_f, False) + n1 * cfg.d_f
    f += n3 * cfg.d_c  # positional code
    return 2 * f


def self_prune_flops(cells, k, d):
    per_image = linear_flops(cells, d, d // 2) + cells * (d // 2) + linear_flops(cells, d // 2, 1) + cells
    return 2 * (per_image + k * d)  # score MLP, sigmoid, then scaling the kept features


def dics_flops(n, d):
    per_image = LAYER_NORM * n * d + linear_flops(n, d, d // 2) + n * (d // 2) + linear_flops(n, d // 2, 2)
    per_image += SOFTMAX * 2 * n + n  # softmax, mask update
    return 2 * per_image


def matching_flops(k_a, k_b, d):
    f = k_a * d + k_b * d  # feature scaling
    f += 2 * k_a * k_b * d + k_a * k_b  # similarity and temperature
    f += 2 * SOFTMAX * k_a * k_b + 2 * k_a * k_b  # dual softmax, product and live mask
    return f


def refinement_flops(m, w, d_f):
    ww = w * w
    return m * (2 * ww * d_f + ww + SOFTMAX * ww + 4 * 2 * ww + 8)


@dataclass
class CostReport:
    stages: OrderedDict = field(default_factory=OrderedDict)  # name -> FLOPs
    params: int = 0
    peak_live: list = field(default_factory=list)  # per block (A, B)
    timings: dict = field(default_factory=dict)  # name -> {"median_ns", "iqr_ns", "amortized"}
    meta: dict = field(default_factory=dict)

    @property
    def total(self):
        return int(sum(self.stages.values()))

    def sc_flops(self):
        return int(sum(v for k, v in self.stages.items() if k.startswith("block_")))

    def to_dict(self):
        return {"stages": dict(self.stages), "total_flops": self.total, "params": self.params,
                "peak_live": [list(x) for x in self.peak_live], "timings": self.timings, **self.meta}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def candidate_count(cfg, image_size=None):
    h, w = image_size or cfg.image_size
    cells = (h // 8) * (w // 8)
    return cells, selection_count(cells, cfg.alpha)


def count_flops(cfg, live_counts=None, n_matches=None, image_size=None, params=0):
    """Closed-form FLOPs per stage.

    ``live_counts`` lists live candidates (A, B) at the input of each block;
    by default nothing is pruned after self-pruning. The direct variant is
    counted on live sizes, the implicit variant on the full candidate count.
    ``n_matches`` defaults to the smaller final live count.
    """
    h, w = image_size or cfg.image_size
    cells, k = candidate_count(cfg, (h, w))
    if live_counts is None:
        live_counts = [(k, k)] * cfg.n_blocks
    live_counts = [tuple(int(v) for v in lc) for lc in live_counts]
    if len(live_counts) != cfg.n_blocks:
        raise ConfigError(f"{len(live_counts)} live counts for {cfg.n_blocks} blocks")
    for a, b in live_counts:
        if not (0 <= a <= k and 0 <= b <= k):
            raise ConfigError(f"live counts ({a}, {b}) exceed the {k} selected candidates")
    d = cfg.d_c
    rep = CostReport(params=params, peak_live=list(live_counts))
    rep.stages["encoder"] = encoder_flops(h, w, cfg)
    rep.stages["self_prune"] = self_prune_flops(cells, k, d) if cfg.alpha < 1.0 else 0
    for b, (la, lb) in enumerate(live_counts, start=1):
        n_a, n_b = (la, lb) if cfg.pruning_variant == "direct" else (k, k)
        rep.stages[f"block_{b}"] = sc_block_flops(n_a, n_b, d, cfg.heads)
        rep.stages[f"dics_{b}"] = dics_flops(k, d) if cfg.dics_at(b) else 0
    rep.stages["matching"] = matching_flops(k, k, d)
    if n_matches is None:
        n_matches = min(live_counts[-1]) if live_counts else k
    rep.stages["refinement"] = refinement_flops(int(n_matches), cfg.w, cfg.d_f)
    return rep


# -- timing ------------------------------------------------------------------------


class StageTimer:
    """Accumulates wall-clock nanoseconds per named stage."""

    def __init__(self):
        self.totals = OrderedDict()

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter_ns()
        try:
            yield
        finally:
            self.totals[name] = self.totals.get(name, 0) + time.perf_counter_ns() - t0

    def reset(self):
        self.totals = OrderedDict()


def timer_resolution_ns():
    return max(1, int(time.get_clock_info("perf_counter").resolution * 1e9))


def bench_pair(cfg, image_size=None, seed=None):
    from .data import SceneConfig, generate_pair

    size = tuple(image_size or cfg.image_size)
    scene = SceneConfig.from_pipeline(cfg, seed=cfg.seed if seed is None else seed, image_size=size)
    return generate_pair(scene)


def time_pipeline(params, cfg, repeats=5, image_size=None, warmup=1, sample=None, min_ticks=100):
    """Median and interquartile range of per-stage wall-clock over ``repeats`` eval forwards.

    Stages whose median is under ``min_ticks`` timer ticks are reported as the
    amortised mean over all repeats and flagged.
    """
    from .pipeline import forward

    if repeats < 5:
        raise ValueError("time_pipeline needs at least 5 repeats")
    consts = frozen(params)
    sample = bench_pair(cfg, image_size) if sample is None else sample
    timer = StageTimer()
    for _ in range(warmup):
        forward(sample, consts, cfg, timer=timer)
    runs, totals, live = [], [], None
    for _ in range(repeats):
        timer.reset()
        t0 = time.perf_counter_ns()
        res = forward(sample, consts, cfg, timer=timer)
        totals.append(time.perf_counter_ns() - t0)
        runs.append(dict(timer.totals))
        live = res.live_counts
    tick = timer_resolution_ns()
    timings = {}
    names = list(runs[0])
    for name in names + ["total"]:
        vals = np.array(totals if name == "total" else [r.get(name, 0) for r in runs], dtype=float)
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        amortized = bool(med < min_ticks * tick)
        if amortized:
            med = float(vals.mean())
        timings[name] = {"median_ns": float(med), "iqr_ns": float(q3 - q1), "amortized": amortized}
    timings["sc_total"] = _sum_stage(runs, lambda n: n.startswith("block_"))
    rep = count_flops(cfg, live, image_size=image_size or sample.shape, params=sum(p.size for p in params.values()))
    rep.timings = timings
    rep.meta = {"repeats": repeats, "tokens": int(np.prod(sample.shape)) // 64}
    return rep


def _sum_stage(runs, pred):
    vals = np.array([sum(v for k, v in r.items() if pred(k)) for r in runs], dtype=float)
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    return {"median_ns": float(med), "iqr_ns": float(q3 - q1), "amortized": False}


def flop_sweep(cfg, key, values):
    """Rows of (value, tokens, k, sc_flops, total_flops) for a tokens= or alpha= sweep."""
    rows = []
    for v in values:
        if key == "tokens":
            side = int(round(np.sqrt(v))) * 8
            c, size = cfg, (side, side)
        elif key == "alpha":
            c, size = cfg.replace(alpha=float(v)), None
        else:
            raise ConfigError(f"unknown sweep key {key!r}; use tokens or alpha")
        cells, k = candidate_count(c, size)
        rep = count_flops(c, image_size=size)
        rows.append({key: v, "tokens": cells, "k": k, "sc_flops": rep.sc_flops(), "total_flops": rep.total})
    return rows


def write_sweep_csv(path, rows):
    keys = list(rows[0])
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(str(r[k]) for k in keys) + "\n")
