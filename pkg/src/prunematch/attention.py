"""Vanilla, linear and mask-pruned attention kernels and the self/cross block.

All kernels take row-major (N, d) queries, keys and values. Linear attention
uses the feature map phi(x) = elu(x) + 1 and the per-row normaliser
phi(Q) . sum_j phi(K_j); the pruned variants sum over kept keys only.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateMaskError, DimensionError, SelectionError
from .layers import affine_norm, linear, mlp2
from .tensor import Tensor, as_tensor, concat, elu_plus_one, scatter_rows, softmax, take

IMPLICIT = "implicit"
DIRECT = "direct"


def _check_qkv(q, k, v):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"attention expects 2-D inputs, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query/key feature dims differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key/value row counts differ: {k.shape} vs {v.shape}")


def _column(mask, n, what):
    mask = as_tensor(mask)
    if mask.shape != (n,):
        raise DimensionError(f"{what} mask has shape {mask.shape}, expected ({n},)")
    return mask.reshape(n, 1)


def vanilla_attention(q, k, v):
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    return softmax(q @ k.T, axis=1) @ v


def linear_attention(q, k, v):
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    phi_q, phi_k = elu_plus_one(q), elu_plus_one(k)
    numer = phi_q @ (phi_k.T @ v)
    denom = phi_q @ phi_k.sum(axis=0).reshape(-1, 1)
    return numer / denom


def implicit_pruning_attention(q, k, v, mask_q, mask_kv):
    """Linear attention with pruned keys zeroed and pruned query rows set to zero.

    Output keeps all N rows; kept rows are normalised over kept keys only.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    m_q = _column(mask_q, q.shape[0], "query")
    m_kv = _column(mask_kv, k.shape[0], "key/value")
    if not np.any(m_kv.data > 0.5):
        raise DegenerateMaskError("key/value mask has no kept entry")
    phi_q = elu_plus_one(q)
    phi_k = elu_plus_one(k) * m_kv
    numer = phi_q @ (phi_k.T @ (v * m_kv))
    denom = phi_q @ phi_k.sum(axis=0).reshape(-1, 1)
    return numer / denom * m_q


def kept_indices(mask):
    return np.flatnonzero(as_tensor(mask).data > 0.5)


def direct_pruning_attention(q, k, v, mask_q, mask_kv):
    """Linear attention on the compacted kept rows.

    Returns the (k_q, d) output and the kept query indices for scatter-back.
    Gathered values and outputs are multiplied by their (unit) mask entries
    so straight-through mask gradients survive the gather.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    m_q = _column(mask_q, q.shape[0], "query")
    m_kv = _column(mask_kv, k.shape[0], "key/value")
    q_idx, kv_idx = kept_indices(mask_q), kept_indices(mask_kv)
    if q_idx.size == 0 or kv_idx.size == 0:
        raise SelectionError("direct pruning needs at least one kept query and one kept key")
    out = linear_attention(take(q, q_idx), take(k, kv_idx), take(v, kv_idx) * take(m_kv, kv_idx))
    return out * take(m_q, q_idx), q_idx


def scatter_back(compact, indices, carry):
    """Write compacted rows back to their original positions in ``carry``."""
    compact, carry = as_tensor(compact), as_tensor(carry)
    idx = np.asarray(indices)
    n = carry.shape[0]
    if idx.ndim != 1 or idx.size != compact.shape[0]:
        raise SelectionError(f"{idx.size} indices for {compact.shape[0]} compact rows")
    if idx.size == 0:
        raise SelectionError("scatter_back needs at least one row")
    if idx.min() < 0 or idx.max() >= n:
        raise SelectionError(f"indices out of range [0, {n})")
    if np.unique(idx).size != idx.size:
        raise SelectionError("duplicate scatter indices")
    return scatter_rows(carry, idx, compact)


def _multihead(kernel, q, k, v, heads, *masks):
    if heads == 1:
        return kernel(q, k, v, *masks)
    dh = q.shape[1] // heads
    outs = [kernel(q[:, i * dh:(i + 1) * dh], k[:, i * dh:(i + 1) * dh], v[:, i * dh:(i + 1) * dh], *masks)
            for i in range(heads)]
    return concat(outs, axis=1)


# -- transformer layers -------------------------------------------------------


def init_attention_layer(builder, prefix, d):
    for name in ("q_proj", "k_proj", "v_proj", "merge"):
        builder.linear(f"{prefix}.{name}", d, d, bias=False)
    builder.norm(prefix + ".norm1", d)
    builder.mlp2(prefix + ".mlp", 2 * d, 2 * d, d)
    builder.norm(prefix + ".norm2", d)


def _layer_update(x, message, params, prefix):
    message = affine_norm(linear(message, params, prefix + ".merge", bias=False), params, prefix + ".norm1")
    message = mlp2(concat([x, message], axis=1), params, prefix + ".mlp")
    return affine_norm(message, params, prefix + ".norm2")


def attention_layer(x, source, mask_x, mask_src, params, prefix, variant=IMPLICIT, heads=1):
    """One masked attention layer: x attends to source, with residual and feed-forward.

    Rows of ``x`` whose mask is 0 pass through unchanged.
    """
    if variant == IMPLICIT:
        q = linear(x, params, prefix + ".q_proj", bias=False)
        k = linear(source, params, prefix + ".k_proj", bias=False)
        v = linear(source, params, prefix + ".v_proj", bias=False)
        message = _multihead(implicit_pruning_attention, q, k, v, heads, mask_x, mask_src)
        return x + _layer_update(x, message, params, prefix) * as_tensor(mask_x).reshape(-1, 1)
    if variant == DIRECT:
        q_idx, kv_idx = kept_indices(mask_x), kept_indices(mask_src)
        if q_idx.size == 0 or kv_idx.size == 0:
            raise SelectionError("direct pruning needs at least one kept query and one kept key")
        m_q = take(as_tensor(mask_x), q_idx).reshape(-1, 1)
        m_kv = take(as_tensor(mask_src), kv_idx).reshape(-1, 1)
        x_sel, src_sel = take(x, q_idx), take(source, kv_idx)
        q = linear(x_sel, params, prefix + ".q_proj", bias=False)
        k = linear(src_sel, params, prefix + ".k_proj", bias=False)
        v = linear(src_sel, params, prefix + ".v_proj", bias=False) * m_kv
        message = _multihead(linear_attention, q, k, v, heads) * m_q
        updated = x_sel + _layer_update(x_sel, message, params, prefix) * m_q
        return scatter_back(updated, q_idx, x)
    raise ValueError(f"unknown pruning variant {variant!r}")


def init_sc_block(builder, prefix, d):
    init_attention_layer(builder, prefix + ".self", d)
    init_attention_layer(builder, prefix + ".cross", d)


def self_cross_block(feat_a, feat_b, mask_a, mask_b, params, prefix, variant=IMPLICIT, heads=1):
    """Masked self-attention on each side, then symmetric masked cross-attention."""
    if feat_a.shape[1] != feat_b.shape[1]:
        raise DimensionError(f"feature dims differ across images: {feat_a.shape} vs {feat_b.shape}")
    a = attention_layer(feat_a, feat_a, mask_a, mask_a, params, prefix + ".self", variant, heads)
    b = attention_layer(feat_b, feat_b, mask_b, mask_b, params, prefix + ".self", variant, heads)
    a2 = attention_layer(a, b, mask_a, mask_b, params, prefix + ".cross", variant, heads)
    b2 = attention_layer(b, a, mask_b, mask_a, params, prefix + ".cross", variant, heads)
    return a2, b2


def ones_mask(n):
    return Tensor(np.ones(n))


__all__ = [
    "vanilla_attention",
    "linear_attention",
    "implicit_pruning_attention",
    "direct_pruning_attention",
    "scatter_back",
    "attention_layer",
    "self_cross_block",
    "init_sc_block",
    "kept_indices",
    "ones_mask",
]
