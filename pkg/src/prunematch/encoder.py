"""Two-scale convolutional feature encoder (1/8 coarse, 1/2 fine)."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InputShapeError, ScaleError
from .layers import linear
from .tensor import Tensor, as_tensor, relu, take

COARSE = "coarse"
FINE = "fine"
SCALE_FACTOR = {COARSE: 8, FINE: 2}


@dataclass
class FeatureGrid:
    values: Tensor  # (height, width, channels)
    scale: str

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    def flat(self):
        return self.values.reshape(self.height * self.width, self.channels)


@lru_cache(maxsize=64)
def _conv_index(h, w, k, stride):
    """Source-pixel index for every (output cell, tap); borders replicate."""
    ho, wo = (h + stride - 1) // stride, (w + stride - 1) // stride
    r = k // 2
    oy, ox = np.meshgrid(np.arange(ho) * stride, np.arange(wo) * stride, indexing="ij")
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    sy = np.clip(oy.reshape(-1, 1) + dy.reshape(1, -1), 0, h - 1)
    sx = np.clip(ox.reshape(-1, 1) + dx.reshape(1, -1), 0, w - 1)
    idx = sy * w + sx
    idx.setflags(write=False)
    return idx, ho, wo


@lru_cache(maxsize=16)
def _upsample_index(h, w, factor):
    ys, xs = np.meshgrid(np.arange(h * factor) // factor, np.arange(w * factor) // factor, indexing="ij")
    idx = (ys * w + xs).reshape(-1)
    idx.setflags(write=False)
    return idx


def conv2d(x, h, w, params, prefix, k=3, stride=1):
    """Convolution on a flattened (h*w, c) map with edge replication.

    Returns the flattened output and its spatial size.
    """
    idx, ho, wo = _conv_index(h, w, k, stride)
    patches = take(x, idx).reshape(ho * wo, -1)
    return linear(patches, params, prefix), ho, wo


def init_encoder(builder, cfg):
    c1, c2 = cfg.enc_c1, cfg.enc_c2
    builder.linear("encoder.conv1", 9, c1, gain=np.sqrt(2.0))
    builder.linear("encoder.conv2", 9 * c1, c2, gain=np.sqrt(2.0))
    builder.linear("encoder.conv3", 9 * c2, cfg.d_c)
    builder.linear("encoder.lateral", 9 * c1, cfg.d_f)
    builder.linear("encoder.topdown", cfg.d_c, cfg.d_f, bias=False)


def encode(image, params):
    """Coarse (H/8) and fine (H/2) feature grids of a grayscale image.

    ``image`` is (H, W) or (H, W, 1) with H and W divisible by 8. The fine map
    is a lateral 3x3 convolution of the first stage plus the coarse map,
    projected and upsampled (a one-level FPN merge).
    """
    image = as_tensor(image)
    if image.ndim == 3:
        if image.shape[2] != 1:
            raise InputShapeError(f"expected a single-channel image, got shape {image.shape}")
        image = image.reshape(image.shape[0], image.shape[1])
    if image.ndim != 2:
        raise InputShapeError(f"expected an (H, W) image, got shape {image.shape}")
    h, w = image.shape
    if h % 8 or w % 8 or h == 0 or w == 0:
        raise InputShapeError(f"image dims must be positive multiples of 8, got {h}x{w}")

    x = image.reshape(h * w, 1)
    s1, h1, w1 = conv2d(x, h, w, params, "encoder.conv1", stride=2)
    s1 = relu(s1)
    s2, h2, w2 = conv2d(s1, h1, w1, params, "encoder.conv2", stride=2)
    s2 = relu(s2)
    coarse, h3, w3 = conv2d(s2, h2, w2, params, "encoder.conv3", stride=2)

    lateral, _, _ = conv2d(s1, h1, w1, params, "encoder.lateral", stride=1)
    topdown = take(linear(coarse, params, "encoder.topdown", bias=False), _upsample_index(h3, w3, 4))
    fine = lateral + topdown

    d_c = coarse.shape[1]
    d_f = fine.shape[1]
    return (
        FeatureGrid(coarse.reshape(h3, w3, d_c), COARSE),
        FeatureGrid(fine.reshape(h1, w1, d_f), FINE),
    )


@lru_cache(maxsize=32)
def sinusoid_code(height, width, channels):
    """Fixed 2-D sinusoidal code, (height, width, channels).

    Channel groups of four hold sin/cos of the column and sin/cos of the
    row at geometrically spaced frequencies.
    """
    if channels % 4:
        raise ValueError(f"channels must be divisible by 4, got {channels}")
    freqs = np.exp(np.arange(0, channels // 2, 2) * (-np.log(10000.0) / (channels // 2)))
    rows, cols = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij")
    code = np.zeros((height, width, channels))
    code[:, :, 0::4] = np.sin(cols[..., None] * freqs)
    code[:, :, 1::4] = np.cos(cols[..., None] * freqs)
    code[:, :, 2::4] = np.sin(rows[..., None] * freqs)
    code[:, :, 3::4] = np.cos(rows[..., None] * freqs)
    code.setflags(write=False)
    return code


def positional_encoding(grid):
    if grid.scale != COARSE:
        raise ScaleError(f"positional encoding applies to the coarse grid, got {grid.scale}")
    code = sinusoid_code(grid.height, grid.width, grid.channels)
    return FeatureGrid(grid.values + code, COARSE)
