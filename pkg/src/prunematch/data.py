"""Deterministic synthetic image pairs of a textured plane, with exact ground truth.

Texture is a procedural function of plane coordinates, so both views are
rendered by ray casting without resampling error, and depth, pose and the
plane-induced homography are known exactly.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputShapeError, PGMError
from .geometry import PairSample, Pose, plane_homography

MAX_POSE_RETRIES = 50


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple = (64, 64)
    texture: str = "mixed"  # blobs | gratings | mixed
    plane_depth: float = 4.0
    max_rotation_deg: float = 8.0
    max_translation: float = 0.25
    invalid_depth_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h % 8 or w % 8 or h <= 0 or w <= 0:
            raise ConfigError(f"image_size must be positive multiples of 8, got {self.image_size}")
        if not 0.0 <= self.invalid_depth_fraction < 1.0:
            raise ConfigError("invalid_depth_fraction must lie in [0, 1)")
        if self.texture not in ("blobs", "gratings", "mixed"):
            raise ConfigError(f"unknown texture family {self.texture!r}")
        if self.plane_depth <= 0:
            raise ConfigError("plane_depth must be positive")

    @classmethod
    def from_pipeline(cls, cfg, seed=None, **overrides):
        fields = {f.name for f in dataclasses.fields(cls)}
        values = {k: getattr(cfg, k) for k in fields if k != "seed"}
        values["seed"] = cfg.seed if seed is None else seed
        values.update(overrides)
        return cls(**values)

    def identity(self):
        return dataclasses.replace(self, max_rotation_deg=0.0, max_translation=0.0)


def intrinsics(image_size):
    h, w = image_size
    f = float(w)
    return np.array([[f, 0.0, (w - 1) / 2.0], [0.0, f, (h - 1) / 2.0], [0.0, 0.0, 1.0]])


class Texture:
    """Intensity as a function of plane coordinates (X, Y)."""

    def __init__(self, rng, family, extent):
        self.family = family
        area = (2 * extent) ** 2
        self.blobs = None
        self.waves = None
        self.boxes = None
        if family in ("blobs", "mixed"):
            n = int(5 * area)
            self.blobs = (
                rng.uniform(-extent, extent, size=(n, 2)),
                rng.uniform(0.08, 0.3, size=n),
                rng.uniform(-1.0, 1.0, size=n),
            )
        if family in ("gratings", "mixed"):
            n = 10
            theta = rng.uniform(0, np.pi, size=n)
            freq = 2 * np.pi / rng.uniform(0.35, 1.2, size=n)
            self.waves = (
                np.stack([np.cos(theta), np.sin(theta)], axis=1) * freq[:, None],
                rng.uniform(0, 2 * np.pi, size=n),
                np.full(n, 1.2 / np.sqrt(n)),
            )
        if family == "mixed":
            n = int(0.6 * area)
            self.boxes = (
                rng.uniform(-extent, extent, size=(n, 2)),
                rng.uniform(0.1, 0.4, size=(n, 2)),
                rng.uniform(-0.8, 0.8, size=n),
            )

    def __call__(self, xy):
        value = np.zeros(len(xy))
        if self.blobs is not None:
            centers, sigma, amp = self.blobs
            d2 = (xy * xy).sum(1)[:, None] + (centers * centers).sum(1)[None] - 2.0 * (xy @ centers.T)
            value += np.exp(np.maximum(d2, 0.0) * (-0.5 / sigma**2)) @ amp
        if self.waves is not None:
            kvec, phase, amp = self.waves
            value += (amp * np.sin(xy @ kvec.T + phase)).sum(1)
        if self.boxes is not None:
            centers, half, amp = self.boxes
            rel = np.abs(xy[:, None, :] - centers[None]) - half[None]
            edge = 1.0 / (1.0 + np.exp(np.clip(rel.max(-1) / 0.03, -50, 50)))
            value += (amp * edge).sum(1)
        return 0.5 + 0.5 * np.tanh(0.8 * value)


def _rotation(axis, angle):
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _sample_pose(rng, cfg):
    angle = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    axis = rng.normal(size=3)
    axis[2] += 2.0 * np.sign(axis[2] or 1.0)  # favour in-plane rotation
    t = rng.uniform(-cfg.max_translation, cfg.max_translation, size=3) * np.array([1.0, 1.0, 0.5])
    if cfg.max_rotation_deg == 0:
        return Pose(np.eye(3), t)
    return Pose(_rotation(axis, angle), t)


def _cast_rays(pose_ab, K_b, shape, plane_depth):
    """Plane points (X, Y) and camera-B depth for every pixel of view B."""
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    rays_b = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=1) @ np.linalg.inv(K_b).T
    inv = pose_ab.inverse()
    center = inv.t
    dirs = rays_b @ inv.R.T
    with np.errstate(divide="ignore"):
        lam = (plane_depth - center[2]) / dirs[:, 2]
    points = center + lam[:, None] * dirs
    return points[:, :2], lam.reshape(h, w)


HOLE_INTENSITY = 1.0  # flat, saturated: a depth hole reads like sky or a specular patch


def _sample_hole(rng, K, shape, plane_depth, fraction):
    """Plane-space rectangle covering ``fraction`` of view A, or None."""
    if fraction <= 0:
        return None
    h, w = shape
    area = fraction * h * w
    aspect = rng.uniform(0.5, 2.0)
    rh = int(np.clip(np.round(np.sqrt(area / aspect)), 1, h))
    rw = int(np.clip(np.round(area / rh), 1, w))
    y0 = rng.integers(0, h - rh + 1)
    x0 = rng.integers(0, w - rw + 1)
    # view A is the identity camera looking at a fronto-parallel plane: pixel edges map affinely to (X, Y)
    f, cx, cy = K[0, 0], K[0, 2], K[1, 2]
    lo = (np.array([x0, y0]) - 0.5 - [cx, cy]) * plane_depth / f
    hi = (np.array([x0 + rw, y0 + rh]) - 0.5 - [cx, cy]) * plane_depth / f
    return lo, hi


def _apply_hole(hole, plane_xy, image, depth):
    """Zero depth and flatten intensity wherever a view sees the hole."""
    if hole is None:
        return image, depth
    lo, hi = hole
    inside = np.all((plane_xy >= lo) & (plane_xy < hi), axis=1).reshape(depth.shape)
    return np.where(inside, HOLE_INTENSITY, image), np.where(inside, 0.0, depth)


def generate_pair(cfg):
    """Render one pair; the same config (incl. seed) gives bitwise-identical output."""
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(cfg.image_size)
    K = intrinsics(shape)
    z = cfg.plane_depth
    texture = Texture(rng, cfg.texture, extent=z * 0.75)

    for _ in range(MAX_POSE_RETRIES):
        pose = _sample_pose(rng, cfg)
        plane_b, depth_b = _cast_rays(pose, K, shape, z)
        if np.all(np.isfinite(depth_b)) and depth_b.min() > 0.1 * z:
            break
    else:
        raise ConfigError("could not sample a pose with the plane in front of camera B")

    plane_a, depth_a = _cast_rays(Pose.identity(), K, shape, z)
    hole = _sample_hole(rng, K, shape, z, cfg.invalid_depth_fraction)
    image_a, depth_a = _apply_hole(hole, plane_a, texture(plane_a).reshape(shape), depth_a)
    image_b, depth_b = _apply_hole(hole, plane_b, texture(plane_b).reshape(shape), depth_b)
    H = plane_homography(pose, K, K, z)
    return PairSample(image_a, image_b, depth_a, depth_b, pose, K.copy(), K.copy(), H, seed=cfg.seed)


def pair_at(cfg, index):
    return generate_pair(dataclasses.replace(cfg, seed=cfg.seed + index))


def dataset(cfg, n, start=0):
    """Samples with seeds seed+start .. seed+n-1; pure indexing, so restartable."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    for i in range(start, n):
        yield pair_at(cfg, i)


# -- file formats ---------------------------------------------------------------


def to_uint8(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image):
    """Binary P5, 8-bit. Float images in [0, 1] are quantised."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim != 2:
        raise InputShapeError(f"PGM images are 2-D, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path):
    """Read a binary P5 PGM into float64 values in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise PGMError(f"cannot read {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMError(f"{path}: malformed header") from exc
    if not 0 < maxval < 65536:
        raise PGMError(f"{path}: invalid maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos) if len(raw) - pos >= count * np.dtype(dtype).itemsize else None
    if data is None:
        raise PGMError(f"{path}: raster shorter than {w}x{h}")
    return data.reshape(h, w).astype(np.float64) / maxval


def _fmt(values):
    return " ".join(f"{v:.12g}" for v in np.asarray(values, dtype=float).ravel())


def write_sidecar(path, sample):
    H = sample.homography if sample.homography is not None else np.full((3, 3), np.nan)
    lines = [
        f"size {sample.shape[0]} {sample.shape[1]}",
        f"homography {_fmt(H)}",
        f"pose {_fmt(sample.pose_ab.as_matrix())}",
        f"intrinsics_a {_fmt(sample.K_a)}",
        f"intrinsics_b {_fmt(sample.K_b)}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sidecar(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            key, *vals = line.split()
            out[key] = np.array([float(v) for v in vals])
    return {
        "size": tuple(int(v) for v in out["size"]),
        "homography": out["homography"].reshape(3, 3),
        "pose": out["pose"].reshape(3, 4),
        "intrinsics_a": out["intrinsics_a"].reshape(3, 3),
        "intrinsics_b": out["intrinsics_b"].reshape(3, 3),
    }


def export_sample(sample, directory, stem):
    os.makedirs(directory, exist_ok=True)
    paths = {
        "image_a": os.path.join(directory, f"{stem}_a.pgm"),
        "image_b": os.path.join(directory, f"{stem}_b.pgm"),
        "header": os.path.join(directory, f"{stem}.txt"),
    }
    write_pgm(paths["image_a"], sample.image_a)
    write_pgm(paths["image_b"], sample.image_b)
    write_sidecar(paths["header"], sample)
    return paths
