"""Image datasets, the BITSDS1 container, a synthetic factor dataset and view augmentation."""

from __future__ import annotations

import colorsys
import itertools
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"BITSDS1\0"
_HEADER = struct.Struct("<8sIIIIBBH")

SHAPES = ("circle", "square", "triangle", "cross")
FACTOR_NAMES = ("shape", "color", "background", "context")


class DatasetError(Exception):
    code = 10


class MagicMismatchError(DatasetError):
    code = 11


class TruncatedFileError(DatasetError):
    code = 12


class InconsistentLengthError(DatasetError):
    code = 13


@dataclass
class ImageDataset:
    pixels: np.ndarray  # (n, H, W, C) uint8
    labels: np.ndarray | None = None  # (n,) uint16
    factors: np.ndarray | None = None  # (n, F) uint16
    factor_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 4:
            raise InconsistentLengthError(f"pixels must be a uint8 (n, H, W, C) array, got {self.pixels.dtype} {self.pixels.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(np.uint16)
            if self.labels.shape != (self.n,):
                raise InconsistentLengthError(f"{len(self.labels)} labels for {self.n} samples")
        if self.factors is not None:
            self.factors = np.asarray(self.factors).astype(np.uint16)
            if self.factors.ndim != 2 or self.factors.shape[0] != self.n:
                raise InconsistentLengthError(f"factors of shape {self.factors.shape} for {self.n} samples")

    @property
    def n(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(
            self.pixels[idx],
            None if self.labels is None else self.labels[idx],
            None if self.factors is None else self.factors[idx],
            self.factor_names,
        )

    def channel_stats(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        """Per-channel mean and std of pixels scaled to [0, 1]."""
        v = self.pixels.reshape(-1, self.pixels.shape[-1]).astype(np.float64) / 255.0
        std = v.std(axis=0)
        std[std == 0] = 1.0
        return tuple(float(m) for m in v.mean(axis=0)), tuple(float(s) for s in std)


def write_dataset(ds: ImageDataset, path) -> None:
    n, h, w, c = ds.pixels.shape
    fdim = 0 if ds.factors is None else ds.factors.shape[1]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, n, h, w, c, ds.labels is not None, ds.factors is not None, fdim))
        f.write(np.ascontiguousarray(ds.pixels).tobytes())
        if ds.labels is not None:
            f.write(ds.labels.astype("<u2").tobytes())
        if ds.factors is not None:
            f.write(ds.factors.astype("<u2").tobytes())
    os.replace(tmp, path)


def read_dataset(path) -> ImageDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise MagicMismatchError(f"{path}: not a BITSDS1 file")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, n, h, w, c, has_labels, has_factors, fdim = _HEADER.unpack_from(raw)
    npix = n * h * w * c
    expected = _HEADER.size + npix + (2 * n if has_labels else 0) + (2 * n * fdim if has_factors else 0)
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise InconsistentLengthError(f"{path}: {len(raw) - expected} unexpected trailing bytes")
    off = _HEADER.size
    pixels = np.frombuffer(raw, np.uint8, npix, off).reshape(n, h, w, c).copy()
    off += npix
    labels = factors = None
    if has_labels:
        labels = np.frombuffer(raw, "<u2", n, off).astype(np.uint16)
        off += 2 * n
    if has_factors:
        factors = np.frombuffer(raw, "<u2", n * fdim, off).reshape(n, fdim).astype(np.uint16)
    return ImageDataset(pixels, labels, factors)


# --- synthetic factor dataset -----------------------------------------------


@dataclass
class SyntheticFactorSpec:
    n_shapes: int = 4
    n_colors: int = 8
    n_backgrounds: int = 4
    n_context: int = 2
    image_size: int = 32
    samples_per_combination: int = 10

    def __post_init__(self):
        if not (1 <= self.n_shapes <= len(SHAPES) and 1 <= self.n_backgrounds <= 4 and self.n_context in (1, 2)):
            raise ValueError("factor cardinalities out of range")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")

    @property
    def n_samples(self) -> int:
        return self.n_shapes * self.n_colors * self.n_backgrounds * self.n_context * self.samples_per_combination


def _hue_rgb(k: int, n: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(k / n, 0.9, 0.95)) * 255


def _background(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(40, 70)
    phase = rng.uniform(0, 2 * math.pi)
    if kind == 0:
        tex = np.zeros((size, size))
    elif kind == 1:
        tex = 18 * np.sign(np.sin(2 * math.pi * yy / 6 + phase))
    elif kind == 2:
        off = int(rng.integers(0, 8))
        tex = 18 * (((yy + off) // 4 + (xx + off) // 4) % 2 * 2 - 1)
    else:
        tex = 18 * np.sin(2 * math.pi * (xx + yy) / 9 + phase)
    tint = rng.uniform(0.8, 1.2, size=3)
    return np.clip((base + tex)[..., None] * tint, 0, 255)


def _shape_mask(kind: int, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    name = SHAPES[kind]
    if name == "circle":
        return dy * dy + dx * dx <= r * r
    if name == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if name == "triangle":
        # apex up, base at cy + 0.8r
        return (dy <= 0.8 * r) & (np.abs(dx) <= (dy + r) * 0.6)
    arm = 0.35 * r
    return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))


def _context_glyph(size: int, rng: np.random.Generator) -> np.ndarray:
    """A white ring in a random corner, drawn independently of the class."""
    margin = size * 0.16
    cy = margin if rng.random() < 0.5 else size - margin
    cx = margin if rng.random() < 0.5 else size - margin
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    r = size * 0.11
    return (d2 <= r * r) & (d2 >= (0.45 * r) ** 2)


def generate_synthetic(spec: SyntheticFactorSpec | None = None, seed: int = 0) -> ImageDataset:
    """Render every factor combination ``samples_per_combination`` times.

    Labels are ``shape * n_colors + color``; background and the context glyph
    vary independently of the label.
    """
    spec = spec or SyntheticFactorSpec()
    s = spec.image_size
    combos = list(
        itertools.product(
            range(spec.n_shapes), range(spec.n_colors), range(spec.n_backgrounds), range(spec.n_context)
        )
    )
    n = spec.n_samples
    pixels = np.empty((n, s, s, 3), dtype=np.uint8)
    factors = np.empty((n, 4), dtype=np.uint16)
    i = 0
    for ci, (shape, color, bg, ctx) in enumerate(combos):
        for rep in range(spec.samples_per_combination):
            rng = np.random.default_rng([seed, ci, rep])
            img = _background(bg, s, rng)
            r = s * rng.uniform(0.2, 0.3)
            cy = s / 2 + rng.uniform(-0.1, 0.1) * s
            cx = s / 2 + rng.uniform(-0.1, 0.1) * s
            img[_shape_mask(shape, s, cy, cx, r)] = _hue_rgb(color, spec.n_colors) * rng.uniform(0.85, 1.0)
            if spec.n_context == 2 and ctx == 1:
                img[_context_glyph(s, rng)] = 250.0
            pixels[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            factors[i] = (shape, color, bg, ctx)
            i += 1
    labels = factors[:, 0].astype(np.int64) * spec.n_colors + factors[:, 1]
    return ImageDataset(pixels, labels.astype(np.uint16), factors, FACTOR_NAMES)


# --- augmentation -----------------------------------------------------------


@dataclass
class AugmentPolicy:
    global_crop: tuple[float, float] = (0.4, 1.0)
    local_crop: tuple[float, float] = (0.1, 0.4)
    aspect_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    noise_std: float = 0.02
    blur_prob: float = 0.5
    n_global: int = 2
    n_local: int = 0
    local_size: int | None = None  # None: half the global resolution

    def __post_init__(self):
        for lo, hi in (self.global_crop, self.local_crop):
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"crop scale ({lo}, {hi}) must satisfy 0 < min <= max <= 1")
        if self.n_global < 1:
            raise ValueError("n_global must be >= 1")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(global_crop=(1.0, 1.0), flip_prob=0.0, brightness=0.0, contrast=0.0, noise_std=0.0, blur_prob=0.0)


@dataclass
class ViewSet:
    global_views: list[np.ndarray]
    local_views: list[np.ndarray] = field(default_factory=list)
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)  # (y0, x0, h, w)

    @property
    def all_views(self) -> list[np.ndarray]:
        return self.global_views + self.local_views


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator, a hash of (seed, epoch, sample index)."""
    return np.random.default_rng([seed, epoch, index])


def _crop_box(h: int, w: int, scale, ratio, rng) -> tuple[float, float, float, float]:
    area = h * w
    s = rng.uniform(*scale)
    if scale[0] < 1.0:
        log_r = (math.log(ratio[0]), math.log(ratio[1]))
        for _ in range(10):
            r = math.exp(rng.uniform(*log_r))
            cw, ch = math.sqrt(s * area * r), math.sqrt(s * area / r)
            if cw <= w and ch <= h:
                return rng.uniform(0, h - ch), rng.uniform(0, w - cw), ch, cw
    side = math.sqrt(s * area)
    ch, cw = min(side, h), min(side, w)
    return rng.uniform(0, h - ch), rng.uniform(0, w - cw), ch, cw


def crop_resize(img: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of the box (y0, x0, h, w) onto an out_h x out_w grid."""
    y0, x0, ch, cw = box
    h, w = img.shape[:2]
    ys = np.clip(y0 + (np.arange(out_h) + 0.5) * (ch / out_h) - 0.5, 0, h - 1)
    xs = np.clip(x0 + (np.arange(out_w) + 0.5) * (cw / out_w) - 0.5, 0, w - 1)
    yi = np.floor(ys).astype(int)
    xi = np.floor(xs).astype(int)
    wy = (ys - yi)[:, None, None].astype(np.float32)
    wx = (xs - xi)[None, :, None].astype(np.float32)
    yj = np.minimum(yi + 1, h - 1)
    xj = np.minimum(xi + 1, w - 1)
    src = img.astype(np.float32)
    top = src[yi][:, xi] * (1 - wx) + src[yi][:, xj] * wx
    bot = src[yj][:, xi] * (1 - wx) + src[yj][:, xj] * wx
    return top * (1 - wy) + bot * wy


def _box_blur(v: np.ndarray) -> np.ndarray:
    p = np.pad(v, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = v.shape[:2]
    acc = np.zeros_like(v)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy : dy + h, dx : dx + w]
    return acc / np.float32(9.0)


def _augment(img, scale, size, policy: AugmentPolicy, rng):
    h, w = img.shape[:2]
    box = _crop_box(h, w, scale, policy.aspect_ratio, rng)
    v = crop_resize(img, box, size[0], size[1])
    if rng.random() < policy.flip_prob:
        v = v[:, ::-1]
    if policy.brightness > 0:
        v = v * np.float32(1 + rng.uniform(-policy.brightness, policy.brightness))
    if policy.contrast > 0:
        m = v.mean()
        v = (v - m) * np.float32(1 + rng.uniform(-policy.contrast, policy.contrast)) + m
    if policy.noise_std > 0:
        v = v + rng.normal(0, policy.noise_std * 255, v.shape).astype(np.float32)
    if policy.blur_prob > 0 and rng.random() < policy.blur_prob:
        v = _box_blur(v)
    return np.clip(v, 0, 255).astype(np.float32), box


def make_views(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> ViewSet:
    """Global views at full resolution, local views at ``policy.local_size``."""
    h, w = image.shape[:2]
    ls = policy.local_size or max(1, h // 2)
    local_size = (ls, ls * w // h) if policy.local_size is None else (ls, ls)
    out = ViewSet([], [], [])
    for _ in range(policy.n_global):
        v, box = _augment(image, policy.global_crop, (h, w), policy, rng)
        out.global_views.append(v)
        out.boxes.append(box)
    for _ in range(policy.n_local):
        v, box = _augment(image, policy.local_crop, local_size, policy, rng)
        out.local_views.append(v)
        out.boxes.append(box)
    return out


def batch_views(
    ds: ImageDataset, indices, policy: AugmentPolicy, seed: int, epoch: int, workers: int = 0
) -> list[np.ndarray]:
    """Stacked NHWC float views for a batch, one array per view slot (globals first)."""

    def one(i):
        return make_views(ds.pixels[i], policy, sample_rng(seed, epoch, int(i))).all_views

    if workers > 0:
        with ThreadPoolExecutor(workers) as pool:
            per_sample = list(pool.map(one, indices))
    else:
        per_sample = [one(i) for i in indices]
    return [np.stack([views[k] for views in per_sample]) for k in range(len(per_sample[0]))]
