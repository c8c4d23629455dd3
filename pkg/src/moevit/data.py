"""CIFAR binary ingestion, bilinear resizing, augmentation, synthetic fixtures.

CIFAR binaries are flat record streams: 1 label byte (cifar10) or 2 label
bytes (cifar100: coarse then fine) followed by 3072 channel-major pixel bytes.
Images are resized 32→36 with bilinear interpolation (half-pixel centers, the
align_corners=False convention) and normalized to [−1, 1] via (x/255 − 0.5)/0.5.

Training augmentation is random resized crop (area scale from the recipe,
aspect ratio in [3/4, 4/3], up to 10 attempts then a center-crop fallback)
plus horizontal flip. The synthetic generator produces class-separable
Gaussian-blob images so micro-models can overfit in tests.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

_RECORD_PIXELS = 3072  # 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) uint8
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    source: str = "synthetic"
    coarse_labels: np.ndarray | None = None

    def __len__(self):
        return self.images.shape[0]


@dataclass
class AugmentConfig:
    hflip_p: float = 0.5
    crop_scale: tuple = (0.6, 1.0)
    crop_ratio: tuple = (3.0 / 4.0, 4.0 / 3.0)
    out_size: int = 36

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"crop scale range must satisfy 0 <= lo <= hi <= 1, got {self.crop_scale}")


# -- CIFAR binary format ------------------------------------------------------

def _label_bytes(variant: str) -> int:
    if variant == "cifar10":
        return 1
    if variant == "cifar100":
        return 2
    raise ConfigError(f"unknown CIFAR variant {variant!r}")


def load_cifar(path: str, variant: str = "cifar100", split: str = "train") -> Dataset:
    nl = _label_bytes(variant)
    record = nl + _RECORD_PIXELS
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record != 0:
        raise DataError(f"{path}: size {raw.size} is not a multiple of the {record}-byte record")
    rows = raw.reshape(-1, record)
    images = rows[:, nl:].reshape(-1, 3, 32, 32)
    fine = rows[:, nl - 1].astype(np.int64)
    limit = 10 if variant == "cifar10" else 100
    if fine.max(initial=0) >= limit:
        raise DataError(f"{path}: label {fine.max()} out of range for {variant}")
    coarse = rows[:, 0].astype(np.int64) if nl == 2 else None
    return Dataset(images=images, labels=fine, split=split, source=variant, coarse_labels=coarse)


def save_cifar(path: str, ds: Dataset) -> None:
    """Serialize back to the binary layout (byte-exact round trip with load_cifar)."""
    nl = _label_bytes(ds.source)
    n = len(ds)
    rows = np.empty((n, nl + _RECORD_PIXELS), dtype=np.uint8)
    if nl == 2:
        coarse = ds.coarse_labels if ds.coarse_labels is not None else np.zeros(n, dtype=np.int64)
        rows[:, 0] = coarse.astype(np.uint8)
    rows[:, nl - 1] = ds.labels.astype(np.uint8)
    rows[:, nl:] = ds.images.reshape(n, _RECORD_PIXELS)
    rows.tofile(path)


# -- resizing -----------------------------------------------------------------

def _axis_weights(in_size: int, out_size: int):
    # Half-pixel-center sampling: src = (dst + 0.5) * in/out - 0.5, clamped.
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    w_hi = src - lo
    return lo, hi, w_hi


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Bilinear resize over the trailing two axes; returns float32."""
    out_w = out_w if out_w is not None else out_h
    img = np.asarray(image, dtype=np.float32)
    in_h, in_w = img.shape[-2], img.shape[-1]
    ylo, yhi, wy = _axis_weights(in_h, out_h)
    xlo, xhi, wx = _axis_weights(in_w, out_w)
    rows_lo = img[..., ylo, :]
    rows = rows_lo + (img[..., yhi, :] - rows_lo) * wy[:, None].astype(np.float32)
    cols_lo = rows[..., :, xlo]
    return (cols_lo + (rows[..., :, xhi] - cols_lo) * wx.astype(np.float32)).astype(np.float32)


def normalize(image: np.ndarray) -> np.ndarray:
    """Byte values -> float32 in [−1, 1]: (x/255 − 0.5)/0.5."""
    return ((np.asarray(image, dtype=np.float32) / 255.0) - 0.5) / 0.5


# -- augmentation -------------------------------------------------------------

def _sample_crop(h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator):
    area = h * w
    log_lo, log_hi = np.log(cfg.crop_ratio[0]), np.log(cfg.crop_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1])
        aspect = np.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)  # fallback: center crop
    return (h - side) // 2, (w - side) // 2, side, side


def augment(image: np.ndarray, cfg: AugmentConfig, train: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    """One image (3, H, W) uint8 -> normalized float32 (3, out, out)."""
    img = np.asarray(image)
    if train:
        if rng is None:
            raise ConfigError("training-mode augmentation needs an RNG")
        top, left, ch, cw = _sample_crop(img.shape[-2], img.shape[-1], cfg, rng)
        img = img[:, top : top + ch, left : left + cw]
        img = resize_bilinear(img, cfg.out_size)
        if rng.random() < cfg.hflip_p:
            img = img[:, :, ::-1]
        return normalize(img)
    if img.shape[-2:] != (cfg.out_size, cfg.out_size):
        img = resize_bilinear(img, cfg.out_size)
    return normalize(img)


def augment_batch(images: np.ndarray, cfg: AugmentConfig, train: bool, rng=None) -> np.ndarray:
    if train:
        return np.stack([augment(im, cfg, True, rng) for im in images])
    if images.shape[-2:] != (cfg.out_size, cfg.out_size):
        images = resize_bilinear(images, cfg.out_size)
    return normalize(images)


# -- synthetic fixtures -------------------------------------------------------

def make_synthetic(
    num_images: int,
    num_classes: int,
    rng: np.random.Generator,
    image_size: int = 32,
    noise: float = 8.0,
) -> Dataset:
    """Class-separable blobs: each class owns a fixed center/color; tiny models overfit."""
    class_rng = np.random.default_rng(1234)  # class templates independent of sampling rng
    centers = class_rng.uniform(0.2, 0.8, (num_classes, 2)) * image_size
    colors = class_rng.uniform(80, 255, (num_classes, 3))
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    images = np.empty((num_images, 3, image_size, image_size), dtype=np.uint8)
    labels = np.arange(num_images) % num_classes
    for i, c in enumerate(labels):
        cy, cx = centers[c]
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * (image_size / 6.0) ** 2)))
        img = colors[c][:, None, None] * blob[None]
        img = img + rng.normal(0.0, noise, img.shape)
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return Dataset(images=images, labels=labels.astype(np.int64), source="synthetic")


def make_synthetic_cifar_file(path: str, num_images: int, variant: str, rng: np.random.Generator) -> None:
    """Write a synthetic dataset in the CIFAR binary layout (for format-path tests)."""
    classes = 10 if variant == "cifar10" else 100
    ds = make_synthetic(num_images, classes, rng)
    ds.source = variant
    if variant == "cifar100":
        ds.coarse_labels = ds.labels % 20
    save_cifar(path, ds)


# -- batching -----------------------------------------------------------------

def iterate_batches(
    ds: Dataset,
    batch_size: int,
    cfg: AugmentConfig,
    train: bool,
    order_rng: np.random.Generator | None = None,
    augment_rng: np.random.Generator | None = None,
    drop_last: bool = False,
):
    """Yield (normalized float32 batch, labels); order is seeded-deterministic."""
    n = len(ds)
    order = order_rng.permutation(n) if (train and order_rng is not None) else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and idx.size < batch_size:
            return
        x = augment_batch(ds.images[idx], cfg, train, augment_rng)
        yield x, ds.labels[idx]
