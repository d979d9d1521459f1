"""Training-time augmentation: random crop, spectral band leakage, additive
noise, per-chip normalization.

Each record owns an independent PRNG stream keyed by (seed, stream index), so
batches are reproducible regardless of worker count or assembly order.  The
image path is min-max -> crop -> band_leak -> add_noise: both perturbations
operate on, and preserve, the normalized [0,1] domain.  Normalizing over the
whole chip before cropping keeps every crop on the same radiometric footing as
inference windows, which are scaled by whole-raster band ranges; a per-crop
stretch would rescale nearly-uniform crops (open water, cloud deck) beyond
recognition.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .labels import LabelMask
from .raster import Raster, Window, crop

CROP_SIZE = 512


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation knobs; sigma values are drawn uniformly from the ranges."""

    crop: int = CROP_SIZE
    band_sigma_range: tuple[float, float] = (0.0, 0.5)
    noise_sigma_range: tuple[float, float] = (0.0, 0.02)
    seed: int = 0

    def __post_init__(self):
        if self.crop < 1:
            raise ArgumentError(f"crop must be positive, got {self.crop}")
        for name, (lo, hi) in (("band_sigma_range", self.band_sigma_range),
                               ("noise_sigma_range", self.noise_sigma_range)):
            if lo < 0 or hi < lo:
                raise ArgumentError(f"{name} must satisfy 0 <= lo <= hi, got ({lo}, {hi})")

    @classmethod
    def from_text(cls, text: str) -> "AugmentConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        kwargs = {}
        if "crop" in kv:
            kwargs["crop"] = int(kv["crop"])
        if "seed" in kv:
            kwargs["seed"] = int(kv["seed"])
        for name in ("band_sigma_range", "noise_sigma_range"):
            if name in kv:
                lo, hi = (float(p) for p in kv[name].split(","))
                kwargs[name] = (lo, hi)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "AugmentConfig":
        return cls.from_text(Path(path).read_text())


def record_rng(seed: int, index: int) -> np.random.Generator:
    """The PRNG stream owned by one (record, epoch) draw."""
    return np.random.default_rng((seed, index))


def _draw_crop(rng: np.random.Generator, h: int, w: int, size: int) -> tuple[int, int]:
    if size > h or size > w:
        raise ArgumentError(f"crop {size} exceeds chip dims {h}x{w}")
    dy = int(rng.integers(0, h - size + 1))
    dx = int(rng.integers(0, w - size + 1))
    return dy, dx


def random_crop(c, size: int = CROP_SIZE, rng: np.random.Generator | None = None):
    """Crop one window out of a chip record, image and label in lockstep."""
    from .chips import ChipRecord

    rng = rng or np.random.default_rng()
    dy, dx = _draw_crop(rng, c.image.height, c.image.width, size)
    win = Window(dx, dy, size, size)
    image = crop(c.image, win)
    label = LabelMask(c.label.values[dy:dy + size, dx:dx + size].copy(),
                      c.label.geo.shifted(dx, dy), dict(c.label.provenance))
    parent = c.window
    return ChipRecord(image, label, c.source_id,
                      Window(parent.x0 + dx, parent.y0 + dy, size, size))


def minmax_image(img: np.ndarray) -> np.ndarray:
    """Per-band (v-min)/(max-min) into [0,1]; constant bands map to zeros."""
    img = np.asarray(img, dtype=np.float32)
    out = np.zeros_like(img)
    for b in range(img.shape[0]):
        lo = float(img[b].min())
        hi = float(img[b].max())
        if hi > lo:
            out[b] = (img[b] - lo) / (hi - lo)
    return out


def leak_matrix(n_bands: int, sigma_b: float) -> np.ndarray:
    """Row-stochastic Gaussian mixing matrix over band indices."""
    if sigma_b < 1e-9 or n_bands == 1:
        return np.eye(n_bands, dtype=np.float32)
    idx = np.arange(n_bands, dtype=np.float64)
    m = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / sigma_b) ** 2)
    return (m / m.sum(axis=1, keepdims=True)).astype(np.float32)


def band_leak(img: np.ndarray, sigma_b: float) -> np.ndarray:
    """Mix normalized bands with Gaussian cross-talk of width sigma_b."""
    img = np.asarray(img, dtype=np.float32)
    m = leak_matrix(img.shape[0], sigma_b)
    return np.tensordot(m, img, axes=([1], [0]))


def add_noise(img: np.ndarray, sigma_n: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise, clamped back into [0,1]."""
    img = np.asarray(img, dtype=np.float32)
    if sigma_n == 0.0:
        return img.copy()
    noisy = img + rng.normal(0.0, sigma_n, size=img.shape).astype(np.float32)
    return np.clip(noisy, 0.0, 1.0)


def augment_record(image: np.ndarray, label_values: np.ndarray,
                   cfg: AugmentConfig, stream_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Full deterministic augmentation of one chip's arrays.

    The chip is normalized as a whole before the crop is cut, so crops keep
    their radiometric position within the chip.  Returns (image
    (bands, crop, crop) float32 in [0,1], target (crop, crop) float32 =
    label/255).
    """
    rng = record_rng(cfg.seed, stream_index)
    _, h, w = image.shape
    dy, dx = _draw_crop(rng, h, w, cfg.crop)
    img = minmax_image(image)[:, dy:dy + cfg.crop, dx:dx + cfg.crop]
    lbl = label_values[dy:dy + cfg.crop, dx:dx + cfg.crop]
    sigma_b = float(rng.uniform(*cfg.band_sigma_range))
    img = band_leak(img, sigma_b)
    sigma_n = float(rng.uniform(*cfg.noise_sigma_range))
    img = add_noise(img, sigma_n, rng)
    target = lbl.astype(np.float32) / 255.0
    return img, target


def augment_batch(records, cfg: AugmentConfig,
                  indices=None) -> tuple[np.ndarray, np.ndarray]:
    """Assemble an augmented batch from chip records.

    ``indices`` are the PRNG stream ids, one per record (defaults to
    0..len-1); passing different ids across epochs yields fresh crops while
    staying reproducible.  Returns stacked (images, targets) float32 arrays
    of shapes (B, bands, crop, crop) and (B, crop, crop).
    """
    records = list(records)
    if not records:
        raise ArgumentError("empty batch")
    if indices is None:
        indices = range(len(records))
    images, targets = [], []
    for rec, idx in zip(records, indices):
        img, tgt = augment_record(rec.image.data, rec.label.values, cfg, idx)
        images.append(img)
        targets.append(tgt)
    return np.stack(images), np.stack(targets)
