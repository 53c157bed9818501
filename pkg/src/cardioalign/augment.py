"""Stochastic ECG, image and tabular augmentations.

Every function takes an explicit ``numpy.random.Generator``; identical input,
config and generator state give identical output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torchvision.transforms.v2 import functional as TF

from .cohort import CmrPhaseStack, EcgRecord


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class EcgAugmentConfig:
    crop_ratio: float = 0.5
    ft_phase_noise: float = 0.1
    gaussian_sigma: float = 0.25
    rescale_factor: float = 0.5
    crop: bool = True
    ft_surrogate: bool = True
    gaussian: bool = True
    rescale: bool = True

    def __post_init__(self):
        if not 0.0 < self.crop_ratio <= 1.0:
            raise ValueError(f"crop_ratio must lie in (0, 1], got {self.crop_ratio}")
        for name in ("ft_phase_noise", "gaussian_sigma", "rescale_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class ImageAugmentConfig:
    hflip_prob: float = 0.5
    max_rotation_deg: float = 45.0
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if not 0.0 <= self.max_rotation_deg <= 180.0:
            raise ValueError("max_rotation_deg must lie in [0, 180]")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ValueError("jitter strengths must be >= 0")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")


# ---------------------------------------------------------------------------
# ECG
# ---------------------------------------------------------------------------


def ft_surrogate(x: np.ndarray, phase_noise: float, rng: np.random.Generator) -> np.ndarray:
    """Randomise Fourier phases of a real 1-D signal, keeping its amplitude spectrum.

    DC (and, for even lengths, the Nyquist bin) must stay real, so only the
    remaining bins are rotated; the real FFT keeps the spectrum Hermitian.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("ft_surrogate input must be finite")
    n = x.shape[-1]
    spec = np.fft.rfft(x)
    last = spec.shape[-1] - 1 if n % 2 == 0 else spec.shape[-1]
    shift = np.zeros(spec.shape[-1])
    shift[1:last] = rng.uniform(0.0, 1.0, size=last - 1) * phase_noise * 2.0 * np.pi
    return np.fft.irfft(spec * np.exp(1j * shift), n=n)


def _crop_resize(x: np.ndarray, ratio: float, rng) -> np.ndarray:
    C, T = x.shape
    length = round_half_up(T * ratio)
    if length < 1:
        raise ValueError(f"crop of length {T}*{ratio} is empty")
    if length == T:
        return x
    start = int(rng.integers(0, T - length + 1))
    seg = x[:, start:start + length]
    if length == 1:
        return np.repeat(seg, T, axis=1)
    src = np.linspace(0.0, length - 1, T)
    return np.stack([np.interp(src, np.arange(length), lead) for lead in seg])


def augment_ecg_array(x: np.ndarray, cfg: EcgAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Crop+resize, FT surrogate, additive noise, amplitude rescale on a [C, T] array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError(f"ECG augmentation needs [C, T>=2], got shape {x.shape}")
    if cfg.crop and cfg.crop_ratio < 1.0:
        x = _crop_resize(x, cfg.crop_ratio, rng)
    if cfg.ft_surrogate and cfg.ft_phase_noise > 0:
        x = np.stack([ft_surrogate(lead, cfg.ft_phase_noise, rng) for lead in x])
    if cfg.gaussian and cfg.gaussian_sigma > 0:
        std = x.std(axis=1, keepdims=True)
        x = x + rng.standard_normal(x.shape) * cfg.gaussian_sigma * std
    if cfg.rescale and cfg.rescale_factor > 0:
        half = cfg.rescale_factor / 2
        x = x * rng.uniform(1.0 - half, 1.0 + half)
    return x


def ecg_augment(x: EcgRecord, cfg: EcgAugmentConfig, rng: np.random.Generator) -> EcgRecord:
    out = augment_ecg_array(x.samples, cfg, rng)
    return EcgRecord(x.subject_id, out.astype(np.float32), x.sampling_rate)


# ---------------------------------------------------------------------------
# Image
# ---------------------------------------------------------------------------


def _crop_box(H, W, scale, ratio, rng) -> tuple[int, int, int, int]:
    area = H * W
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_r))
        w = round_half_up(math.sqrt(target * aspect))
        h = round_half_up(math.sqrt(target / aspect))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    side = min(H, W)
    return (H - side) // 2, (W - side) // 2, side, side


def augment_image_array(img: np.ndarray, cfg: ImageAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Flip, rotate, jitter and resized-crop a [3, H, W] stack; one geometry for all phases."""
    t = torch.from_numpy(np.asarray(img, dtype=np.float32).copy())
    _, H, W = t.shape
    if rng.random() < cfg.hflip_prob:
        t = TF.horizontal_flip(t)
    if cfg.max_rotation_deg > 0:
        angle = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
        t = TF.rotate(t, angle, interpolation=TF.InterpolationMode.BILINEAR, fill=0.0)
    jitters = [(cfg.brightness, TF.adjust_brightness), (cfg.contrast, TF.adjust_contrast),
               (cfg.saturation, TF.adjust_saturation)]
    for strength, fn in jitters:
        if strength > 0:
            t = fn(t, float(rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength)))
    top, left, h, w = _crop_box(H, W, cfg.crop_scale, cfg.crop_ratio, rng)
    if (h, w) != (H, W):
        t = TF.resized_crop(t, top, left, h, w, [H, W], antialias=True)
    return t.clamp_(0.0, 1.0).numpy()


def image_augment(img: CmrPhaseStack, cfg: ImageAugmentConfig, rng: np.random.Generator) -> CmrPhaseStack:
    return CmrPhaseStack(img.subject_id, augment_image_array(img.phases, cfg, rng))


# ---------------------------------------------------------------------------
# Tabular
# ---------------------------------------------------------------------------


def empirical_pool(table: np.ndarray) -> list[np.ndarray]:
    """Per-feature observed values (with multiplicity) of an encoded [n, F] table."""
    table = np.asarray(table)
    return [table[:, j].copy() for j in range(table.shape[1])]


def tabular_corrupt(batch: np.ndarray, corruption_rate: float, empirical_pool, rng) -> np.ndarray:
    """Replace round(rate * F) random features per row with draws from their marginals."""
    if not 0.0 <= corruption_rate <= 1.0:
        raise ValueError(f"corruption rate must lie in [0, 1], got {corruption_rate}")
    batch = np.array(batch, copy=True)
    B, F = batch.shape
    if len(empirical_pool) != F or any(len(p) == 0 for p in empirical_pool):
        raise ValueError("need a non-empty value pool for every feature")
    k = round_half_up(corruption_rate * F)
    if k == 0:
        return batch
    for i in range(B):
        cols = rng.choice(F, size=k, replace=False)
        for j in cols:
            pool = empirical_pool[j]
            batch[i, j] = pool[rng.integers(len(pool))]
    return batch
