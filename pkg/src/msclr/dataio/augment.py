"""Shear / crop / flip / noise / blur augmentation of padded pose sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import gaussian_filter1d

from ..conventions import PoseSequence, SkeletonConvention
from .streams import interpolate_frames

LATERAL_AXIS = 0


@dataclass(frozen=True)
class AugmentationConfig:
    shear_amplitude: float = 0.5
    crop_ratio_min: float = 0.5
    crop_ratio_max: float = 1.0
    flip_probability: float = 0.5
    noise_sigma: float = 0.05
    blur_sigma: float = 1.0
    shear: bool = True
    crop: bool = True
    flip: bool = True
    noise: bool = True
    blur: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        values = [self.shear_amplitude, self.crop_ratio_min, self.crop_ratio_max,
                  self.flip_probability, self.noise_sigma, self.blur_sigma]
        if not all(math.isfinite(x) for x in values):
            raise ValueError("augmentation parameters must be finite")
        if self.shear_amplitude < 0:
            raise ValueError("shear_amplitude must be non-negative")
        if not 0 < self.crop_ratio_min <= self.crop_ratio_max <= 1:
            raise ValueError("crop ratio range must satisfy 0 < min <= max <= 1")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be non-negative")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentationConfig":
        flags = dict(shear=False, crop=False, flip=False, noise=False, blur=False)
        flags.update(overrides)
        return cls(**flags)

    def to_dict(self) -> dict:
        return asdict(self)


def active_persons(data: np.ndarray) -> np.ndarray:
    """Boolean per-person vector: True where the person has any nonzero entry."""
    return np.any(data != 0, axis=(0, 1, 2))


def shear(data: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    c = data.shape[0]
    m = np.eye(c) + rng.uniform(-amplitude, amplitude, size=(c, c)) * (1 - np.eye(c))
    return np.einsum("ij,jvtp->ivtp", m, data).astype(data.dtype)


def temporal_crop(data: np.ndarray, ratio_range: tuple[float, float],
                  rng: np.random.Generator) -> np.ndarray:
    t = data.shape[2]
    ratio = rng.uniform(*ratio_range)
    length = min(t, max(1, int(round(ratio * t))))
    start = int(rng.integers(0, t - length + 1))
    return interpolate_frames(data[:, :, start:start + length], t)


def flip(data: np.ndarray, convention: SkeletonConvention) -> np.ndarray:
    out = data.copy()
    v = convention.joint_count
    out[:, :v] = data[:, list(convention.swap_map)]
    out[LATERAL_AXIS, :v] *= -1
    return out


def gaussian_noise(data: np.ndarray, v_s: int, sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    out = data.copy()
    persons = np.flatnonzero(active_persons(data))
    if persons.size:
        c, _, t, _ = data.shape
        noise = rng.normal(0.0, sigma, size=(c, v_s, t, persons.size))
        out[:, :v_s, :, persons] += noise.astype(data.dtype)
    return out


def blur(data: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter1d(data, sigma, axis=2, mode="nearest").astype(data.dtype)


def augment(seq: PoseSequence, convention: SkeletonConvention, config: AugmentationConfig,
            rng: np.random.Generator) -> PoseSequence:
    """Apply the enabled augmentations in order: shear, crop, flip, noise, blur.

    Padded joints stay exactly zero. Absent (all-zero) persons are not given
    noise, so they stay zero as well.
    """
    v_s = convention.joint_count
    if seq.joint_count != v_s:
        raise ValueError(f"sequence has {seq.joint_count} valid joints, {convention.name} has {v_s}")
    data = seq.data
    if config.shear and config.shear_amplitude > 0:
        data = shear(data, config.shear_amplitude, rng)
    if config.crop:
        data = temporal_crop(data, (config.crop_ratio_min, config.crop_ratio_max), rng)
    if config.flip and rng.random() < config.flip_probability:
        data = flip(data, convention)
    if config.noise and config.noise_sigma > 0:
        data = gaussian_noise(data, v_s, config.noise_sigma, rng)
    if config.blur and config.blur_sigma > 0:
        data = blur(data, config.blur_sigma)
    data = data.copy() if data is seq.data else data
    data[:, v_s:] = 0
    return seq.replace(data)
