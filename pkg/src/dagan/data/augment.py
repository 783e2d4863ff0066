"""Standard augmentation: Gaussian noise, integer shifts and quarter-turn rotations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOISE_SIGMA = 0.05
MAX_SHIFT = 2


@dataclass(frozen=True)
class AugmentParams:
    noise: bool
    shift: tuple[int, int] | None
    rotation_k: int


def draw_augment_params(rng: np.random.Generator, p_noise: float = 0.5, p_shift: float = 0.5,
                        max_shift: int = MAX_SHIFT, rotate: bool = True) -> AugmentParams:
    noise = bool(rng.random() < p_noise)
    shift = None
    if rng.random() < p_shift:
        shift = (int(rng.integers(-max_shift, max_shift + 1)), int(rng.integers(-max_shift, max_shift + 1)))
    k = int(rng.integers(0, 4))
    return AugmentParams(noise, shift, k if rotate else 0)


def shift_image(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate ``[H, W, C]`` by whole pixels, filling vacated pixels with zeros."""
    h, w = image.shape[:2]
    out = np.zeros_like(image)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = image[ys, xs]
    return out


def apply_augment(image: np.ndarray, params: AugmentParams, rng: np.random.Generator,
                  sigma: float = NOISE_SIGMA) -> np.ndarray:
    """Noise, then shift, then rotation, on one ``[H, W, C]`` image."""
    out = np.asarray(image, dtype=np.float32)
    if params.noise:
        out = np.clip(out + rng.normal(0.0, sigma, size=out.shape).astype(np.float32), 0.0, 1.0)
    if params.shift is not None:
        out = shift_image(out, *params.shift)
    if params.rotation_k:
        out = np.rot90(out, params.rotation_k, axes=(0, 1))
    return np.ascontiguousarray(out)


def standard_augment(image: np.ndarray, rng: np.random.Generator, rotate: bool = True) -> np.ndarray:
    return apply_augment(image, draw_augment_params(rng, rotate=rotate), rng)


def augment_batch(images: np.ndarray, rng: np.random.Generator, rotate: bool = True) -> np.ndarray:
    """``standard_augment`` applied per image of an ``[N, C, H, W]`` batch.

    ``rotate=False`` keeps orientation, for data where a quarter turn changes the class.
    """
    hwc = np.asarray(images).transpose(0, 2, 3, 1)
    out = np.stack([standard_augment(im, rng, rotate) for im in hwc]) if len(hwc) else hwc
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=np.float32)
