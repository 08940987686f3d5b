"""Color-space primitives, illumination maps, synthetic degradation, and PNG IO.

Images are H x W x 3 float rasters in [0, 1] (float32 on disk boundaries,
float64 for derived maps). All functions here are pure and stateless.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy.ndimage import gaussian_filter

MIN_SIDE = 8


class ImageIOError(Exception):
    """Base class for image IO failures."""


class MissingImageError(ImageIOError):
    """The requested file does not exist."""


class CorruptImageError(ImageIOError):
    """The file exists but cannot be decoded as a PNG."""


class ChannelLayoutError(ImageIOError):
    """The decoded image does not have exactly three RGB channels."""


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the pixel-raster contract: H x W x 3, finite, in [0, 1], H, W >= 8."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must be H x W x 3, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ValueError(f"{name} sides must be >= {MIN_SIDE}, got {img.shape[:2]}")
    if not np.isfinite(img).all():
        raise ValueError(f"{name} contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return img


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV. Returns H x W x 3 float64 with H in [0, 360), S, V in [0, 1].

    V is the per-pixel max over the RGB channels.
    """
    img = validate_image(img).astype(np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    v = img.max(axis=2)
    c = v - img.min(axis=2)

    s = np.zeros_like(v)
    np.divide(c, v, out=s, where=v > 0)

    # Sector formula; pixels with c == 0 keep H = 0.
    h = np.zeros_like(v)
    safe_c = np.where(c > 0, c, 1.0)
    r_max = (v == r) & (c > 0)
    g_max = (v == g) & (c > 0) & ~r_max
    b_max = (c > 0) & ~r_max & ~g_max
    h = np.where(r_max, ((g - b) / safe_c) % 6.0, h)
    h = np.where(g_max, (b - r) / safe_c + 2.0, h)
    h = np.where(b_max, (r - g) / safe_c + 4.0, h)
    h = (h * 60.0) % 360.0
    return np.stack([h, s, v], axis=2)


@dataclass(frozen=True)
class IlluminationPrompt:
    """Paired brightness map and its complement, both H x W in [0, 1]."""

    v: np.ndarray
    v_reverse: np.ndarray


def illumination_prompt(img: np.ndarray) -> IlluminationPrompt:
    """Extract the V-channel map of `img` and its complement 1 - V."""
    img = validate_image(img)
    v = img.astype(np.float64).max(axis=2)
    return IlluminationPrompt(v=v, v_reverse=1.0 - v)


def degrade(img: np.ndarray, gamma: float, noise_sigma: float, seed: int) -> np.ndarray:
    """Synthetic low-light degradation: gamma curve plus additive Gaussian noise.

    out = clip(img**gamma + N(0, noise_sigma), 0, 1), deterministic for a
    fixed seed. gamma must be positive; noise_sigma must be non-negative.
    """
    img = validate_image(img)
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    out = np.power(img.astype(np.float64), gamma)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.standard_normal(out.shape) * noise_sigma
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class ReflectanceTarget:
    """Retinex split img = reflectance * illumination (illumination broadcast)."""

    reflectance: np.ndarray
    illumination: np.ndarray


def retinex_decompose(img: np.ndarray, blur_sigma: float = 5.0, eps: float = 0.01) -> ReflectanceTarget:
    """Classical Retinex decomposition with a blurred max-channel illumination.

    illumination = gaussian_blur(max_c img, blur_sigma) clamped to [eps, 1];
    reflectance = clip(img / illumination, 0, 1).
    """
    img = validate_image(img).astype(np.float64)
    if blur_sigma <= 0:
        raise ValueError(f"blur_sigma must be > 0, got {blur_sigma}")
    if not 0 < eps <= 0.1:
        raise ValueError(f"eps must lie in (0, 0.1], got {eps}")
    illum = gaussian_filter(img.max(axis=2), sigma=blur_sigma, mode="reflect")
    illum = np.clip(illum, eps, 1.0)
    reflectance = np.clip(img / illum[..., None], 0.0, 1.0)
    return ReflectanceTarget(reflectance=reflectance, illumination=illum)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit RGB PNG into a float32 raster in [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingImageError(f"no such image file: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(f"cannot decode {path}: {exc}") from exc
    if mode != "RGB" or arr.ndim != 3 or arr.shape[2] != 3:
        raise ChannelLayoutError(f"{path}: expected 3-channel RGB, got mode={mode}")
    return (arr.astype(np.float32) / 255.0).clip(0.0, 1.0)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write a [0, 1] raster as an 8-bit RGB PNG (round half to even)."""
    img = validate_image(img)
    quantized = np.rint(np.asarray(img, dtype=np.float64) * 255.0).astype(np.uint8)
    PILImage.fromarray(quantized, mode="RGB").save(os.fspath(path), format="PNG")
