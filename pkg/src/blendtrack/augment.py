"""White-balance augmentation and image normalization ahead of the regressor.

Images flow through the package as numpy arrays in HWC layout (height, width,
3 RGB channels); normalized tensors hold float values in [0, 1] and batches
stack to (N, H, W, 3).
"""

from __future__ import annotations

import numpy as np


def white_balance_jitter(image: np.ndarray, seed: int, gain_range: tuple[float, float] = (0.7, 1.3)) -> np.ndarray:
    """Scale each RGB channel by a random gain drawn from `gain_range`.

    Gains are drawn from a generator seeded with `seed`, so the output is
    bit-reproducible. The result is clamped back to [0, 1].
    """
    lo, hi = gain_range
    if not (0.0 < lo <= hi):
        raise ValueError(f"invalid gain range [{lo}, {hi}]: need 0 < lo <= hi")
    img = _as_unit_image(image)
    gains = np.random.default_rng(seed).uniform(lo, hi, size=3)
    return apply_channel_gains(img, gains)


def apply_channel_gains(image: np.ndarray, gains: np.ndarray) -> np.ndarray:
    """Multiply RGB channels by per-channel gains and clamp to [0, 1]."""
    return np.clip(image * np.asarray(gains, dtype=np.float64), 0.0, 1.0)


def resize_normalize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear-resize a raster to (out_h, out_w) and scale values to [0, 1].

    uint8 input is divided by 255; float input is assumed already normalized.
    Sampling uses half-pixel centers, so a 2x2 {0,1} checkerboard reduced to
    1x1 yields exactly 0.5.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got ({out_h}, {out_w})")
    img = _as_unit_image(image)
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img

    src_r = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    src_c = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    r0 = np.clip(np.floor(src_r), 0, in_h - 1).astype(np.intp)
    c0 = np.clip(np.floor(src_c), 0, in_w - 1).astype(np.intp)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    tr = np.clip(src_r - r0, 0.0, 1.0)[:, None, None]
    tc = np.clip(src_c - c0, 0.0, 1.0)[None, :, None]

    top = img[r0][:, c0] * (1.0 - tc) + img[r0][:, c1] * tc
    bottom = img[r1][:, c0] * (1.0 - tc) + img[r1][:, c1] * tc
    return top * (1.0 - tr) + bottom * tr


def _as_unit_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB raster, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("image has zero size")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    out = img.astype(np.float64)
    if out.min() < 0.0 or out.max() > 1.0:
        raise ValueError("float image values must lie in [0, 1]")
    return out
