"""Tracklet-consistent appearance augmentation.

One hue shift is drawn per tracklet and applied to every frame, so temporal
color consistency is preserved; flips and random erasing follow standard
per-frame recipes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV on float arrays shaped (..., 3), hue in [0, 1)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0.0, delta / np.where(maxc > 0.0, maxc, 1.0), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rc = (maxc - r) / delta
        gc = (maxc - g) / delta
        bc = (maxc - b) / delta
    h = np.select(
        [delta == 0.0, maxc == r, maxc == g],
        [np.zeros_like(v), bc - gc, 2.0 + rc - bc],
        default=4.0 + gc - rc,
    )
    h = (h / 6.0) % 1.0
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB on float arrays shaped (..., 3), hue in [0, 1)."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def adjust_hue(image: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by `shift` (fraction of the circle), preserving S and V.

    A whole-circle shift returns the input unchanged. Output matches the
    input dtype; values are clipped to [0, 1].
    """
    image = np.asarray(image)
    if image.ndim < 1 or image.shape[-1] != 3:
        raise ValueError("image must have a trailing RGB axis of size 3")
    if shift % 1.0 == 0.0:
        return image.copy()
    hsv = rgb_to_hsv(image)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out.astype(image.dtype, copy=False)


@dataclass(frozen=True)
class JitterParams:
    """One tracklet's color-jitter decision: apply or not, and the hue shift."""

    applied: bool
    phi: float


def sample_jitter(rng: np.random.Generator, max_shift: float, prob: float) -> JitterParams:
    """Draw the per-tracklet jitter decision and hue shift phi ~ U[-h, h]."""
    if not 0.0 <= max_shift <= 0.5:
        raise ValueError("max_shift must lie in [0, 0.5]")
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    applied = bool(rng.random() < prob)
    phi = float(rng.uniform(-max_shift, max_shift))
    return JitterParams(applied=applied, phi=phi)


def jitter_tracklet(frames: np.ndarray, params: JitterParams) -> np.ndarray:
    """Apply one shared hue shift to all frames; identity op when not applied."""
    frames = np.asarray(frames)
    if not params.applied:
        return frames
    return adjust_hue(frames, params.phi)


def sample_erase_box(
    rng: np.random.Generator,
    height: int,
    width: int,
    area_range: tuple[float, float] = (0.02, 0.2),
    aspect_range: tuple[float, float] = (0.3, 1.0 / 0.3),
) -> tuple[int, int, int, int]:
    """Sample an in-bounds (top, left, h, w) erase rectangle."""
    if height < 1 or width < 1:
        raise ValueError("image must be at least 1x1")
    for _ in range(20):
        area = rng.uniform(*area_range) * height * width
        log_aspect = rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1]))
        aspect = math.exp(log_aspect)
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if 1 <= eh <= height and 1 <= ew <= width:
            top = int(rng.integers(0, height - eh + 1))
            left = int(rng.integers(0, width - ew + 1))
            return top, left, eh, ew
    # degenerate sizes: fall back to a centered minimal box
    eh = max(1, min(height, int(round(math.sqrt(area_range[0] * height * width)))))
    ew = max(1, min(width, eh))
    top = int(rng.integers(0, height - eh + 1))
    left = int(rng.integers(0, width - ew + 1))
    return top, left, eh, ew


def flip_and_erase(
    frames: np.ndarray,
    rng: np.random.Generator,
    flip_prob: float = 0.5,
    erase_prob: float = 0.5,
    fill: np.ndarray | float = 0.0,
) -> np.ndarray:
    """Horizontal flip decided once per tracklet, erasing drawn per frame."""
    frames = np.array(frames, copy=True)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError("frames must be (T, H, W, 3)")
    t_len, h, w = frames.shape[:3]
    if rng.random() < flip_prob:
        frames = frames[:, :, ::-1, :].copy()
    for t in range(t_len):
        if rng.random() < erase_prob:
            top, left, eh, ew = sample_erase_box(rng, h, w)
            frames[t, top : top + eh, left : left + ew, :] = fill
    return frames
