"""Stochastic augmentation pipeline producing positive-pair views.

All transforms map [0,1]-valued channel-major images back into [0,1].
Geometric transforms resample bilinearly with zero fill outside the frame.
The pipeline applies every enabled transform in a fixed order and always
consumes exactly :data:`DRAWS_PER_CALL` uniform draws from the supplied RNG
stream, so batch construction is reproducible regardless of which
transforms are enabled or which branches fire.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError

HORIZONTAL = "horizontal"
VERTICAL = "vertical"

# Draw order: flip-h, flip-v, rotation, shift-x, shift-y, zoom, gamma,
# brightness. Always 8 draws per augment() call.
DRAWS_PER_CALL = 8


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max_deg: float = 25.0
    shift_max_frac: float = 0.1
    zoom_range: tuple[float, float] = (0.9, 1.1)
    gamma_range: tuple[float, float] = (0.8, 1.2)
    brightness_delta_max: float = 0.1
    enable_flip_h: bool = True
    enable_flip_v: bool = True
    enable_rotate: bool = True
    enable_shift: bool = True
    enable_zoom: bool = True
    enable_gamma: bool = True
    enable_brightness: bool = True

    def __post_init__(self):
        for name in ("zoom_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValidationError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.rotation_max_deg < 0 or self.shift_max_frac < 0 or self.brightness_delta_max < 0:
            raise ValidationError("augmentation magnitudes must be nonnegative")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(enable_flip_h=False, enable_flip_v=False, enable_rotate=False,
                   enable_shift=False, enable_zoom=False, enable_gamma=False,
                   enable_brightness=False)


def _clip01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def flip(image: np.ndarray, axis: str) -> np.ndarray:
    """Index reversal along the chosen spatial axis (last two dims)."""
    if axis == HORIZONTAL:
        return np.ascontiguousarray(image[..., :, ::-1])
    if axis == VERTICAL:
        return np.ascontiguousarray(image[..., ::-1, :])
    raise ValidationError(f"flip axis must be horizontal or vertical, got {axis!r}")


@lru_cache(maxsize=8)
def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    return rows, cols


def _bilinear(image: np.ndarray, src_rows: np.ndarray, src_cols: np.ndarray) -> np.ndarray:
    """Sample image[..., h, w] at fractional (row, col) coords, zero outside."""
    h, w = image.shape[-2:]
    flat = image.reshape(image.shape[:-2] + (h * w,))
    r0 = np.floor(src_rows).astype(np.intp)
    c0 = np.floor(src_cols).astype(np.intp)
    fr = src_rows - r0
    fc = src_cols - c0

    out = np.zeros(image.shape[:-2] + src_rows.shape, dtype=np.float64)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = r0 + dr
        cc = c0 + dc
        wgt = wgt * ((rr >= 0) & (rr < h) & (cc >= 0) & (cc < w))
        idx = np.clip(rr, 0, h - 1) * w + np.clip(cc, 0, w - 1)
        out += wgt * flat[..., idx]
    return out


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotation about the image center, bilinear, zero fill outside.

    Multiples of 90 degrees on square images take an exact index-permutation
    path consistent with the bilinear map.
    """
    h, w = image.shape[-2:]
    deg = float(degrees) % 360.0
    if deg == 0.0:
        return image.copy()
    if h == w and deg in (90.0, 180.0, 270.0):
        k = {90.0: -1, 180.0: 2, 270.0: 1}[deg]
        return np.ascontiguousarray(np.rot90(image, k=k, axes=(-2, -1)))
    theta = np.deg2rad(deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = _grid(h, w)
    u = cols - cx
    v = rows - cy
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_cols = cx + cos_t * u + sin_t * v
    src_rows = cy - sin_t * u + cos_t * v
    return _clip01(_bilinear(image, src_rows, src_cols))


def shift(image: np.ndarray, dx_frac: float, dy_frac: float,
          max_frac: float = AugmentConfig.shift_max_frac) -> np.ndarray:
    """Translate by (dx_frac*w, dy_frac*h) pixels, bilinear, zero fill."""
    if abs(dx_frac) > max_frac or abs(dy_frac) > max_frac:
        raise ValidationError(
            f"shift ({dx_frac}, {dy_frac}) exceeds max_frac {max_frac}")
    h, w = image.shape[-2:]
    dx = dx_frac * w
    dy = dy_frac * h
    if dx == 0.0 and dy == 0.0:
        return image.copy()
    rows, cols = _grid(h, w)
    return _clip01(_bilinear(image, rows - dy, cols - dx))


def zoom(image: np.ndarray, factor: float,
         zoom_range: tuple[float, float] = AugmentConfig.zoom_range) -> np.ndarray:
    """Central scaling by ``factor`` (>1 magnifies), bilinear, zero fill."""
    lo, hi = zoom_range
    if not (lo <= factor <= hi):
        raise ValidationError(f"zoom factor {factor} outside range {zoom_range}")
    if factor == 1.0:
        return image.copy()
    h, w = image.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = _grid(h, w)
    src_rows = cy + (rows - cy) / factor
    src_cols = cx + (cols - cx) / factor
    return _clip01(_bilinear(image, src_rows, src_cols))


def adjust_gamma(image: np.ndarray, gamma: float,
                 gamma_range: tuple[float, float] = AugmentConfig.gamma_range) -> np.ndarray:
    lo, hi = gamma_range
    if not (lo <= gamma <= hi):
        raise ValidationError(f"gamma {gamma} outside range {gamma_range}")
    return _clip01(np.power(image, gamma))


def adjust_brightness(image: np.ndarray, delta: float,
                      delta_max: float = AugmentConfig.brightness_delta_max) -> np.ndarray:
    if abs(delta) > delta_max:
        raise ValidationError(f"brightness delta {delta} exceeds max {delta_max}")
    return _clip01(image + delta)


def augment(image: np.ndarray, config: AugmentConfig,
            rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of ``image``.

    Applies the enabled transforms in the order flip-h, flip-v, rotate,
    shift, zoom, gamma, brightness. Flips fire with probability 0.5 each;
    continuous parameters are uniform over their configured ranges. Exactly
    8 draws are consumed per call, whatever the flags and outcomes.
    """
    u_flip_h = rng.uniform()
    u_flip_v = rng.uniform()
    deg = rng.uniform(-config.rotation_max_deg, config.rotation_max_deg)
    dx = rng.uniform(-config.shift_max_frac, config.shift_max_frac)
    dy = rng.uniform(-config.shift_max_frac, config.shift_max_frac)
    factor = rng.uniform(*config.zoom_range)
    gamma = rng.uniform(*config.gamma_range)
    delta = rng.uniform(-config.brightness_delta_max, config.brightness_delta_max)

    out = image
    if config.enable_flip_h and u_flip_h < 0.5:
        out = flip(out, HORIZONTAL)
    if config.enable_flip_v and u_flip_v < 0.5:
        out = flip(out, VERTICAL)
    if config.enable_rotate:
        out = rotate(out, deg)
    if config.enable_shift:
        out = shift(out, dx, dy, max_frac=config.shift_max_frac)
    if config.enable_zoom:
        out = zoom(out, factor, zoom_range=config.zoom_range)
    if config.enable_gamma:
        out = adjust_gamma(out, gamma, gamma_range=config.gamma_range)
    if config.enable_brightness:
        out = adjust_brightness(out, delta, delta_max=config.brightness_delta_max)
    if out is image:
        out = image.copy()
    return out
