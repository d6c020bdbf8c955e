"""The twelve modality-agnostic corruptions.

Every corruption takes an intensity ``t`` in [0, 1] and a 64-bit seed.  ``t = 0``
returns the input untouched; the random draws (noise fields, angles, signs)
depend only on the seed, so the same realization is reused at every ``t``.
"""

from __future__ import annotations

import io
import logging
import math
from enum import Enum

import numpy as np
from PIL import Image
from scipy import ndimage

from .imagekit import ImageBuffer
from .seeding import stream

log = logging.getLogger(__name__)


class BaseKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SALT_PEPPER = "salt_pepper"
    SPECKLE = "speckle"
    GAUSSIAN_BLUR = "gaussian_blur"
    MOTION_BLUR = "motion_blur"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    JPEG_COMPRESSION = "jpeg_compression"
    PIXELATE = "pixelate"
    ROTATION = "rotation"
    SCALING = "scaling"
    TRANSLATION = "translation"

    def __str__(self):
        return self.value


_MEMBERS = list(BaseKind)
BASE_GROUPS = {
    "noise": tuple(_MEMBERS[:3]),
    "degradation": tuple(_MEMBERS[3:9]),
    "geometric": tuple(_MEMBERS[9:]),
}
GEOMETRIC_KINDS = frozenset(BASE_GROUPS["geometric"])


def base_group(kind) -> str:
    kind = BaseKind(kind)
    for name, members in BASE_GROUPS.items():
        if kind in members:
            return name
    raise AssertionError(kind)


def check_intensity(t) -> float:
    try:
        t = float(t)
    except (TypeError, ValueError):
        raise ValueError(f"invalid intensity {t!r}") from None
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"invalid intensity {t!r}: must lie in [0, 1]")
    return t


def _sign(g: np.random.Generator) -> float:
    return 1.0 if g.random() < 0.5 else -1.0


def _per_channel(x: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(x[:, :, c]) for c in range(x.shape[2])], axis=2)


# -- noise ------------------------------------------------------------------

def _gaussian_noise(x, t, seed):
    n = stream(seed, "gaussian_noise").standard_normal(x.shape)
    return x + 0.5 * t * n


def _salt_pepper(x, t, seed):
    g = stream(seed, "salt_pepper")
    h, w = x.shape[:2]
    hit = g.random((h, w)) < 0.3 * t
    salt = g.random((h, w)) < 0.5
    out = x.copy()
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def _speckle(x, t, seed):
    n = stream(seed, "speckle").standard_normal(x.shape)
    return x * (1.0 + 0.7 * t * n)


# -- degradation ------------------------------------------------------------

def _clamped_radius(radius: int, shape, what: str) -> int:
    limit = max(1, min(shape[0], shape[1]) - 1)
    if radius > limit:
        log.warning("%s kernel radius %d exceeds image %dx%d; clamped to %d",
                    what, radius, shape[0], shape[1], limit)
        return limit
    return radius


def _gaussian_blur(x, t, seed):
    sigma = 8.0 * t
    if sigma < 0.05:
        return x
    radius = _clamped_radius(int(math.ceil(4.0 * sigma)), x.shape, "gaussian_blur")
    return _per_channel(x, lambda c: ndimage.gaussian_filter(c, sigma, mode="reflect", radius=radius))


def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized line kernel of ``length`` samples at ``angle`` radians (bilinear splat)."""
    if length <= 1:
        return np.ones((1, 1))
    half = (length - 1) / 2.0
    r = int(math.ceil(half)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    dy, dx = math.sin(angle), math.cos(angle)
    for j in range(length):
        s = j - half
        py, px = r + s * dy, r + s * dx
        y0, x0 = int(math.floor(py)), int(math.floor(px))
        fy, fx = py - y0, px - x0
        k[y0, x0] += (1 - fy) * (1 - fx)
        k[y0, x0 + 1] += (1 - fy) * fx
        k[y0 + 1, x0] += fy * (1 - fx)
        k[y0 + 1, x0 + 1] += fy * fx
    return k / k.sum()


def _motion_blur(x, t, seed):
    angle = stream(seed, "motion_blur").uniform(0.0, math.pi)
    length = 1 + int(math.floor(30.0 * t))
    limit = min(x.shape[0], x.shape[1]) - 3  # kernel side is at most length + 3
    if length > limit:
        log.warning("motion_blur length %d exceeds image %dx%d; clamped to %d",
                    length, x.shape[0], x.shape[1], max(1, limit))
        length = max(1, limit)
    if length <= 1:
        return x
    k = motion_kernel(length, angle)
    return _per_channel(x, lambda c: ndimage.convolve(c, k, mode="reflect"))


def _brightness(x, t, seed):
    return x + _sign(stream(seed, "brightness")) * 0.6 * t


def _contrast(x, t, seed):
    return 0.5 + (x - 0.5) * (1.0 - 0.9 * t)


def jpeg_quality(t: float) -> int:
    return int(round(95.0 - 90.0 * t))


def _jpeg(x, t, seed):
    q8 = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = Image.fromarray(q8[:, :, 0], mode="L") if x.shape[2] == 1 else Image.fromarray(q8, mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=jpeg_quality(t), subsampling=2, optimize=False)
    buf.seek(0)
    dec = np.asarray(Image.open(buf), dtype=np.float64) / 255.0
    return dec.reshape(x.shape)


def block_average(x: np.ndarray, block: int) -> np.ndarray:
    """Replace each ``block`` x ``block`` tile (partial at the borders) by its mean."""
    h, w = x.shape[:2]
    rows = np.arange(0, h, block)
    cols = np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(x, rows, axis=0), cols, axis=1)
    rh = np.diff(np.append(rows, h))
    cw = np.diff(np.append(cols, w))
    means = sums / (rh[:, None, None] * cw[None, :, None])
    return np.repeat(np.repeat(means, rh, axis=0), cw, axis=1)


def _pixelate(x, t, seed):
    block = 1 + int(math.floor(24.0 * t))
    if block <= 1:
        return x
    return block_average(x, block)


# -- geometric --------------------------------------------------------------

def geometric_matrix(kind, t: float, seed: int, height: int, width: int) -> np.ndarray:
    """Forward 3x3 map from input (row, col, 1) to output coordinates.

    Coordinates index pixel centres; the image centre is ((H-1)/2, (W-1)/2).
    """
    kind = BaseKind(kind)
    g = stream(seed, kind.value)
    c = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    m = np.eye(3)
    if kind is BaseKind.ROTATION:
        theta = math.radians(_sign(g) * 30.0 * t)
        a = np.array([[math.cos(theta), -math.sin(theta)],
                      [math.sin(theta), math.cos(theta)]])
    elif kind is BaseKind.SCALING:
        a = np.eye(2) * (1.0 + _sign(g) * 0.4 * t)
    elif kind is BaseKind.TRANSLATION:
        sy, sx = _sign(g), _sign(g)
        m[0, 2] = sy * 0.25 * t * height
        m[1, 2] = sx * 0.25 * t * width
        return m
    else:
        raise ValueError(f"{kind.value} is not a geometric perturbation")
    m[:2, :2] = a
    m[:2, 2] = c - a @ c
    return m


def warp(arr: np.ndarray, forward: np.ndarray, order: int = 1) -> np.ndarray:
    """Resample a (H, W) or (H, W, C) array under ``forward`` with reflect padding."""
    inv = np.linalg.inv(forward)

    def one(c):
        return ndimage.affine_transform(c, inv[:2, :2], offset=inv[:2, 2],
                                        order=order, mode="reflect")

    if arr.ndim == 2:
        return one(arr)
    return _per_channel(arr, one)


def _geometric(kind):
    def fn(x, t, seed):
        m = geometric_matrix(kind, t, seed, x.shape[0], x.shape[1])
        return warp(x, m, order=1)
    return fn


_IMPL = {
    BaseKind.GAUSSIAN_NOISE: _gaussian_noise,
    BaseKind.SALT_PEPPER: _salt_pepper,
    BaseKind.SPECKLE: _speckle,
    BaseKind.GAUSSIAN_BLUR: _gaussian_blur,
    BaseKind.MOTION_BLUR: _motion_blur,
    BaseKind.BRIGHTNESS: _brightness,
    BaseKind.CONTRAST: _contrast,
    BaseKind.JPEG_COMPRESSION: _jpeg,
    BaseKind.PIXELATE: _pixelate,
    BaseKind.ROTATION: _geometric(BaseKind.ROTATION),
    BaseKind.SCALING: _geometric(BaseKind.SCALING),
    BaseKind.TRANSLATION: _geometric(BaseKind.TRANSLATION),
}


def apply_base(kind, img: ImageBuffer, t, seed: int) -> ImageBuffer:
    """Apply base corruption ``kind`` at intensity ``t`` with the given seed."""
    kind = BaseKind(kind)
    t = check_intensity(t)
    if t == 0.0:
        return img
    out = _IMPL[kind](img.data, t, int(seed))
    return ImageBuffer(np.clip(out, 0.0, 1.0), source_depth=img.source_depth)
