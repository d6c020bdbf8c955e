"""Image buffers, PNG/JPEG codecs and the SSIM index used for severity calibration."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MIN_SSIM_SIZE = 8

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Normalized raster of shape (height, width, channels), samples in [0, 1].

    The array is stored read-only so buffers can be shared between workers.
    ``source_depth`` is the bit depth of the decoded file and is informational.
    """

    data: np.ndarray
    source_depth: int = 8

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) array, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("zero-area image")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("samples must lie in [0, 1]")
        if arr is self.data and arr.flags.writeable:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr, source_depth: int = 8) -> "ImageBuffer":
        return cls(np.asarray(arr, dtype=np.float64), source_depth=source_depth)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @cached_property
    def content_key(self) -> str:
        """SHA-256 over shape and sample bytes; used as the calibration cache key."""
        h = hashlib.sha256()
        h.update(repr(self.data.shape).encode())
        h.update(np.ascontiguousarray(self.data).tobytes())
        return h.hexdigest()

    def same_pixels(self, other: "ImageBuffer") -> bool:
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


_GRAY_MODES = {"1", "L", "LA", "I", "I;16", "I;16B", "I;16L", "F"}


def load_image(path) -> ImageBuffer:
    """Decode a PNG or JPEG file into an :class:`ImageBuffer`."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"file not found: {path}")
    try:
        im = Image.open(path)
        im.load()
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from exc
    if im.format not in ("PNG", "JPEG"):
        raise ValueError(f"unsupported format {im.format!r} for {path}")
    if im.width == 0 or im.height == 0:
        raise ValueError(f"zero-area image: {path}")

    mode = im.mode
    if mode in _GRAY_MODES:
        if mode.startswith("I;16") or mode == "I":
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            depth = 16
        elif mode == "F":
            arr = np.asarray(im, dtype=np.float64)
            depth = 32
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            depth = 1 if mode == "1" else 8
        arr = np.clip(arr, 0.0, 1.0)
    else:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        depth = 8
    return ImageBuffer(arr, source_depth=depth)


def quantize8(img: ImageBuffer) -> np.ndarray:
    return np.round(img.data * 255.0).astype(np.uint8)


def save_image(img: ImageBuffer, path) -> None:
    """Write ``img`` as an 8-bit lossless PNG (grayscale for 1-channel buffers)."""
    path = os.fspath(path)
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"parent directory does not exist: {parent}")
    q = quantize8(img)
    if img.channels == 1:
        pil = Image.fromarray(q[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(q, mode="RGB")
    pil.save(path, format="PNG")


def to_luminance(img: ImageBuffer) -> ImageBuffer:
    """Rec. 601 luma for RGB buffers; 1-channel buffers are returned as is."""
    if img.channels == 1:
        return img
    y = np.clip(img.data @ LUMA_WEIGHTS, 0.0, 1.0)
    return ImageBuffer(y[:, :, None], source_depth=img.source_depth)


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - r
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def ssim_window_size(height: int, width: int) -> int:
    """11, or the largest odd size that fits images smaller than that."""
    size = min(SSIM_WINDOW, height, width)
    return size if size % 2 == 1 else size - 1


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = k.shape[0]
    rows = sliding_window_view(x, n, axis=0) @ k
    return sliding_window_view(rows, n, axis=1) @ k


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM values over every fully-contained window of two 2-D arrays."""
    size = ssim_window_size(*x.shape)
    k = gaussian_window_1d(size)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2

    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mu_x * mu_x
    syy = _filter_valid(y * y, k) - mu_y * mu_y
    sxy = _filter_valid(x * y, k) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean SSIM on luminance with an 11x11 Gaussian window (sigma 1.5), L = 1.

    Only windows lying fully inside the image contribute.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"dimension mismatch: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    if min(a.height, a.width) < MIN_SSIM_SIZE:
        raise ValueError(f"SSIM needs images of at least {MIN_SSIM_SIZE}x{MIN_SSIM_SIZE}")
    x = to_luminance(a).data[:, :, 0]
    y = to_luminance(b).data[:, :, 0]
    return float(np.clip(ssim_map(x, y).mean(), -1.0, 1.0))
