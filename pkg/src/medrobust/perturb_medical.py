"""Modality-specific artifact simulators and the modality registry.

All geometry (foci, angles, band positions, periods) is drawn from the seed
only.  Counts that grow with ``t`` take the first ``n`` of a fixed list of
candidates so a higher intensity always contains the lower one.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np
from scipy import ndimage

from .imagekit import ImageBuffer
from .perturb_base import BaseKind, check_intensity
from .seeding import stream


class Modality(str, Enum):
    CT = "CT"
    MRI = "MRI"
    ULTRASOUND = "Ultrasound"
    PATHOLOGY = "Pathology"
    ENDOSCOPY = "Endoscopy"
    OCT = "OCT"
    XRAY = "XRay"
    DERMOSCOPY = "Dermoscopy"

    def __str__(self):
        return self.value


class MedicalKind(str, Enum):
    CT_METAL_STREAK = "ct_metal_streak"
    CT_BEAM_HARDENING = "ct_beam_hardening"
    CT_WINDOW_LEVEL = "ct_window_level"
    MRI_BIAS_FIELD = "mri_bias_field"
    MRI_GHOSTING = "mri_ghosting"
    US_ACOUSTIC_SHADOW = "us_acoustic_shadow"
    US_REVERBERATION = "us_reverberation"
    PATH_STAIN_SHIFT = "path_stain_shift"
    ENDO_SPECULAR_REFLECTION = "endo_specular_reflection"
    ENDO_BUBBLES = "endo_bubbles"
    OCT_SHADOW = "oct_shadow"
    OCT_BLINK = "oct_blink"
    OCT_DEFOCUS = "oct_defocus"
    XRAY_SCATTER = "xray_scatter"
    XRAY_EXPOSURE = "xray_exposure"
    XRAY_GRID = "xray_grid"
    DERM_LIGHT_REFLECTION = "derm_light_reflection"

    def __str__(self):
        return self.value

    @property
    def modality(self) -> Modality:
        return PRIMARY_MODALITY[self]


PRIMARY_MODALITY = {
    MedicalKind.CT_METAL_STREAK: Modality.CT,
    MedicalKind.CT_BEAM_HARDENING: Modality.CT,
    MedicalKind.CT_WINDOW_LEVEL: Modality.CT,
    MedicalKind.MRI_BIAS_FIELD: Modality.MRI,
    MedicalKind.MRI_GHOSTING: Modality.MRI,
    MedicalKind.US_ACOUSTIC_SHADOW: Modality.ULTRASOUND,
    MedicalKind.US_REVERBERATION: Modality.ULTRASOUND,
    MedicalKind.PATH_STAIN_SHIFT: Modality.PATHOLOGY,
    MedicalKind.ENDO_SPECULAR_REFLECTION: Modality.ENDOSCOPY,
    MedicalKind.ENDO_BUBBLES: Modality.ENDOSCOPY,
    MedicalKind.OCT_SHADOW: Modality.OCT,
    MedicalKind.OCT_BLINK: Modality.OCT,
    MedicalKind.OCT_DEFOCUS: Modality.OCT,
    MedicalKind.XRAY_SCATTER: Modality.XRAY,
    MedicalKind.XRAY_EXPOSURE: Modality.XRAY,
    MedicalKind.XRAY_GRID: Modality.XRAY,
    MedicalKind.DERM_LIGHT_REFLECTION: Modality.DERMOSCOPY,
}


def _sign(g) -> float:
    return 1.0 if g.random() < 0.5 else -1.0


def _grid(x):
    h, w = x.shape[:2]
    return np.mgrid[0:h, 0:w].astype(np.float64)


# -- CT ---------------------------------------------------------------------

MAX_STREAKS = 16


def _ct_metal_streak(x, t, seed):
    g = stream(seed, "ct_metal_streak")
    h, w = x.shape[:2]
    fy = g.uniform(0.3, 0.7) * (h - 1)
    fx = g.uniform(0.3, 0.7) * (w - 1)
    angles = g.uniform(0.0, math.pi, MAX_STREAKS)
    widths = g.uniform(0.7, 1.5, MAX_STREAKS)
    yy, xx = _grid(x)
    dy, dx = yy - fy, xx - fx
    dist = np.hypot(dy, dx)
    falloff = 1.0 / (1.0 + dist / (0.5 * min(h, w)))
    n = 4 + int(math.floor(12.0 * t))
    field = np.zeros((h, w))
    for k in range(n):
        # perpendicular distance to a line through the focus
        d = np.abs(dx * math.sin(angles[k]) - dy * math.cos(angles[k]))
        field += (1.0 if k % 2 == 0 else -1.0) * np.exp(-d * d / (2 * widths[k] ** 2))
    return x + (0.5 * t * field * falloff)[:, :, None]


def _ct_beam_hardening(x, t, seed):
    h, w = x.shape[:2]
    yy, xx = _grid(x)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r = np.hypot(yy - cy, xx - cx)
    rmax = math.hypot(cy, cx) or 1.0
    rho = np.minimum(r / rmax, 1.0)
    cup = 1.0 - 0.6 * t * (1.0 - rho * rho)
    return x * cup[:, :, None]


def _ct_window_level(x, t, seed):
    shift = _sign(stream(seed, "ct_window_level")) * 0.3 * t
    width = 1.0 - 0.5 * t
    return (x - (0.5 + shift)) / width + 0.5


# -- MRI --------------------------------------------------------------------

def _mri_bias_field(x, t, seed):
    g = stream(seed, "mri_bias_field")
    h, w = x.shape[:2]
    cy = g.uniform(0.0, 1.0) * (h - 1)
    cx = g.uniform(0.0, 1.0) * (w - 1)
    s = g.uniform(0.3, 0.6) * min(h, w)
    sign = _sign(g)
    yy, xx = _grid(x)
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    b = sign * 0.8 * t * bump / bump.max()
    return x * np.exp(b)[:, :, None]


def _mri_ghosting(x, t, seed):
    axis = int(stream(seed, "mri_ghosting").integers(0, 2))
    n = x.shape[axis]
    shifts = (n // 4, -(n // 4), n // 2, -(n // 2))
    ghosts = sum(np.roll(x, s, axis=axis) for s in shifts) / len(shifts)
    alpha = 0.5 * t
    return (1.0 - alpha) * x + alpha * ghosts


# -- ultrasound -------------------------------------------------------------

def shadow_wedge(height: int, width: int, seed: int) -> np.ndarray:
    """Boolean mask of the acoustic-shadow wedge for ``seed``."""
    g = stream(seed, "us_acoustic_shadow")
    ay = g.uniform(0.05, 0.3) * (height - 1)
    ax = g.uniform(0.25, 0.75) * (width - 1)
    half = math.radians(g.uniform(20.0, 40.0)) / 2.0
    tilt = math.radians(g.uniform(-10.0, 10.0))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = yy - ay, xx - ax
    ang = np.arctan2(dx, dy) - tilt  # 0 points straight down
    ang = (ang + math.pi) % (2 * math.pi) - math.pi
    return (dy > 0) & (np.abs(ang) <= half)


def _us_acoustic_shadow(x, t, seed):
    wedge = shadow_wedge(x.shape[0], x.shape[1], seed)
    out = x.copy()
    out[wedge] *= 1.0 - 0.85 * t
    return out


def _us_reverberation(x, t, seed):
    g = stream(seed, "us_reverberation")
    h = x.shape[0]
    depth = g.uniform(0.2, 0.5) * (h - 1)
    period = g.uniform(8.0, 16.0)
    y = np.arange(h, dtype=np.float64) - depth
    bands = (0.5 + 0.5 * np.cos(2 * math.pi * y / period)) ** 2 * np.exp(-np.maximum(y, 0) / h)
    bands[y < 0] = 0.0
    return x + 0.4 * t * bands[:, None, None]


# -- pathology --------------------------------------------------------------

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV for arrays of shape (..., 3); hue in [0, 1)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(c > 0, c, 1.0)
    h = np.where(v == r, ((g - b) / safe) % 6.0,
                 np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    u = v * (1.0 - s * (1.0 - f))
    choices = [
        np.stack([v, u, p], -1), np.stack([q, v, p], -1), np.stack([p, v, u], -1),
        np.stack([p, q, v], -1), np.stack([u, p, v], -1), np.stack([v, p, q], -1),
    ]
    out = np.zeros(hsv.shape)
    for k, c in enumerate(choices):
        out = np.where((i == k)[..., None], c, out)
    return out


def _path_stain_shift(x, t, seed):
    if x.shape[2] != 3:
        return x  # no chroma to shift
    g = stream(seed, "path_stain_shift")
    dh = _sign(g) * 0.12 * t
    ds = _sign(g) * 0.6 * t
    hsv = rgb_to_hsv(x)
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + ds), 0.0, 1.0)
    return hsv_to_rgb(hsv)


# -- endoscopy / dermoscopy -------------------------------------------------

MAX_HIGHLIGHTS = 8


def _highlights(x, t, seed, modality: Modality):
    g = stream(seed, f"light_reflection:{modality.value}")
    h, w = x.shape[:2]
    # endoscopic speculars are elongated streaks, dermoscopic glare is rounder
    aspect_lo, aspect_hi = (1.5, 3.0) if modality is Modality.ENDOSCOPY else (1.0, 1.5)
    cy = g.uniform(0.1, 0.9, MAX_HIGHLIGHTS) * (h - 1)
    cx = g.uniform(0.1, 0.9, MAX_HIGHLIGHTS) * (w - 1)
    aspect = g.uniform(aspect_lo, aspect_hi, MAX_HIGHLIGHTS)
    theta = g.uniform(0.0, math.pi, MAX_HIGHLIGHTS)
    n = 2 + int(math.floor(6.0 * t))
    area = 0.12 * t * h * w / MAX_HIGHLIGHTS  # per highlight, so the total stays <= 12t %
    yy, xx = _grid(x)
    alpha = np.zeros((h, w))
    for k in range(n):
        b = math.sqrt(area / (math.pi * aspect[k]))
        a = aspect[k] * b
        dy, dx = yy - cy[k], xx - cx[k]
        u = dx * math.cos(theta[k]) + dy * math.sin(theta[k])
        v = -dx * math.sin(theta[k]) + dy * math.cos(theta[k])
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        a_k = np.where(rho <= 0.4, 1.0, np.exp(-((rho - 0.4) / 0.25) ** 2))
        a_k[rho > 1.0] = 0.0
        alpha = np.maximum(alpha, a_k)
    return x + alpha[:, :, None] * (1.0 - x)


MAX_BUBBLES = 13


def _endo_bubbles(x, t, seed):
    g = stream(seed, "endo_bubbles")
    h, w = x.shape[:2]
    m = min(h, w)
    cy = g.uniform(0.05, 0.95, MAX_BUBBLES) * (h - 1)
    cx = g.uniform(0.05, 0.95, MAX_BUBBLES) * (w - 1)
    radius = g.uniform(0.02, 0.08, MAX_BUBBLES) * m
    n = 3 + int(math.floor(10.0 * t))
    opacity = 0.8 * t
    yy, xx = _grid(x)
    rim = np.zeros((h, w))
    inside = np.zeros((h, w))
    for k in range(n):
        r = np.hypot(yy - cy[k], xx - cx[k])
        width = max(0.6, 0.18 * radius[k])
        rim = np.maximum(rim, np.exp(-((r - radius[k]) / width) ** 2))
        inside = np.maximum(inside, (r < radius[k]).astype(np.float64))
    out = x * (1.0 - 0.25 * opacity * inside)[:, :, None]
    return out + (opacity * rim)[:, :, None] * (1.0 - out)


# -- OCT --------------------------------------------------------------------

MAX_OCT_BANDS = 4


def _oct_shadow(x, t, seed):
    g = stream(seed, "oct_shadow")
    w = x.shape[1]
    starts = g.uniform(0.0, 1.0, MAX_OCT_BANDS) * w
    widths = g.uniform(0.02, 0.06, MAX_OCT_BANDS) * w
    n = 1 + int(math.floor(3.0 * t))
    cols = np.arange(w) + 0.5
    inband = np.zeros(w, dtype=bool)
    for k in range(n):
        inband |= (cols >= starts[k]) & (cols < min(starts[k] + max(widths[k], 1.0), w))
    gain = np.where(inband, 1.0 - 0.8 * t, 1.0)
    return x * gain[None, :, None]


def blink_band(height: int, t: float, seed: int) -> tuple[int, int]:
    """Row range ``[start, stop)`` blanked by the OCT blink artifact."""
    max_rows = min(height, 2 + int(math.floor(0.15 * height)))
    rows = min(height, 2 + int(math.floor(0.15 * t * height)))
    start = int(stream(seed, "oct_blink").integers(0, height - max_rows + 1))
    return start, start + rows


def _oct_blink(x, t, seed):
    start, stop = blink_band(x.shape[0], t, seed)
    out = x.copy()
    out[start:stop] = 0.0
    return out


def disk_kernel(radius: float, supersample: int = 8) -> np.ndarray:
    """Normalized disk with area-weighted edge pixels."""
    r = int(math.ceil(radius))
    n = 2 * r + 1
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) - r
    cover = np.zeros((n, n))
    for oy in offs:
        for ox in offs:
            cover += (yy + oy) ** 2 + (xx + ox) ** 2 <= radius * radius
    cover[r, r] = max(cover[r, r], 1.0)
    return cover / cover.sum()


def _oct_defocus(x, t, seed):
    radius = min(6.0 * t, (min(x.shape[:2]) - 1) / 2.0)
    k = disk_kernel(radius)
    return np.stack([ndimage.convolve(x[:, :, c], k, mode="reflect") for c in range(x.shape[2])], axis=2)


# -- X-ray ------------------------------------------------------------------

def _xray_scatter(x, t, seed):
    sigma = min(x.shape[:2]) / 8.0
    haze = ndimage.gaussian_filter(x, (sigma, sigma, 0), mode="reflect") + 0.1
    beta = 0.7 * t
    return (1.0 - beta) * x + beta * haze


def _xray_exposure(x, t, seed):
    # gamma = 1 + 1.5t (under-exposure) or its reciprocal (over-exposure)
    gamma = 1.0 + 1.5 * t
    if _sign(stream(seed, "xray_exposure")) < 0:
        gamma = 1.0 / gamma
    return np.power(x, gamma)


def _xray_grid(x, t, seed):
    g = stream(seed, "xray_grid")
    vertical = g.random() < 0.5
    period = g.uniform(4.0, 8.0)
    phase = g.uniform(0.0, 2 * math.pi)
    h, w = x.shape[:2]
    if vertical:
        line = np.sin(2 * math.pi * np.arange(w) / period + phase)[None, :]
    else:
        line = np.sin(2 * math.pi * np.arange(h) / period + phase)[:, None]
    return x + (0.25 * t * np.broadcast_to(line, (h, w)))[:, :, None]


_IMPL = {
    MedicalKind.CT_METAL_STREAK: _ct_metal_streak,
    MedicalKind.CT_BEAM_HARDENING: _ct_beam_hardening,
    MedicalKind.CT_WINDOW_LEVEL: _ct_window_level,
    MedicalKind.MRI_BIAS_FIELD: _mri_bias_field,
    MedicalKind.MRI_GHOSTING: _mri_ghosting,
    MedicalKind.US_ACOUSTIC_SHADOW: _us_acoustic_shadow,
    MedicalKind.US_REVERBERATION: _us_reverberation,
    MedicalKind.PATH_STAIN_SHIFT: _path_stain_shift,
    MedicalKind.ENDO_SPECULAR_REFLECTION: lambda x, t, s: _highlights(x, t, s, Modality.ENDOSCOPY),
    MedicalKind.ENDO_BUBBLES: _endo_bubbles,
    MedicalKind.OCT_SHADOW: _oct_shadow,
    MedicalKind.OCT_BLINK: _oct_blink,
    MedicalKind.OCT_DEFOCUS: _oct_defocus,
    MedicalKind.XRAY_SCATTER: _xray_scatter,
    MedicalKind.XRAY_EXPOSURE: _xray_exposure,
    MedicalKind.XRAY_GRID: _xray_grid,
    MedicalKind.DERM_LIGHT_REFLECTION: lambda x, t, s: _highlights(x, t, s, Modality.DERMOSCOPY),
}


def apply_medical(kind, img: ImageBuffer, t, seed: int) -> ImageBuffer:
    """Apply the clinical artifact ``kind`` at intensity ``t``."""
    kind = MedicalKind(kind)
    t = check_intensity(t)
    if t == 0.0:
        return img
    out = _IMPL[kind](img.data, t, int(seed))
    return ImageBuffer(np.clip(out, 0.0, 1.0), source_depth=img.source_depth)


def medical_kinds_for(modality) -> list[MedicalKind]:
    modality = Modality(modality)
    return [k for k in MedicalKind if PRIMARY_MODALITY[k] is modality]


def perturbations_for(modality) -> list[tuple[str, str]]:
    """``(perturbation_id, category)`` pairs applicable to ``modality``.

    All base kinds come first, followed by the registered medical kinds.
    """
    from .registry import registered_for  # registry imports this module

    return registered_for(Modality(modality))


__all__ = [
    "BaseKind", "MedicalKind", "Modality", "apply_medical", "blink_band",
    "medical_kinds_for", "perturbations_for", "shadow_wedge",
]
