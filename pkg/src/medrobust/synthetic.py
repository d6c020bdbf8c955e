"""Deterministic synthetic images: the calibration probe set and a demo dataset."""

from __future__ import annotations

import json
import os

import numpy as np
from scipy import ndimage

from .imagekit import ImageBuffer, save_image

PROBE_SIZE = 64


def _normalize(a, lo=0.1, hi=0.9):
    a = a - a.min()
    a = a / max(a.max(), 1e-12)
    return lo + (hi - lo) * a


def _texture(rng, shape, sigma):
    return ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")


def probe_set(size: int = PROBE_SIZE) -> list[ImageBuffer]:
    """Ten textured probes: filtered noise, gradients, blobs, rings and one RGB texture."""
    rng = np.random.default_rng(20240611)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    r = np.hypot(yy - 0.5, xx - 0.5)
    fine = _texture(rng, (size, size), 1.5)
    probes = [
        _normalize(_texture(rng, (size, size), 2.0)),
        _normalize(_texture(rng, (size, size), 3.5)),
        _normalize(xx + 0.15 * fine / fine.std()),
        _normalize(0.6 * (1 - r) + 0.1 * _texture(rng, (size, size), 1.0)),
    ]

    blobs = np.zeros((size, size))
    for _ in range(7):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        s = rng.uniform(0.05, 0.15)
        blobs += rng.uniform(0.4, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    probes.append(_normalize(blobs + 0.05 * fine / fine.std()))

    plaid = np.sin(2 * np.pi * 4 * xx) * np.cos(2 * np.pi * 3 * yy)
    probes.append(_normalize(plaid + 0.3 * fine / fine.std()))

    rings = np.cos(2 * np.pi * 6 * r)
    probes.append(_normalize(rings + 0.2 * fine / fine.std()))

    disk = ndimage.gaussian_filter((r < 0.3).astype(float), 1.5)
    probes.append(_normalize(disk + 0.25 * _texture(rng, (size, size), 2.0)))

    cells = ndimage.gaussian_filter(
        np.kron(rng.random((8, 8)), np.ones((size // 8, size // 8))), 2.0)
    probes.append(_normalize(cells + 0.1 * fine / fine.std()))

    rgb = np.stack([_normalize(_texture(rng, (size, size), 2.5), 0.2, 0.9) for _ in range(3)], axis=2)
    probes.append(rgb)
    return [ImageBuffer(p) for p in probes]


def disk_mask(size: int, center, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2


def _demo_image(rng, size, modality):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    base = _normalize(_texture(rng, (size, size), 2.5), 0.15, 0.75)
    cy, cx = rng.uniform(0.35, 0.65, 2)
    rad = rng.uniform(0.15, 0.25)
    lesion = np.hypot(yy - cy, xx - cx) <= rad
    img = np.where(lesion, np.clip(base + 0.2, 0, 1), base)
    mask = lesion
    if modality in ("Pathology", "Endoscopy", "Dermoscopy"):
        tint = np.array([0.9, 0.55, 0.6]) if modality != "Endoscopy" else np.array([0.95, 0.5, 0.45])
        img = np.clip(img[:, :, None] * tint + 0.05, 0, 1)
    return img, mask, (cy, cx, rad)


def write_demo_dataset(root, modalities=("MRI", "OCT"), per_modality: int = 3,
                       size: int = PROBE_SIZE, seed: int = 7) -> list[str]:
    """Write a small synthetic dataset (images, masks, manifests) under ``root``.

    Returns the manifest paths, one per modality.  Each sample carries a mask,
    a bounding box, a VQA answer and a caption so every scoring task can run.
    """
    rng = np.random.default_rng(seed)
    paths = []
    for modality in modalities:
        ds = f"demo_{modality.lower()}"
        ddir = os.path.join(root, ds)
        os.makedirs(os.path.join(ddir, "images"), exist_ok=True)
        os.makedirs(os.path.join(ddir, "masks"), exist_ok=True)
        samples = []
        for i in range(per_modality):
            img, mask, (cy, cx, rad) = _demo_image(rng, size, modality)
            sid = f"{ds}_{i:03d}"
            save_image(ImageBuffer(img), os.path.join(ddir, "images", f"{sid}.png"))
            save_image(ImageBuffer(mask.astype(float)), os.path.join(ddir, "masks", f"{sid}.png"))
            ys, xs = np.nonzero(mask)
            box = [float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)]
            big = rad > 0.2
            samples.append({
                "sample_id": sid,
                "image_path": f"images/{sid}.png",
                "mask_path": f"masks/{sid}.png",
                "box": box,
                "question": "Is the lesion large?",
                "answer": "yes" if big else "no",
                "answer_letter": "A" if big else "B",
                "caption": f"{modality.lower()} image showing a {'large' if big else 'small'} round lesion",
            })
        manifest = {"dataset_id": ds, "modality": modality, "samples": samples}
        path = os.path.join(ddir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
        paths.append(path)
    return paths
