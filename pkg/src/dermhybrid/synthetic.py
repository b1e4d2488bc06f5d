"""Separable toy dataset: a bright blob (malignant) or a dark blob (non-malignant) on a noisy skin tone."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import ImageSample, atomic_write_bytes, encode_ppm, write_manifest
from .rng import Rng, derive_seed


def blob_image(label: int, size: int, seed: int) -> np.ndarray:
    """H x W x 3 float image in [0, 1]."""
    rng = Rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size * rng.uniform(0.35, 0.65)
    cx = size * rng.uniform(0.35, 0.65)
    radius = size * rng.uniform(0.15, 0.25)
    mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
    skin = np.array([0.78, 0.6, 0.5])
    lesion = np.array([0.98, 0.95, 0.9]) if label == 1 else np.array([0.15, 0.08, 0.05])
    img = skin * (1 - mask[..., None]) + lesion * mask[..., None]
    img += 0.03 * rng.normal_array((size, size, 3), dtype=np.float64)
    return np.clip(img, 0.0, 1.0)


def write_blob_dataset(root, n: int, size: int = 64, seed: int = 0, malignant_fraction: float = 0.5) -> Path:
    """Write ``n`` PPM images plus ``manifest.csv`` under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    n_mal = int(round(n * malignant_fraction))
    order = Rng(derive_seed(seed, 1)).permutation(n)
    samples = []
    for i in range(n):
        label = 1 if order[i] < n_mal else 0
        rel = f"images/img_{i:05d}.ppm"
        pixels = blob_image(label, size, derive_seed(seed, 2, i))
        atomic_write_bytes(root / rel, encode_ppm(pixels))
        samples.append(ImageSample(rel, label, "mel" if label else "nv", root / rel))
    manifest = root / "manifest.csv"
    write_manifest(manifest, samples)
    return manifest
