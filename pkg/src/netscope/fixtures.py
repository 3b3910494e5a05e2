"""Procedural image datasets for offline runs and tests.

``gratings`` draws colored sinusoidal gratings whose class is the grating
orientation, so a small network trained on them develops oriented,
color-tuned first-layer filters.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Dataset
from .imageio import write_ppm
from .rng import stream


def gratings(n: int, size: int = 32, num_classes: int = 4, seed: int = 0, noise: float = 0.05,
             split: str = "train") -> Dataset:
    images = np.empty((n, 3, size, size), np.float32)
    labels = np.empty(n, np.int64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) - (size - 1) / 2
    for k in range(n):
        rng = stream(seed, k)
        label = k % num_classes
        theta = np.pi * label / num_classes + rng.uniform(-0.12, 0.12)
        freq = rng.uniform(0.12, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        envelope = np.exp(-(xx**2 + yy**2) / (2 * (size * rng.uniform(0.25, 0.6)) ** 2))
        fg, bg = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        t = 0.5 + 0.5 * wave * envelope
        img = fg[:, None, None] * t + bg[:, None, None] * (1 - t)
        img += rng.normal(0, noise, img.shape)
        images[k] = np.clip(img, 0, 1)
        labels[k] = label
    ids = [f"{split}{k:05d}" for k in range(n)]
    return Dataset(ids, images, labels, split, num_classes)


def write_ppm_dataset(ds: Dataset, directory) -> Path:
    """Write one PPM per image plus ``manifest.tsv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for ident, img, label in zip(ds.ids, ds.images, ds.labels):
        rel = f"images/{ident}.ppm"
        write_ppm(directory / rel, img)
        lines.append(f"{ident}\t{rel}\t{int(label)}")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest
