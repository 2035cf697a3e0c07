"""Synthetic Gaussian-blob image classes for pipeline validation.

Each class is a bright blob at a class-specific position with a
class-specific width, plus jitter, amplitude variation and pixel noise.
Classes are separable from raw pixels, so any reasonable classifier on
28x28 inputs learns them quickly.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset


def make_blob_dataset(num_classes: int, samples: int, seed: int, hw: int = 28, split: str = "train") -> Dataset:
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if samples < num_classes:
        raise ValueError(f"need at least one sample per class, got {samples}")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes + 0.3
    radius = hw * 0.28
    centers_r = hw / 2.0 + radius * np.sin(angles)
    centers_c = hw / 2.0 + radius * np.cos(angles)
    widths = 2.0 + 1.0 * (np.arange(num_classes) % 3) / 2.0

    labels = (np.arange(samples) % num_classes).astype(np.uint16)
    rows = np.arange(hw).reshape(-1, 1)
    cols = np.arange(hw).reshape(1, -1)
    images = np.empty((samples, hw, hw, 1), dtype=np.uint8)
    for i, c in enumerate(labels):
        cr = centers_r[c] + rng.uniform(-1.5, 1.5)
        cc = centers_c[c] + rng.uniform(-1.5, 1.5)
        amp = rng.uniform(150.0, 255.0)
        blob = amp * np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2.0 * widths[c] ** 2))
        blob += rng.normal(0.0, 6.0, size=(hw, hw))
        images[i, :, :, 0] = np.clip(blob, 0.0, 255.0).astype(np.uint8)

    order = rng.permutation(samples)
    return Dataset(images[order], labels[order], num_classes, split)
