"""Synthetic three-class colour-blob scenes for desk-scale experiments.

Each image is a noisy grey background with one soft Gaussian blob whose
colour channel names the class, so the classes are separable from the
per-channel image means alone.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

BLOB_CLASSES = ("blob_blue", "blob_green", "blob_red")
_CHANNEL = {"blob_red": 0, "blob_green": 1, "blob_blue": 2}


def make_blobs(per_class: int = 100, size: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return uint8 images (N x size x size x 3) and labels in sorted-class order."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, labels = [], []
    for label, name in enumerate(BLOB_CLASSES):
        for _ in range(per_class):
            img = rng.uniform(0.35, 0.55) + rng.normal(0.0, 0.05, (size, size, 3))
            cy, cx = rng.uniform(0.25 * size, 0.75 * size, 2)
            radius = rng.uniform(0.12, 0.22) * size
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
            img[..., _CHANNEL[name]] += rng.uniform(0.35, 0.45) * blob
            images.append(np.clip(np.round(img * 255), 0, 255).astype(np.uint8))
            labels.append(label)
    return np.stack(images), np.array(labels)


def write_blobs(root, per_class: int = 100, size: int = 64, seed: int = 0) -> Path:
    """Write the blob set as ``<root>/<class>/<index>.png``."""
    root = Path(root)
    images, labels = make_blobs(per_class, size, seed)
    counters = dict.fromkeys(BLOB_CLASSES, 0)
    for img, label in zip(images, labels):
        name = BLOB_CLASSES[label]
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(d / f"{counters[name]:03d}.png", optimize=True)
        counters[name] += 1
    return root
