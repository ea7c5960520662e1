"""Seeded toy radiograph-like dataset: dark noisy background with bright class-specific blobs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataio import AnnotatedSample, atomic_write, format_annotations


def _draw(canvas: np.ndarray, cls: int, x1: int, y1: int, x2: int, y2: int) -> None:
    h, w = y2 - y1, x2 - x1
    yy, xx = np.mgrid[0:h, 0:w]
    if cls == 0:  # round pore
        cy, cx = (h - 1) / 2, (w - 1) / 2
        mask = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    elif cls == 1:  # solid bar
        mask = np.ones((h, w), dtype=bool)
    else:  # hollow frame
        t = max(1, min(h, w) // 4)
        mask = (yy < t) | (yy >= h - t) | (xx < t) | (xx >= w - t)
    region = canvas[y1:y2, x1:x2]
    region[mask] = 0.9


def make_image(rng: np.random.Generator, size: int, num_classes: int, objects: int,
               min_frac: float = 0.2, max_frac: float = 0.45):
    canvas = 0.15 + 0.03 * rng.standard_normal((size, size))
    boxes, taken = [], []
    attempts = 0
    while len(boxes) < objects and attempts < 200:
        attempts += 1
        cls = int(rng.integers(num_classes))
        bw = int(rng.integers(int(min_frac * size), int(max_frac * size) + 1))
        bh = int(rng.integers(int(min_frac * size), int(max_frac * size) + 1))
        if cls == 1:
            bh = max(3, bw // 3)
        x1 = int(rng.integers(0, size - bw + 1))
        y1 = int(rng.integers(0, size - bh + 1))
        box = (x1, y1, x1 + bw, y1 + bh)
        if any(box[0] < t[2] + 2 and t[0] < box[2] + 2 and box[1] < t[3] + 2 and t[1] < box[3] + 2
               for t in taken):
            continue
        taken.append(box)
        _draw(canvas, cls, *box)
        boxes.append((cls, (x1 + bw / 2) / size, (y1 + bh / 2) / size, bw / size, bh / size))
    return np.clip(np.rint(canvas * 255), 0, 255).astype(np.uint8), boxes


def make_dataset(out_dir, n_images: int = 4, size: int = 64, num_classes: int = 3,
                 objects_per_image: int = 1, seed: int = 0) -> tuple[Path, list[AnnotatedSample]]:
    """Write PNGs, YOLO txt annotations and ``manifest.txt``; returns (manifest path, samples)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples, lines = [], []
    for k in range(n_images):
        pixels, boxes = make_image(rng, size, num_classes, objects_per_image)
        name = f"img_{k:03d}.png"
        Image.fromarray(pixels, mode="L").save(out / name)
        atomic_write(out / f"img_{k:03d}.txt", format_annotations(boxes).encode())
        samples.append(AnnotatedSample(out / name, boxes))
        lines.append(name)
    manifest = out / "manifest.txt"
    atomic_write(manifest, ("\n".join(lines) + "\n").encode())
    return manifest, samples
