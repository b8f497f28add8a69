"""Synthetic shape dataset and PNG-directory datasets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .imagecore import FormatError, InvalidInputError, SeedStream, load_png, save_png

SHAPES = ("circle", "square", "triangle", "cross", "ring")
# hue families; class = shape index + 5 * palette index
PALETTES = (
    np.array([[0.9, 0.15, 0.1], [0.95, 0.55, 0.05], [0.9, 0.85, 0.1]]),
    np.array([[0.1, 0.3, 0.95], [0.05, 0.75, 0.3], [0.1, 0.8, 0.85]]),
)


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 - 0.5 + rng.uniform(-4, 4)
    cx = size / 2 - 0.5 + rng.uniform(-4, 4)
    r = rng.uniform(7.0, 11.0)
    theta = rng.uniform(-0.4, 0.4)
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "ring":
        d = np.sqrt(dx**2 + dy**2)
        return (d <= r) & (d >= r - 3.5)
    if kind == "square":
        s = r * 0.85
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if kind == "cross":
        arm = 2.2
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "triangle":
        # apex up, base at v = r/2
        top = -r
        base = r * 0.6
        half = (v - top) / (base - top) * r
        return (v >= top) & (v <= base) & (np.abs(u) <= half)
    raise ValueError(kind)


# Rendering constants. Shape fills are flat colors at 3-bit level centers
# (poster-like), backgrounds are smooth gradients with mild sensor noise.
BACKGROUND_GRAY = (0.4, 0.8)
BACKGROUND_TINT = 0.05
BACKGROUND_SLOPE = 0.3
BACKGROUND_NOISE = 0.02
FILL_JITTER = 0.08
FILL_LEVELS = 7
FILL_NOISE = 0.01


def render_example(label: int, stream: SeedStream, size: int = 32) -> np.ndarray:
    """Render one image of class ``label`` from its own random stream."""
    rng = stream.generator()
    kind = SHAPES[label % len(SHAPES)]
    palette = PALETTES[label // len(SHAPES)]
    gray = rng.uniform(*BACKGROUND_GRAY)
    tint = rng.uniform(-BACKGROUND_TINT, BACKGROUND_TINT, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    slope = rng.uniform(-BACKGROUND_SLOPE, BACKGROUND_SLOPE, size=2)
    img = gray + tint + (slope[0] * yy + slope[1] * xx)[..., None]
    img = img + rng.normal(0.0, BACKGROUND_NOISE, size=(size, size, 3))
    color = palette[rng.integers(len(palette))] + rng.uniform(-FILL_JITTER, FILL_JITTER, size=3)
    color = np.round(np.clip(color, 0.0, 1.0) * FILL_LEVELS) / FILL_LEVELS
    mask = _shape_mask(kind, size, rng)
    img[mask] = color + rng.normal(0.0, FILL_NOISE, size=(int(mask.sum()), 3))
    img = np.clip(img, 0.0, 1.0)
    # stored at 8-bit precision so PNG export is lossless
    return (np.floor(img * 255 + 0.5) / 255).astype(np.float32)


def synthetic_dataset(num_classes: int = 10, per_class: int = 100, seed: int = 0, size: int = 32):
    """Return (images, labels); example i has label i % num_classes."""
    if not 2 <= num_classes <= len(SHAPES) * len(PALETTES):
        raise InvalidInputError(f"synthetic data supports 2..10 classes, got {num_classes}")
    root = SeedStream(seed, 0x5EED)
    n = num_classes * per_class
    labels = np.arange(n) % num_classes
    images = np.stack([render_example(int(labels[i]), root.child(i), size) for i in range(n)]) if n else np.zeros((0, size, size, 3), np.float32)
    return images, labels.astype(np.int64)


def write_dataset_dir(images, labels, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        for i, (img, lab) in enumerate(zip(images, labels)):
            name = f"img_{i:05d}.png"
            save_png(img, out / name)
            writer.writerow([name, int(lab)])


def load_dataset_dir(path, num_classes: Optional[int] = None):
    root = Path(path)
    label_file = root / "labels.csv"
    if not label_file.exists():
        raise FormatError(f"{label_file} not found")
    images, labels = [], []
    with open(label_file, newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(load_png(root / row["filename"]))
            labels.append(int(row["label"]))
    labels = np.asarray(labels, np.int64)
    if num_classes is not None and (np.any(labels < 0) or np.any(labels >= num_classes)):
        raise InvalidInputError("label out of range")
    if not images:
        raise InvalidInputError(f"dataset {root} is empty")
    return np.stack(images), labels


@dataclass(frozen=True)
class DatasetSpec:
    """Either a PNG directory with labels.csv or a synthetic generator."""

    directory: Optional[str] = None
    num_classes: int = 10
    per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidInputError("a dataset needs at least 2 classes")

    def resolve(self):
        if self.directory is not None:
            return load_dataset_dir(self.directory, self.num_classes)
        return synthetic_dataset(self.num_classes, self.per_class, self.seed)
