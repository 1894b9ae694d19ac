"""Seeded generator of grayscale images with planted patterns and exact boxes.

Each of the four classes has a distinct pattern family: a broad blob, a
ring, an elongated bar, and a small nodule-like spot (<= 5 px support).
Positive classes plant one or, for a configurable fraction of images,
two instances; the second instance is dimmed to 0.7 of the first so the
stronger one dominates the initial saliency map.  Ground-truth boxes are
tight around each pattern's half-max support.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["DatasetConfig", "generate_dataset", "write_image_pgm", "read_image_pgm"]

PATTERN_NAMES = ["blob", "ring", "bar", "nodule"]
SECOND_INSTANCE_RATIO = 0.7


@dataclass
class DatasetConfig:
    image_size: int = 64
    num_classes: int = 4
    multi_instance_fraction: float = 0.0
    background_amplitude: float = 0.08
    present_prob: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.multi_instance_fraction <= 1.0):
            raise ValueError("multi_instance_fraction must lie in [0, 1]")
        if self.num_classes < 1 or self.num_classes > len(PATTERN_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(PATTERN_NAMES)}]")


def _render_pattern(size, kind, cx, cy, amplitude):
    """Render one pattern instance; returns (image_delta, half-max bbox)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "blob":
        field_ = np.exp(-(dx**2 + dy**2) / (2 * 4.0**2))
    elif kind == "ring":
        r = np.sqrt(dx**2 + dy**2)
        field_ = np.exp(-((r - 10.0) ** 2) / (2 * 1.3**2))
    elif kind == "bar":
        field_ = np.exp(-(dx**2) / (2 * 16.0**2) - (dy**2) / (2 * 1.1**2))
    elif kind == "nodule":
        field_ = np.exp(-(dx**2 + dy**2) / (2 * 1.0**2))
    else:
        raise ValueError(f"unknown pattern kind {kind!r}")
    field_ = field_ * amplitude
    support = field_ >= field_.max() / 2.0
    ii, jj = np.nonzero(support)
    box = [int(jj.min()), int(ii.min()), int(jj.max() - jj.min() + 1), int(ii.max() - ii.min() + 1)]
    return field_, box


def _background(rng, size, amplitude):
    """Smooth low-frequency noise field in [0, amplitude]."""
    coarse = rng.uniform(0.0, 1.0, size=(8, 8))
    # Bilinear blow-up of the coarse grid to full resolution.
    xs = np.linspace(0, 7, size)
    i0 = np.clip(np.floor(xs).astype(int), 0, 6)
    f = xs - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    field_ = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return field_ * amplitude


def _margin(kind):
    # Keep pattern support away from the border.
    return {"blob": 8, "ring": 14, "bar": 20, "nodule": 4}[kind]


def _separated(kind, a, b):
    """Instance placement rule: keep two instances' supports disjoint."""
    d2 = (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2
    if kind == "bar":
        # bars span nearly the full width; only vertical offset separates them
        return abs(a[1] - b[1]) > 10.0
    min_dist = {"blob": 16.0, "ring": 24.0, "nodule": 10.0}[kind]
    return d2 > min_dist**2


def generate_image(rng, config: DatasetConfig, force_multi=False):
    """One image: (pixels in [0,1], labels, per-class GT boxes)."""
    size = config.image_size
    img = _background(rng, size, config.background_amplitude)
    labels = np.zeros(config.num_classes, dtype=int)
    boxes = {c: [] for c in range(config.num_classes)}
    present = [
        c for c in range(config.num_classes) if rng.random() < config.present_prob
    ]
    if not present:
        present = [int(rng.integers(config.num_classes))]
    for c in present:
        kind = PATTERN_NAMES[c]
        labels[c] = 1
        n_inst = 2 if force_multi else 1
        m = _margin(kind)
        centers = []
        for inst in range(n_inst):
            for _ in range(200):
                cx = float(rng.uniform(m, size - 1 - m))
                cy = float(rng.uniform(m, size - 1 - m))
                if all(
                    _separated(kind, (cx, cy), prev) for prev in centers
                ):
                    break
            centers.append((cx, cy))
            amp = 0.9 if inst == 0 else 0.9 * SECOND_INSTANCE_RATIO
            delta, box = _render_pattern(size, kind, cx, cy, amp)
            img = img + delta
            boxes[c].append(box)
    img = np.clip(img, 0.0, 1.0)
    return img, labels, boxes


def generate_dataset(seed, count, config: DatasetConfig):
    """Deterministic dataset: (images (count, S, S), manifest records).

    Roughly multi_instance_fraction of the images carry two instances of
    each present class; which images is decided by a seeded draw.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.empty((count, config.image_size, config.image_size))
    manifest = []
    for idx in range(count):
        multi = rng.random() < config.multi_instance_fraction
        img, labels, boxes = generate_image(rng, config, force_multi=multi)
        images[idx] = img
        image_id = f"img{idx:04d}"
        for c in range(config.num_classes):
            manifest.append(
                {
                    "image_id": image_id,
                    "class": c,
                    "boxes": boxes[c],
                    "labels": labels.tolist(),
                }
            )
    return images, manifest


def write_image_pgm(path, image):
    """8-bit grayscale binary PGM from a [0,1] image."""
    q = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode())
        f.write(q.tobytes())


def read_image_pgm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM: {magic!r}")
        cols, rows = map(int, f.readline().split())
        maxval = int(f.readline())
        q = np.frombuffer(f.read(), dtype=np.uint8).reshape(rows, cols)
    return q.astype(np.float64) / maxval


def save_dataset(out_dir, images, manifest):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_dir = out_dir / "images"
    img_dir.mkdir(exist_ok=True)
    ids = sorted({rec["image_id"] for rec in manifest})
    for idx, image_id in enumerate(ids):
        write_image_pgm(img_dir / f"{image_id}.pgm", images[idx])
    with open(out_dir / "manifest.jsonl", "w") as f:
        for rec in manifest:
            f.write(json.dumps(rec) + "\n")


def load_dataset(data_dir):
    from .evalloc import read_ground_truth

    data_dir = Path(data_dir)
    manifest = read_ground_truth(data_dir / "manifest.jsonl")
    ids = sorted({rec["image_id"] for rec in manifest})
    images = np.stack(
        [read_image_pgm(data_dir / "images" / f"{iid}.pgm") for iid in ids]
    )
    labels = {}
    for rec in manifest:
        labels[rec["image_id"]] = rec["labels"]
    label_matrix = np.array([labels[iid] for iid in ids], dtype=np.float64)
    return ids, images, label_matrix, manifest
