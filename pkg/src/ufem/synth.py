"""Procedural CIFAR-scale image set ("shapes10").

Ten shape classes drawn at random position, scale, rotation and colour over
smooth textured backgrounds. It stands in for a natural 32x32 dataset so the
whole pipeline runs without downloads.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import save_image

CLASS_NAMES = ("disk", "square", "triangle", "ring", "plus",
               "hstripes", "vstripes", "cross", "twodisks", "frame")


def _smooth_field(rng: np.random.Generator, size: int, grid: int, channels: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(grid, grid, channels))
    zoom = (size / grid, size / grid, 1)
    return np.clip(ndimage.zoom(coarse, zoom, order=1, mode="nearest"), 0.0, 1.0)[:size, :size]


def _mask(label: int, u: np.ndarray, v: np.ndarray, s: float, px: float) -> np.ndarray:
    """Anti-aliased coverage in [0,1] from a signed distance (negative inside)."""
    r = np.hypot(u, v)
    if label == 0:
        d = r - s
    elif label == 1:
        d = np.maximum(np.abs(u), np.abs(v)) - 0.8 * s
    elif label == 2:
        # equilateral triangle, apex up
        k = np.sqrt(3.0)
        uu = np.abs(u)
        d = np.maximum(k * uu / 2 + v / 2, -v) - 0.45 * s
    elif label == 3:
        d = np.abs(r - 0.75 * s) - 0.22 * s
    elif label == 4:
        a = np.maximum(np.abs(u) - 0.28 * s, np.abs(v) - s)
        b = np.maximum(np.abs(v) - 0.28 * s, np.abs(u) - s)
        d = np.minimum(a, b)
    elif label in (5, 6):
        w = v if label == 5 else u
        period = 0.55 * s
        stripes = np.abs(np.mod(w, period) - period / 2) - period / 4
        box = np.maximum(np.abs(u), np.abs(v)) - s
        d = np.maximum(stripes, box)
    elif label == 7:
        p, q = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        a = np.maximum(np.abs(p) - 0.22 * s, np.abs(q) - s)
        b = np.maximum(np.abs(q) - 0.22 * s, np.abs(p) - s)
        d = np.minimum(a, b)
    elif label == 8:
        d = np.minimum(np.hypot(u - 0.5 * s, v) - 0.4 * s, np.hypot(u + 0.5 * s, v) - 0.4 * s)
    elif label == 9:
        d = np.abs(np.maximum(np.abs(u), np.abs(v)) - 0.7 * s) - 0.18 * s
    else:
        raise ValueError(f"label must be in 0..9, got {label}")
    return np.clip(0.5 - d / px, 0.0, 1.0)


def render(label: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One (size, size, 3) float image in [0, 1]."""
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    px = 2.0 / size

    bg_base = rng.uniform(0.1, 0.9, size=3)
    bg = 0.6 * bg_base + 0.4 * _smooth_field(rng, size, 4, 3)
    bg = bg + rng.normal(0.0, 0.04, size=(size, size, 3))

    lum_bg = bg.mean()
    while True:
        fg_col = rng.uniform(0.0, 1.0, size=3)
        if abs(fg_col.mean() - lum_bg) > 0.2:
            break
    fg = fg_col + 0.15 * (_smooth_field(rng, size, 8, 1) - 0.5) + rng.normal(0.0, 0.03, size=(size, size, 3))

    cx, cy = rng.uniform(-0.3, 0.3, size=2)
    s = rng.uniform(0.4, 0.65)
    # stripes keep their orientation; everything else rotates freely
    max_rot = 15.0 if label in (5, 6) else 180.0
    th = np.deg2rad(rng.uniform(-max_rot, max_rot))
    u = np.cos(th) * (x - cx) + np.sin(th) * (y - cy)
    v = -np.sin(th) * (x - cx) + np.cos(th) * (y - cy)
    m = _mask(label, u, v, s, px)[..., None]
    return np.clip(m * fg + (1.0 - m) * bg, 0.0, 1.0).astype(np.float32)


def make_dataset(n_per_class: int, seed: int, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """(N, size, size, 3) images and (N,) labels, classes interleaved."""
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(len(CLASS_NAMES)), n_per_class)
    images = np.stack([render(int(k), rng, size) for k in labels])
    return images, labels


def write_tree(root: str | Path, n_per_class: int, seed: int, size: int = 32) -> Path:
    """Write ``root/<label>/<index>.png`` for use with ``build_manifest``."""
    root = Path(root)
    images, labels = make_dataset(n_per_class, seed, size)
    for i, (img, lab) in enumerate(zip(images, labels)):
        save_image(root / str(int(lab)) / f"{i:05d}.png", img)
    return root
