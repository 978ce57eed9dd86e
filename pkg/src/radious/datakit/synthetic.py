"""Synthetic radiograph-like shapes on a textured background."""

from __future__ import annotations

import numpy as np

from ..numkit import Tensor, bilinear_resize
from .dataset import ImageSample
from .palette import ClassPalette

SHAPE_NAMES = ["crown", "root", "implant", "restoration"]


def synthetic_palette() -> ClassPalette:
    return ClassPalette.from_names(SHAPE_NAMES)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(35, 95, size=(1, 6, 6))
    smooth = bilinear_resize(Tensor(coarse), size, size).data[0]
    ramp = np.linspace(-8, 8, size)[None, :] * rng.choice([-1.0, 1.0])
    return smooth + ramp + rng.normal(0, 6, size=(size, size))


def _draw(kind: int, grid_y, grid_x, cy, cx, r, rng):
    dy, dx = grid_y - cy, grid_x - cx
    if kind == 1:  # crown: wide ellipse
        region = (dx / r) ** 2 + (dy / (0.75 * r)) ** 2 <= 1.0
        value = np.full(dy.shape, 155.0)
    elif kind == 2:  # root: downward-tapering wedge
        t = (dy + r) / (2 * r)
        region = (t >= 0) & (t <= 1) & (np.abs(dx) <= 0.55 * r * (1.0 - 0.8 * t))
        value = np.full(dy.shape, 115.0)
    elif kind == 3:  # implant: threaded post
        region = (np.abs(dx) <= 0.45 * r) & (np.abs(dy) <= r)
        value = np.where((np.floor(dy / 3).astype(int) % 2) == 0, 225.0, 200.0)
    else:  # restoration: bright disc
        region = dx**2 + dy**2 <= (0.7 * r) ** 2
        value = np.full(dy.shape, 250.0)
    return region, value


def make_sample(rng: np.random.Generator, sid: str, size: int = 128, max_shapes: int = 3) -> ImageSample:
    image = _texture(rng, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    grid_y, grid_x = np.mgrid[0:size, 0:size].astype(np.float64)
    cell = size // 2
    k = int(rng.integers(1, max_shapes + 1))
    kinds = rng.choice(4, size=k, replace=False) + 1
    cells = rng.choice(4, size=k, replace=False)
    for kind, c in zip(kinds, cells):
        r = rng.uniform(0.30, 0.42) * cell
        cy = (c // 2) * cell + cell / 2 + rng.uniform(-0.1, 0.1) * cell
        cx = (c % 2) * cell + cell / 2 + rng.uniform(-0.1, 0.1) * cell
        region, value = _draw(int(kind), grid_y, grid_x, cy, cx, r, rng)
        image[region] = value[region] + rng.normal(0, 5, size=int(region.sum()))
        mask[region] = kind
    return ImageSample(sid, np.clip(np.rint(image), 0, 255).astype(np.uint8), mask, "opg")


def make_dataset(n: int, size: int = 128, seed: int = 0, max_shapes: int = 3) -> list[ImageSample]:
    rng = np.random.default_rng(seed)
    return [make_sample(rng, f"syn{i:04d}", size, max_shapes) for i in range(n)]
