"""Uniform Distributed Augmentation: log-flattened per-class targets and the
geometric/photometric variants used to reach them."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..errors import EmptyDatasetError, ParameterError
from .dataset import ImageSample


@dataclass(frozen=True)
class AugmentationPlan:
    class_ids: tuple[int, ...]
    source_counts: tuple[int, ...]
    scores: tuple[float, ...]
    target_counts: tuple[int, ...]
    a: float
    b: float
    total_target: int

    def target_for(self, class_id: int) -> int:
        return self.target_counts[self.class_ids.index(class_id)]

    def rows(self):
        return list(zip(self.class_ids, self.source_counts, self.scores, self.target_counts))


def plan_augmentation(counts, a: float = 1.0, b: float = 1.0, total_target: int = 23000, class_ids=None) -> AugmentationPlan:
    """Targets proportional to ``log(b + a*f)`` summing to about ``total_target``.

    ``counts`` are per-class sample counts; ``class_ids`` labels them (default
    0..C-1). Rounding keeps the sum within one per class of ``total_target``.
    """
    counts = [int(c) for c in counts]
    if class_ids is None:
        class_ids = list(range(len(counts)))
    if a <= 0 or b < 1:
        raise ParameterError(f"need a > 0 and b >= 1, got a={a}, b={b}")
    if total_target <= 0:
        raise ParameterError(f"total_target must be positive, got {total_target}")
    if any(c < 0 for c in counts):
        raise ParameterError("class counts must be nonnegative")
    if not counts or all(c == 0 for c in counts):
        raise EmptyDatasetError("every class count is zero; nothing to augment")
    scores = [math.log(b + a * f) for f in counts]
    total = sum(scores)
    targets = [int(round(total_target * s / total)) for s in scores]
    # a class absent from the data cannot be augmented
    targets = [0 if f == 0 else t for f, t in zip(counts, targets)]
    return AugmentationPlan(tuple(int(c) for c in class_ids), tuple(counts), tuple(scores), tuple(targets), a, b, total_target)


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    brightness: float = 20.0
    contrast: float = 0.2


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    angle_deg: float
    brightness: float
    contrast: float


def sample_params(rng: np.random.Generator, cfg: AugmentConfig) -> AugmentParams:
    return AugmentParams(
        flip=bool(rng.random() < cfg.flip_prob),
        angle_deg=float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)),
        brightness=float(rng.uniform(-cfg.brightness, cfg.brightness)),
        contrast=float(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)),
    )


def source_coords(h: int, w: int, flip: bool, angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """For every output pixel, the (row, col) it is sampled from.

    The forward map rotates by ``angle_deg`` about the image centre and then
    mirrors horizontally when ``flip``.
    """
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if flip:
        xs = (w - 1) - xs
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if angle_deg == 0.0:
        return ys, xs
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    dy, dx = ys - cy, xs - cx
    return cy + c * dy - s * dx, cx + s * dy + c * dx


def _sample_nearest(arr: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    iy = np.clip(np.floor(sy + 0.5).astype(int), 0, h - 1)
    ix = np.clip(np.floor(sx + 0.5).astype(int), 0, w - 1)
    return arr[iy, ix]


def _sample_bilinear(arr: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    a = arr.astype(np.float64)
    return ((1 - fy) * (1 - fx) * a[y0, x0] + (1 - fy) * fx * a[y0, x1]
            + fy * (1 - fx) * a[y1, x0] + fy * fx * a[y1, x1])


def warp(s: ImageSample, params: AugmentParams, new_id: str | None = None) -> ImageSample:
    """Apply one geometric + photometric variant; the mask only sees the geometry."""
    sy, sx = source_coords(s.height, s.width, params.flip, params.angle_deg)
    if params.angle_deg == 0.0:
        image = s.image[sy.astype(int), sx.astype(int)].astype(np.float64)
    else:
        image = _sample_bilinear(s.image, sy, sx)
    mask = _sample_nearest(s.mask, sy, sx)
    mean = image.mean()
    image = params.contrast * (image - mean) + mean + params.brightness
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return replace(s, id=new_id or s.id, image=image, mask=mask.astype(s.mask.dtype))


def apply_augmentations(s: ImageSample, count: int, seed: int, cfg: AugmentConfig | None = None) -> list[ImageSample]:
    """``count`` random variants of ``s``; variant ``i`` depends only on (seed, i)."""
    if count < 0:
        raise ParameterError(f"count must be nonnegative, got {count}")
    cfg = cfg or AugmentConfig()
    out = []
    for i in range(count):
        params = sample_params(np.random.default_rng([seed, i]), cfg)
        out.append(warp(s, params, new_id=f"{s.id}__aug{i:05d}"))
    return out


def allocate(samples: list[ImageSample], plan: AugmentationPlan) -> list[int]:
    """How many output copies each sample contributes so class counts meet the plan.

    Greedy: serve the class with the largest remaining deficit using the sample
    that overshoots the fewest already-satisfied classes, preferring samples
    used least. Exact when every sample carries a single planned class.
    """
    ids = np.array(plan.class_ids)
    member = np.array([[c in s.classes() for c in plan.class_ids] for s in samples], dtype=bool).reshape(len(samples), len(ids))
    deficit = np.array(plan.target_counts, dtype=np.int64)
    uses = np.zeros(len(samples), dtype=np.int64)
    reachable = member.any(axis=0)
    deficit[~reachable] = 0
    order = np.arange(len(samples))
    while (deficit > 0).any():
        c = int(np.argmax(deficit))
        cand = np.flatnonzero(member[:, c])
        satisfied = deficit <= 0
        overshoot = member[cand][:, satisfied].sum(axis=1)
        pick = cand[np.lexsort((order[cand], uses[cand], overshoot))[0]]
        uses[pick] += 1
        deficit -= member[pick]
    return uses.tolist()


def realize_plan(samples: list[ImageSample], plan: AugmentationPlan, seed: int, cfg: AugmentConfig | None = None) -> list[ImageSample]:
    """Materialise the plan: each used sample keeps its original plus augmented variants."""
    out = []
    for idx, (s, n) in enumerate(zip(samples, allocate(samples, plan))):
        if n == 0:
            continue
        sample_seed = int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])
        out.append(s)
        out.extend(apply_augmentations(s, n - 1, sample_seed, cfg))
    return out
