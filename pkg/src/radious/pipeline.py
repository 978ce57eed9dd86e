"""Pre-training, fine-tuning and evaluation loops shared by the CLI."""

from __future__ import annotations

import dataclasses
import functools
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backbone import BeitPretrainer, VisualCodebook, fit_codebook, image_patches, tokenize
from .config import RunConfig
from .datakit import ImageSample, resize_sample
from .datakit.palette import ClassPalette
from .decoder import SegmentationModel, gt_segments, training_loss
from .errors import CapacityError, ConfigError, DegenerateEvaluationError
from .metrics import ConfusionMatrix
from .numkit import SGD, Tensor, gradient, default_dtype, no_grad, ops
from .numkit.ops import resize_nearest

log = logging.getLogger(__name__)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def normalize(images: np.ndarray, dtype) -> np.ndarray:
    """uint8 ``... x H x W`` -> standardised float ``... x 1 x H x W``."""
    x = (images.astype(np.float64) / 255.0 - PIXEL_MEAN) / PIXEL_STD
    return x[..., None, :, :].astype(dtype)


def apply_precision(cfg: RunConfig):
    return np.float32 if cfg.precision == "float32" else np.float64


def scoped_precision(fn):
    """Run ``fn`` with the default dtype of its RunConfig argument, restored on exit."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        cfg = next(a for a in (*args, *kwargs.values()) if isinstance(a, RunConfig))
        with default_dtype(apply_precision(cfg)):
            return fn(*args, **kwargs)

    return wrapper


def resolve_decoder(cfg: RunConfig, palette: ClassPalette) -> RunConfig:
    """Fill ``decoder.num_classes`` from the palette when left unset."""
    if cfg.decoder.num_classes is None:
        cfg.decoder = dataclasses.replace(cfg.decoder, num_classes=palette.num_foreground)
    elif cfg.decoder.num_classes != palette.num_foreground:
        raise ConfigError(f"decoder.num_classes={cfg.decoder.num_classes} but palette has {palette.num_foreground} foreground classes")
    return cfg


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    if not max_norm:
        return grads
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if norm <= max_norm:
        return grads
    scale = max_norm / (norm + 1e-12)
    return [g * scale for g in grads]


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


# -- pre-training --------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: BeitPretrainer
    codebook: VisualCodebook
    losses: list[float] = field(default_factory=list)


@scoped_precision
def pretrain(cfg: RunConfig, samples: list[ImageSample], on_epoch: Callable[[int, float], None] | None = None) -> PretrainResult:
    """Fit the visual codebook, then train encoder + token head on masked patches."""
    dtype = apply_precision(cfg)
    pc = cfg.pretrain
    h, w = pc.image_size
    bcfg = dataclasses.replace(cfg.backbone, img_size=(h, w))
    resized = [resize_sample(s, w, h).image for s in samples]
    patches = np.concatenate([image_patches(img, bcfg.patch_size) for img in resized])
    rng = np.random.default_rng(cfg.seed)
    if len(patches) > pc.codebook_patches:
        patches_fit = patches[np.sort(rng.choice(len(patches), pc.codebook_patches, replace=False))]
    else:
        patches_fit = patches
    codebook = fit_codebook(patches_fit, pc.codebook_size, seed=cfg.seed)
    tokens = np.stack([tokenize(image_patches(img, bcfg.patch_size), codebook) for img in resized])
    images = normalize(np.stack(resized), dtype)

    model = BeitPretrainer(bcfg, codebook.size, np.random.default_rng(cfg.seed))
    params = model.parameters()
    opt = SGD(params, lr=pc.lr, momentum=pc.momentum)
    losses = []
    step = 0
    for epoch in range(pc.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(images), pc.batch_size, rng):
            loss = model.loss(images[idx], tokens[idx], pc.mask_ratio, seed=cfg.seed * 1_000_003 + step)
            grads = clip_gradients(gradient(loss, params), cfg.train.grad_clip)
            opt.step(grads)
            total += loss.item() * len(idx)
            count += len(idx)
            step += 1
        losses.append(total / count)
        log.info("pretrain epoch %d mim_loss %.5f", epoch + 1, losses[-1])
        if on_epoch:
            on_epoch(epoch + 1, losses[-1])
    return PretrainResult(model, codebook, losses)


@scoped_precision
def mim_loss_on(model: BeitPretrainer, cfg: RunConfig, samples: list[ImageSample], codebook: VisualCodebook, seed: int) -> float:
    """Masked-token loss of ``model`` on ``samples`` with a fixed mask draw."""
    dtype = apply_precision(cfg)
    h, w = cfg.pretrain.image_size
    resized = [resize_sample(s, w, h).image for s in samples]
    tokens = np.stack([tokenize(image_patches(img, model.vit.cfg.patch_size), codebook) for img in resized])
    with no_grad():
        return model.loss(normalize(np.stack(resized), dtype), tokens, cfg.pretrain.mask_ratio, seed).item()


# -- fine-tuning -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SegmentationModel
    losses: list[float] = field(default_factory=list)


@scoped_precision
def build_model(cfg: RunConfig) -> SegmentationModel:
    h, w = cfg.train.image_size
    bcfg = dataclasses.replace(cfg.backbone, img_size=(h, w))
    return SegmentationModel(bcfg, cfg.decoder, seed=cfg.seed)


def load_pretrained_encoder(model: SegmentationModel, state: dict[str, np.ndarray]) -> int:
    """Copy ``vit.*`` tensors of a pre-training state into the backbone; returns the count."""
    own = dict(model.named_parameters())
    copied = 0
    for name, arr in state.items():
        if not name.startswith("vit."):
            continue
        target = own.get("backbone." + name)
        if target is None:
            continue
        if name.endswith("pos_embed") and arr.shape != target.shape:
            # re-grid positional embeddings to the fine-tuning resolution
            src_grid = _grid_of(arr.shape[0], model.bcfg.patch_size)
            d = arr.shape[1]
            grid = ops.bilinear_resize(Tensor(arr.T.reshape(d, *src_grid)), *model.bcfg.grid).data
            arr = grid.reshape(d, -1).T
        target.data = np.asarray(arr, dtype=target.data.dtype).reshape(target.shape).copy()
        copied += 1
    return copied


def _grid_of(n: int, patch: int) -> tuple[int, int]:
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ValueError(f"cannot infer a square token grid from {n} positions")
    return side, side


def prepare_segmentation(samples: list[ImageSample], size: tuple[int, int]):
    h, w = size
    resized = [resize_sample(s, w, h) for s in samples]
    return np.stack([s.image for s in resized]), np.stack([s.mask for s in resized])


@scoped_precision
def train(cfg: RunConfig, samples: list[ImageSample], model: SegmentationModel | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    dtype = apply_precision(cfg)
    tc = cfg.train
    model = model or build_model(cfg)
    images, masks = prepare_segmentation(samples, tc.image_size)
    for s, m in zip(samples, masks):
        n = len(gt_segments(m))
        if n > cfg.decoder.num_queries:
            raise CapacityError(f"sample {s.id}: {n} ground-truth segments exceed {cfg.decoder.num_queries} queries")
    x_all = normalize(images, dtype)
    named = model.trainable()
    params = [p for _, p in named]
    opt = SGD(params, lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    losses = []
    for epoch in range(tc.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(x_all), tc.batch_size, rng):
            x, m = x_all[idx], masks[idx]
            if tc.online_flip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[..., ::-1], x)
                m = np.where(flip[:, None, None], m[..., ::-1], m)
            gts = [gt_segments(mm) for mm in m]
            loss = training_loss(model(x), gts, model.dcfg)
            grads = clip_gradients(gradient(loss, params), tc.grad_clip)
            opt.step(grads)
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        log.info("train epoch %d loss %.5f", epoch + 1, losses[-1])
        if on_epoch:
            on_epoch(epoch + 1, losses[-1])
    return TrainResult(model, losses)


# -- evaluation ---------------------------------------------------------------------------

@scoped_precision
def predict_samples(model: SegmentationModel, cfg: RunConfig, samples: list[ImageSample], batch_size: int = 8) -> list[np.ndarray]:
    """Palette-id maps at each sample's own resolution."""
    dtype = apply_precision(cfg)
    h, w = cfg.train.image_size
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images, _ = prepare_segmentation(chunk, (h, w))
        preds = model.predict(normalize(images, dtype))
        for s, p in zip(chunk, preds):
            out.append(resize_nearest(p, s.height, s.width) if p.shape != s.mask.shape else p)
    return out


def evaluate(model: SegmentationModel, cfg: RunConfig, samples: list[ImageSample], num_classes: int) -> ConfusionMatrix:
    if not samples:
        raise DegenerateEvaluationError("evaluation split is empty")
    cm = ConfusionMatrix(num_classes)
    for s, pred in zip(samples, predict_samples(model, cfg, samples)):
        cm = cm.accumulate(pred, s.mask)
    return cm
