"""Query-based mask decoder with masked cross-attention.

A top-down pixel decoder turns the multi-scale backbone features into
per-pixel embeddings at 1/4 resolution plus three memory maps. Learned queries
then attend to one memory scale per layer (coarsest first), each layer only
looking inside the foreground of the mask the previous layer predicted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import AdapterBackbone, BackboneConfig
from .errors import CapacityError
from .matching import linear_sum_assignment
from .numkit import Tensor, no_grad, ops
from .numkit.nn import MLP, Attention, Conv2d, LayerNorm, Linear, Module, parameter, trunc_normal
from .numkit.ops import _sigmoid


@dataclass
class DecoderConfig:
    num_queries: int = 20
    num_classes: int = 33
    rounds: int = 1
    num_layers: int | None = None
    num_scales: int = 3
    hidden_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    mask_threshold: float = 0.5
    background_floor: float = 0.25
    masked_attention: bool = True
    class_weight: float = 2.0
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    no_object_weight: float = 0.1

    def __post_init__(self):
        if self.num_layers is None:
            self.num_layers = self.num_scales * self.rounds
        if self.num_layers % self.num_scales:
            raise ValueError(f"num_layers {self.num_layers} must be a multiple of {self.num_scales} scales")
        if self.num_queries < 1:
            raise ValueError("num_queries must be at least 1")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")


@dataclass
class SegmentationOutput:
    """Per-query class logits (``... x N_q x (C+1)``, last = no object) and mask logits.

    ``attn_mask`` records the attention mask the producing layer was given
    (``None`` for the initial prediction or when masking is disabled).
    """

    class_logits: Tensor
    mask_logits: Tensor
    attn_mask: np.ndarray | None = field(default=None, repr=False)

    def select(self, b: int) -> "SegmentationOutput":
        am = None if self.attn_mask is None else self.attn_mask[b]
        return SegmentationOutput(self.class_logits[b], self.mask_logits[b], am)


# -- pixel decoder -----------------------------------------------------------------

class PixelDecoder(Module):
    """Feature-pyramid top-down pathway ending in 1/4-resolution embeddings."""

    def __init__(self, d_in: int, d: int, num_scales: int, rng: np.random.Generator):
        self.lateral = [Conv2d(d_in, d, 1, rng) for _ in range(num_scales)]
        self.output = [Conv2d(d, d, 3, rng, pad=1) for _ in range(num_scales)]
        self.mask_proj = Conv2d(d, d, 1, rng)

    def __call__(self, ms: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
        """``ms`` is ordered fine to coarse; memory comes back coarse to fine."""
        memory = []
        y = None
        for i in reversed(range(len(ms))):
            lat = self.lateral[i](ms[i])
            if y is not None:
                lat = lat + ops.bilinear_resize(y, *lat.shape[-2:])
            y = ops.gelu(self.output[i](lat))
            memory.append(y)
        h, w = y.shape[-2:]
        per_pixel = self.mask_proj(ops.bilinear_resize(y, 2 * h, 2 * w))
        return per_pixel, memory


def pixel_decode(ms: list[Tensor], decoder: PixelDecoder) -> tuple[Tensor, list[Tensor]]:
    single = ms[0].ndim == 3
    if single:
        ms = [ops.reshape(m, (1, *m.shape)) for m in ms]
    per_pixel, memory = decoder(ms)
    if single:
        return per_pixel[0], [m[0] for m in memory]
    return per_pixel, memory


# -- masked attention --------------------------------------------------------------

def rescue_empty_rows(allowed: np.ndarray) -> np.ndarray:
    """Rows with no allowed position are opened up entirely."""
    allowed = np.array(allowed, dtype=bool)
    empty = ~allowed.any(axis=-1)
    allowed[empty] = True
    return allowed


def masked_attention(queries: Tensor, memory: Tensor, attn_mask: np.ndarray, return_weights: bool = False):
    """Scaled dot-product attention where ``attn_mask[q, m]`` true means attend allowed."""
    allowed = rescue_empty_rows(attn_mask)
    logits = ops.matmul(queries, ops.swapaxes(memory, -1, -2)) * (1.0 / math.sqrt(queries.shape[-1]))
    weights = ops.masked_softmax(logits, allowed, axis=-1)
    out = ops.matmul(weights, memory)
    return (out, weights) if return_weights else out


def sine_positions(h: int, w: int, d: int, dtype=np.float64) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding, ``(h*w) x d``."""
    quarter = d // 4
    freq = 1.0 / (10000 ** (np.arange(quarter) / max(quarter, 1)))
    ys = (np.arange(h) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2 * np.pi
    py = ys[:, None] * freq[None]
    px = xs[:, None] * freq[None]
    enc = np.zeros((h, w, d))
    enc[:, :, 0:quarter] = np.sin(py)[:, None]
    enc[:, :, quarter:2 * quarter] = np.cos(py)[:, None]
    enc[:, :, 2 * quarter:3 * quarter] = np.sin(px)[None]
    enc[:, :, 3 * quarter:4 * quarter] = np.cos(px)[None]
    return enc.reshape(h * w, d).astype(dtype)


class DecoderLayer(Module):
    def __init__(self, d: int, heads: int, ffn: int, rng: np.random.Generator):
        self.cross_attn = Attention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.self_attn = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = MLP(d, ffn, d, rng)
        self.norm3 = LayerNorm(d)

    def __call__(self, q: Tensor, qpos: Tensor, mem: Tensor, mem_pos: Tensor, allowed: np.ndarray | None) -> Tensor:
        q = self.norm1(q + self.cross_attn(q + qpos, mem + mem_pos, mem, allowed=allowed))
        qq = q + qpos
        q = self.norm2(q + self.self_attn(qq, qq, q))
        return self.norm3(q + self.ffn(q))


class MaskedDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        d = cfg.hidden_dim
        self.cfg = cfg
        self.query_feat = parameter(trunc_normal(rng, (cfg.num_queries, d), 1.0))
        self.query_pos = parameter(trunc_normal(rng, (cfg.num_queries, d), 1.0))
        self.level_embed = parameter(trunc_normal(rng, (cfg.num_scales, d)))
        self.layers = [DecoderLayer(d, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.num_layers)]
        self.norm = LayerNorm(d)
        self.class_head = Linear(d, cfg.num_classes + 1, rng)
        self.mask_head = MLP(d, d, d, rng, layers=3)

    def heads(self, q: Tensor, per_pixel: Tensor) -> tuple[Tensor, Tensor]:
        h = self.norm(q)
        class_logits = self.class_head(h)
        emb = self.mask_head(h)
        b, d, hh, ww = per_pixel.shape
        masks = ops.matmul(emb, ops.reshape(per_pixel, (b, d, hh * ww)))
        return class_logits, ops.reshape(masks, (b, emb.shape[1], hh, ww))

    def attention_mask(self, mask_logits: Tensor, h: int, w: int) -> np.ndarray:
        """Threshold of the previous masks, bilinearly resized to a memory scale."""
        small = ops.bilinear_resize(Tensor(mask_logits.data), h, w).data
        allowed = _sigmoid(small) > self.cfg.mask_threshold
        b, nq = allowed.shape[:2]
        return rescue_empty_rows(allowed.reshape(b, nq, h * w))

    def __call__(self, memory: list[Tensor], per_pixel: Tensor) -> list[SegmentationOutput]:
        cfg = self.cfg
        b = per_pixel.shape[0]
        q = ops.mul(Tensor(np.ones((b, 1, 1), dtype=per_pixel.dtype)), self.query_feat)
        mem_flat, mem_pos = [], []
        for lvl, m in enumerate(memory):
            _, d, h, w = m.shape
            mem_flat.append(ops.swapaxes(ops.reshape(m, (b, d, h * w)), 1, 2))
            mem_pos.append(self.level_embed[lvl] + Tensor(sine_positions(h, w, d, m.dtype)))
        class_logits, mask_logits = self.heads(q, per_pixel)
        outputs = [SegmentationOutput(class_logits, mask_logits)]
        for i, layer in enumerate(self.layers):
            lvl = i % cfg.num_scales
            h, w = memory[lvl].shape[-2:]
            allowed = self.attention_mask(mask_logits, h, w) if cfg.masked_attention else None
            q = layer(q, self.query_pos, mem_flat[lvl], mem_pos[lvl], allowed)
            class_logits, mask_logits = self.heads(q, per_pixel)
            outputs.append(SegmentationOutput(class_logits, mask_logits, allowed))
        return outputs


def decoder_forward(ms_memory: list[Tensor], per_pixel: Tensor, cfg: DecoderConfig, weights: MaskedDecoder) -> list[SegmentationOutput]:
    single = per_pixel.ndim == 3
    if single:
        per_pixel = ops.reshape(per_pixel, (1, *per_pixel.shape))
        ms_memory = [ops.reshape(m, (1, *m.shape)) for m in ms_memory]
    outs = weights(ms_memory, per_pixel)
    return [o.select(0) for o in outs] if single else outs


# -- matching and losses ----------------------------------------------------------------

def gt_segments(mask: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """One binary segment per foreground class present in a label mask."""
    return [(int(c), mask == c) for c in np.unique(mask) if c != 0]


def _fit_masks(gt, h: int, w: int) -> np.ndarray:
    if not gt:
        return np.zeros((0, h, w))
    masks = np.stack([np.asarray(m, dtype=np.float64) for _, m in gt])
    if masks.shape[-2:] != (h, w):
        masks = ops.resize_nearest(masks, h, w)
    return masks


def match_cost_matrix(out: SegmentationOutput, gt, cfg: DecoderConfig) -> np.ndarray:
    """``N_q x |gt|`` cost: -class prob, mean pixel BCE and Dice, weighted."""
    logits = out.class_logits.data.astype(np.float64)
    ml = out.mask_logits.data.astype(np.float64)
    nq, h, w = ml.shape
    targets = _fit_masks(gt, h, w).reshape(len(gt), h * w)
    x = ml.reshape(nq, h * w)
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    cls = -probs[:, [c - 1 for c, _ in gt]]
    bce = (np.logaddexp(0.0, x).sum(axis=1, keepdims=True) - x @ targets.T) / (h * w)
    sig = _sigmoid(x)
    dice = 1.0 - (2.0 * sig @ targets.T + 1.0) / (sig.sum(axis=1)[:, None] + targets.sum(axis=1)[None, :] + 1.0)
    return cfg.class_weight * cls + cfg.bce_weight * bce + cfg.dice_weight * dice


def hungarian_match(out: SegmentationOutput, gt, cfg: DecoderConfig) -> list[tuple[int, int]]:
    """Optimal one-to-one (query, gt index) pairs."""
    nq = out.class_logits.shape[0]
    if len(gt) > nq:
        raise CapacityError(f"{len(gt)} ground-truth segments exceed {nq} queries")
    if not gt:
        return []
    cost = match_cost_matrix(out, gt, cfg)
    rows, cols = linear_sum_assignment(cost.T)
    return sorted((int(q), int(g)) for g, q in zip(rows, cols))


def dice_loss(mask_logits: Tensor, targets: np.ndarray) -> Tensor:
    """Soft Dice per segment (last two axes), ``1 - (2 s.t + 1) / (s + t + 1)``."""
    s = ops.sigmoid(mask_logits)
    t = np.asarray(targets, dtype=mask_logits.dtype)
    num = (s * t).sum(axis=(-2, -1)) * 2.0 + 1.0
    den = s.sum(axis=(-2, -1)) + t.sum(axis=(-2, -1)) + 1.0
    return 1.0 - num / den


def training_loss(outputs: list[SegmentationOutput], gts: list[list], cfg: DecoderConfig) -> Tensor:
    """Deep-supervised matched loss over every decoder output.

    ``outputs`` are batched; ``gts[b]`` lists (palette id, binary mask) for image b.
    """
    total = None
    for out in outputs:
        b, nq, c1 = out.class_logits.shape
        h, w = out.mask_logits.shape[-2:]
        targets = np.full((b, nq), c1 - 1, dtype=int)
        bi, qi, gt_masks = [], [], []
        for i in range(b):
            pairs = hungarian_match(out.select(i), gts[i], cfg)
            fitted = _fit_masks(gts[i], h, w)
            for q, g in pairs:
                targets[i, q] = gts[i][g][0] - 1
                bi.append(i)
                qi.append(q)
                gt_masks.append(fitted[g])
        weights = np.ones(c1)
        weights[-1] = cfg.no_object_weight
        loss = ops.cross_entropy(out.class_logits, targets, weights) * cfg.class_weight
        if bi:
            picked = out.mask_logits[np.array(bi), np.array(qi)]
            t = np.stack(gt_masks)
            bce = ops.bce_with_logits(picked, t).mean()
            dice = dice_loss(picked, t).mean()
            loss = loss + bce * cfg.bce_weight + dice * cfg.dice_weight
        total = loss if total is None else total + loss
    return total


# -- inference --------------------------------------------------------------------

def semantic_scores(out: SegmentationOutput) -> np.ndarray:
    """``C x h x w`` scores: sum over queries of p_q(c) * sigmoid(mask_q)."""
    logits = out.class_logits.data.astype(np.float64)
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    sig = _sigmoid(out.mask_logits.data.astype(np.float64))
    return np.einsum("qc,qhw->chw", probs[:, :-1], sig)


def semantic_inference(out: SegmentationOutput, full_h: int, full_w: int, background_floor: float = 0.25) -> np.ndarray:
    """Per-pixel palette ids at ``full_h x full_w``; weak pixels fall back to background (0)."""
    scores = semantic_scores(out)
    labels = scores.argmax(axis=0) + 1
    labels[scores.max(axis=0) < background_floor] = 0
    return ops.resize_nearest(labels, full_h, full_w).astype(np.int64)


# -- full model --------------------------------------------------------------------

class SegmentationModel(Module):
    """Adapter backbone, pixel decoder and masked-attention decoder."""

    def __init__(self, bcfg: BackboneConfig, dcfg: DecoderConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        if dcfg.num_scales != len(bcfg.scales):
            raise ValueError("decoder scale count must match backbone scales")
        self.bcfg = bcfg
        self.dcfg = dcfg
        self.backbone = AdapterBackbone(bcfg, rng)
        self.pixel_decoder = PixelDecoder(bcfg.embed_dim, dcfg.hidden_dim, dcfg.num_scales, rng)
        self.decoder = MaskedDecoder(dcfg, rng)

    def trainable(self) -> list[tuple[str, Tensor]]:
        """Parameters that take part in segmentation (the MIM mask token does not)."""
        return [(n, p) for n, p in self.named_parameters() if not n.endswith("mask_token")]

    def __call__(self, images) -> list[SegmentationOutput]:
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim == 3:
            images = ops.reshape(images, (1, *images.shape))
        ms = self.backbone(images)
        per_pixel, memory = self.pixel_decoder(ms)
        return self.decoder(memory, per_pixel)

    def predict(self, images) -> np.ndarray:
        """``B x H x W`` palette-id maps."""
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim == 3:
            images = ops.reshape(images, (1, *images.shape))
        with no_grad():
            final = self(images)[-1]
        h, w = images.shape[-2:]
        return np.stack([
            semantic_inference(final.select(b), h, w, self.dcfg.background_floor) for b in range(images.shape[0])
        ])
