"""Plain ViT encoder, masked-image-modeling pre-training pieces, and the adapter
(spatial prior module, injector, extractor) that turns it into a multi-scale
feature source."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CardinalityError, DegenerateBatchError, GeometryError
from .numkit import Tensor, ops
from .numkit.nn import MLP, Attention, Conv2d, LayerNorm, Linear, Module, parameter, trunc_normal


def evenly_spaced_points(depth: int, count: int) -> tuple[int, ...]:
    """Start indices of ``count`` block groups; 24 blocks / 5 points -> 0, 5, 10, 15, 20."""
    if count == 0:
        return ()
    if count > depth:
        raise ValueError(f"cannot place {count} interaction points in {depth} blocks")
    step = math.ceil(depth / count)
    return tuple(i * step for i in range(count))


@dataclass
class BackboneConfig:
    depth: int = 4
    embed_dim: int = 64
    heads: int = 4
    patch_size: int = 16
    num_interactions: int = 2
    interaction_points: tuple[int, ...] | None = None
    scales: tuple[int, ...] = (8, 16, 32)
    mlp_ratio: float = 4.0
    adapter_heads: int = 1
    img_size: tuple[int, int] = (128, 128)
    in_chans: int = 1

    def __post_init__(self):
        if self.interaction_points is None:
            self.interaction_points = evenly_spaced_points(self.depth, self.num_interactions)
        pts = tuple(int(p) for p in self.interaction_points)
        self.interaction_points = pts
        self.num_interactions = len(pts)
        self.scales = tuple(int(s) for s in self.scales)
        self.img_size = tuple(int(s) for s in self.img_size)
        if list(pts) != sorted(set(pts)) or any(p < 0 or p >= self.depth for p in pts):
            raise ValueError(f"interaction points {pts} must be sorted, unique and inside [0, {self.depth})")
        if self.embed_dim % self.heads or self.embed_dim % self.adapter_heads:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by heads")
        if list(self.scales) != sorted(self.scales) or any(s < 2 or s & (s - 1) for s in self.scales):
            raise ValueError(f"scales must be increasing powers of two, got {self.scales}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.img_size[0] // self.patch_size, self.img_size[1] // self.patch_size


# -- patch tokens ----------------------------------------------------------------

def patchify(images: Tensor, p: int) -> Tensor:
    """``B x C x H x W`` -> ``B x N x (C p p)`` in row-major patch order."""
    b, c, h, w = images.shape
    if h % p or w % p:
        raise GeometryError(f"image extent {h}x{w} is not divisible by patch size {p}; resize first")
    x = ops.reshape(images, (b, c, h // p, p, w // p, p))
    x = ops.transpose(x, (0, 2, 4, 1, 3, 5))
    return ops.reshape(x, (b, (h // p) * (w // p), c * p * p))


def image_patches(image: np.ndarray, p: int) -> np.ndarray:
    """Raw pixel patches (``N x p*p``) of one ``H x W`` image, scaled to [0, 1]."""
    h, w = image.shape
    if h % p or w % p:
        raise GeometryError(f"image extent {h}x{w} is not divisible by patch size {p}; resize first")
    x = image.astype(np.float64).reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3)
    return x.reshape(-1, p * p) / 255.0


def _as_batch(images) -> tuple[Tensor, bool]:
    images = images if isinstance(images, Tensor) else Tensor(images)
    if images.ndim == 3:
        return ops.reshape(images, (1, *images.shape)), True
    return images, False


class PatchEmbed(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.patch_size = cfg.patch_size
        self.grid = cfg.grid
        self.proj = Linear(cfg.in_chans * cfg.patch_size**2, cfg.embed_dim, rng)
        self.pos_embed = parameter(trunc_normal(rng, (self.grid[0] * self.grid[1], cfg.embed_dim)))

    def project(self, images: Tensor) -> Tensor:
        return self.proj(patchify(images, self.patch_size))

    def positions(self, gh: int, gw: int) -> Tensor:
        if (gh, gw) == self.grid:
            return self.pos_embed
        d = self.pos_embed.shape[1]
        grid = ops.reshape(ops.transpose(self.pos_embed, (1, 0)), (d, *self.grid))
        grid = ops.bilinear_resize(grid, gh, gw)
        return ops.transpose(ops.reshape(grid, (d, gh * gw)), (1, 0))

    def __call__(self, images: Tensor) -> Tensor:
        _, _, h, w = images.shape
        return self.project(images) + self.positions(h // self.patch_size, w // self.patch_size)


def patch_embed(image, cfg: BackboneConfig, embed: PatchEmbed) -> Tensor:
    """Tokens ``N x D`` for one ``1 x H x W`` image (or ``B x N x D`` for a batch)."""
    images, single = _as_batch(image)
    tokens = embed(images)
    return tokens[0] if single else tokens


# -- transformer encoder -------------------------------------------------------

class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, int(d * mlp_ratio), d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


def transformer_encode(tokens: Tensor, blocks: list[Block]) -> list[Tensor]:
    """States after every block (empty list for ``depth == 0``)."""
    states = []
    x = tokens
    for blk in blocks:
        x = blk(x)
        states.append(x)
    return states


class VisionTransformer(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        self.mask_token = parameter(trunc_normal(rng, (cfg.embed_dim,)))
        self.blocks = [Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]


# -- visual tokenizer ------------------------------------------------------------

@dataclass
class VisualCodebook:
    centroids: np.ndarray

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise CardinalityError("codebook needs at least one centroid")
        if not np.isfinite(self.centroids).all():
            raise ValueError("codebook centroids must be finite")

    @property
    def size(self) -> int:
        return len(self.centroids)


def _sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def fit_codebook(patches, k: int, seed: int = 0, iters: int = 50) -> VisualCodebook:
    """Lloyd's k-means with seeded k-means++ initialisation."""
    x = np.asarray(patches, dtype=np.float64)
    if len(np.unique(x, axis=0)) < k:
        raise CardinalityError(f"need at least {k} distinct patches, got {len(np.unique(x, axis=0))}")
    rng = np.random.default_rng(seed)
    centroids = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d = _sq_distances(x, np.array(centroids)).min(axis=1)
        centroids.append(x[rng.choice(len(x), p=d / d.sum())])
    c = np.array(centroids)
    for _ in range(iters):
        assign = _sq_distances(x, c).argmin(axis=1)
        new = c.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.array_equal(new, c):
            break
        c = new
    return VisualCodebook(c)


def tokenize(patch, cb: VisualCodebook):
    """Nearest-centroid id (lowest id on ties); accepts one vector or a stack."""
    x = np.asarray(patch, dtype=np.float64)
    if x.shape[-1] != cb.centroids.shape[1]:
        raise GeometryError(f"patch dim {x.shape[-1]} != codebook dim {cb.centroids.shape[1]}")
    ids = _sq_distances(x.reshape(-1, x.shape[-1]), cb.centroids).argmin(axis=1)
    return int(ids[0]) if x.ndim == 1 else ids.reshape(x.shape[:-1])


# -- masked image modeling -------------------------------------------------------

def mim_corrupt(tokens: Tensor, ratio: float, mask_embedding: Tensor, seed: int):
    """Replace ``round(ratio * N)`` randomly chosen tokens with ``mask_embedding``.

    Returns ``(corrupted, masked_set)``. For batched ``B x N x D`` input the
    second item is a list of sets, one per image, drawn from the same stream.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    single = tokens.ndim == 2
    n = tokens.shape[-2]
    count = int(round(ratio * n))
    rng = np.random.default_rng(seed)
    batch = 1 if single else tokens.shape[0]
    indicator = np.zeros((batch, n, 1))
    sets = []
    for b in range(batch):
        idx = rng.choice(n, size=count, replace=False) if count else np.array([], dtype=int)
        indicator[b, idx, 0] = 1.0
        sets.append(set(int(i) for i in idx))
    if single:
        indicator = indicator[0]
    if count == 0:
        return tokens, (sets[0] if single else sets)
    corrupted = tokens * (1.0 - indicator) + ops.mul(indicator, mask_embedding)
    return corrupted, (sets[0] if single else sets)


def mim_loss(predictions: Tensor, targets, masked_set) -> Tensor:
    """Mean cross-entropy over masked positions only.

    ``predictions`` are logits ``N x K`` (or ``B x N x K`` with per-image
    ``targets`` and a list of masked sets).
    """
    if predictions.ndim == 2:
        predictions = ops.reshape(predictions, (1, *predictions.shape))
        targets = np.asarray(targets)[None]
        masked_set = [masked_set]
    targets = np.asarray(targets)
    rows, cols = [], []
    for b, ms in enumerate(masked_set):
        for i in sorted(ms):
            rows.append(b)
            cols.append(i)
    if not rows:
        raise DegenerateBatchError("mim_loss needs at least one masked position")
    rows, cols = np.array(rows), np.array(cols)
    picked = predictions[rows, cols]
    return ops.cross_entropy(picked, targets[rows, cols])


class MIMHead(Module):
    def __init__(self, d: int, k: int, rng: np.random.Generator):
        self.norm = LayerNorm(d)
        self.proj = Linear(d, k, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(self.norm(x))


class BeitPretrainer(Module):
    """Encoder plus token-prediction head for masked-image-modeling."""

    def __init__(self, cfg: BackboneConfig, codebook_size: int, rng: np.random.Generator):
        self.vit = VisionTransformer(cfg, rng)
        self.head = MIMHead(cfg.embed_dim, codebook_size, rng)

    def loss(self, images, token_ids: np.ndarray, ratio: float, seed: int) -> Tensor:
        images, _ = _as_batch(images)
        pe = self.vit.patch_embed
        _, _, h, w = images.shape
        tokens = pe.project(images)
        corrupted, masked = mim_corrupt(tokens, ratio, self.vit.mask_token, seed)
        x = corrupted + pe.positions(h // pe.patch_size, w // pe.patch_size)
        states = transformer_encode(x, self.vit.blocks)
        final = states[-1] if states else x
        return mim_loss(self.head(final), token_ids, masked)


# -- adapter ---------------------------------------------------------------------

def spm_channels(cfg: BackboneConfig) -> list[int]:
    """Channel width after each stride-2 stage of the stem."""
    stages = int(math.log2(max(cfg.scales)))
    widths = []
    for s in range(1, stages + 1):
        if 2**s >= cfg.scales[0]:
            widths.append(cfg.embed_dim)
        else:
            widths.append(max(cfg.embed_dim >> (int(math.log2(cfg.scales[0])) - s), 8))
    return widths


class SpatialPriorModule(Module):
    """Strided convolutional stem emitting one ``D``-channel map per scale."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.scales = cfg.scales
        widths = spm_channels(cfg)
        c_in = [cfg.in_chans] + widths[:-1]
        self.stem = [Conv2d(a, b, 3, rng, stride=2, pad=1) for a, b in zip(c_in, widths)]
        self.proj = [Conv2d(widths[int(math.log2(s)) - 1], cfg.embed_dim, 1, rng) for s in cfg.scales]

    def __call__(self, images: Tensor) -> list[Tensor]:
        _, _, h, w = images.shape
        top = max(self.scales)
        if h % top or w % top:
            raise GeometryError(f"image extent {h}x{w} must be divisible by {top}")
        taps = {}
        x = images
        for i, conv in enumerate(self.stem):
            x = ops.gelu(conv(x))
            taps[2 ** (i + 1)] = x
        return [proj(taps[s]) for proj, s in zip(self.proj, self.scales)]


def spm_forward(image, spm: SpatialPriorModule) -> list[Tensor]:
    images, single = _as_batch(image)
    maps = spm(images)
    return [m[0] for m in maps] if single else maps


def flatten_maps(maps: list[Tensor]) -> tuple[Tensor, list[tuple[int, int]]]:
    """``[B x D x h x w]`` -> ``B x sum(h w) x D`` plus the per-scale extents."""
    shapes = [tuple(m.shape[-2:]) for m in maps]
    flat = [ops.swapaxes(ops.reshape(m, (m.shape[0], m.shape[1], -1)), 1, 2) for m in maps]
    return ops.concat(flat, axis=1), shapes


def unflatten_maps(flat: Tensor, shapes: list[tuple[int, int]]) -> list[Tensor]:
    maps = []
    start = 0
    b, _, d = flat.shape
    for h, w in shapes:
        part = flat[:, start:start + h * w]
        maps.append(ops.reshape(ops.swapaxes(part, 1, 2), (b, d, h, w)))
        start += h * w
    return maps


class Injector(Module):
    """Cross-attention from ViT tokens into spatial priors, gated by a zero-initialised scalar."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.gamma = parameter(np.zeros(1))

    def __call__(self, tokens: Tensor, priors_flat: Tensor) -> Tensor:
        feat = self.norm_kv(priors_flat)
        return tokens + self.gamma * self.attn(self.norm_q(tokens), feat)


class Extractor(Module):
    """Cross-attention from spatial priors into ViT tokens, residual on the priors."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.attn = Attention(d, heads, rng)

    def __call__(self, priors_flat: Tensor, tokens: Tensor) -> Tensor:
        feat = self.norm_kv(tokens)
        return priors_flat + self.attn(self.norm_q(priors_flat), feat)


def inject(vit_tokens: Tensor, priors: list[Tensor], injector: Injector) -> Tensor:
    single = vit_tokens.ndim == 2
    if single:
        vit_tokens = ops.reshape(vit_tokens, (1, *vit_tokens.shape))
        priors = [ops.reshape(p, (1, *p.shape)) for p in priors]
    flat, _ = flatten_maps(priors)
    out = injector(vit_tokens, flat)
    return out[0] if single else out


def extract(vit_tokens: Tensor, priors: list[Tensor], extractor: Extractor) -> list[Tensor]:
    single = vit_tokens.ndim == 2
    if single:
        vit_tokens = ops.reshape(vit_tokens, (1, *vit_tokens.shape))
        priors = [ops.reshape(p, (1, *p.shape)) for p in priors]
    flat, shapes = flatten_maps(priors)
    maps = unflatten_maps(extractor(flat, vit_tokens), shapes)
    return [m[0] for m in maps] if single else maps


class AdapterBackbone(Module):
    """ViT encoder wrapped with a spatial prior module and inject/extract pairs."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.vit = VisionTransformer(cfg, rng)
        self.spm = SpatialPriorModule(cfg, rng)
        self.injectors = [Injector(cfg.embed_dim, cfg.adapter_heads, rng) for _ in cfg.interaction_points]
        self.extractors = [Extractor(cfg.embed_dim, cfg.adapter_heads, rng) for _ in cfg.interaction_points]

    def __call__(self, images) -> list[Tensor]:
        images, single = _as_batch(images)
        priors = self.spm(images)
        x = self.vit.patch_embed(images)
        pts = list(self.cfg.interaction_points)
        blocks = self.vit.blocks
        if not pts:
            return [p[0] for p in priors] if single else priors
        flat, shapes = flatten_maps(priors)
        for blk in blocks[: pts[0]]:
            x = blk(x)
        bounds = pts + [len(blocks)]
        for i, (inj, ext) in enumerate(zip(self.injectors, self.extractors)):
            x = inj(x, flat)
            for blk in blocks[bounds[i]:bounds[i + 1]]:
                x = blk(x)
            flat = ext(flat, x)
        maps = unflatten_maps(flat, shapes)
        return [m[0] for m in maps] if single else maps


def backbone_forward(image, cfg: BackboneConfig, weights: AdapterBackbone) -> list[Tensor]:
    if weights.cfg is not cfg and weights.cfg != cfg:
        raise ValueError("weights were built for a different backbone config")
    return weights(image)
