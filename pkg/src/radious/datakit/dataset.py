"""Dataset layout, ingestion, resizing and the train/test split."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import GeometryError, IngestionError, LabelError, PairingError
from ..numkit import Tensor, bilinear_resize, resize_nearest
from .palette import ClassPalette

SOURCE_KINDS = ("opg", "periapical", "bitewing")


@dataclass(frozen=True, eq=False)
class ImageSample:
    """Grayscale radiograph (uint8, H x W) with a same-extent mask of palette ids."""

    id: str
    image: np.ndarray
    mask: np.ndarray
    source_kind: str = "opg"

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise GeometryError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ")
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"sample {self.id}: unknown source kind {self.source_kind!r}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def classes(self) -> set[int]:
        return set(np.unique(self.mask).tolist())


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[ImageSample, ...] = ()
    split: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, which: str) -> list[ImageSample]:
        return [s for s in self.samples if self.split.get(s.id) == which]


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I;16", "I"):
                im = im.convert("L")
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc


def write_png(path: Path, arr: np.ndarray) -> None:
    # no timestamps or text chunks, so equal arrays give equal bytes
    Image.fromarray(np.ascontiguousarray(arr.astype(np.uint8)), mode="L").save(path, format="PNG", optimize=False)


def validate_mask(mask: np.ndarray, palette: ClassPalette, where: str) -> None:
    bad = mask[(mask < 0) | (mask >= len(palette))]
    if bad.size:
        raise LabelError(f"{where}: mask value {int(bad.flat[0])} outside palette of {len(palette)} entries")


def load_dataset(root: str | Path, palette: ClassPalette | None = None) -> DatasetManifest:
    """Read ``root/images/<id>.png`` with ``root/masks/<id>.png``.

    Without an explicit palette, ``root/palette.json`` is used.
    """
    root = Path(root)
    if palette is None:
        palette = ClassPalette.load(root / "palette.json")
    kinds: dict[str, str] = {}
    if (root / "manifest.json").exists():
        meta = json.loads((root / "manifest.json").read_text())
        kinds = {k: v.get("source_kind", "opg") if isinstance(v, dict) else str(v) for k, v in meta.items()}
    image_dir, mask_dir = root / "images", root / "masks"
    samples = []
    for img_path in sorted(image_dir.glob("*.png")) if image_dir.exists() else []:
        sid = img_path.stem
        mask_path = mask_dir / img_path.name
        if not mask_path.exists():
            raise PairingError(f"image {img_path} has no mask at {mask_path}")
        image = read_png(img_path)
        mask = read_png(mask_path)
        if image.shape != mask.shape:
            raise GeometryError(f"{sid}: image extent {image.shape} != mask extent {mask.shape}")
        validate_mask(mask, palette, str(mask_path))
        samples.append(ImageSample(sid, image.astype(np.uint8), mask.astype(np.uint8), kinds.get(sid, "opg")))
    return DatasetManifest(tuple(samples), {})


def save_dataset(root: str | Path, samples, palette: ClassPalette) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    palette.save(root / "palette.json")
    meta = {}
    for s in samples:
        write_png(root / "images" / f"{s.id}.png", s.image)
        write_png(root / "masks" / f"{s.id}.png", s.mask)
        meta[s.id] = {"source_kind": s.source_kind}
    (root / "manifest.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def resize_image(image: np.ndarray, w: int, h: int) -> np.ndarray:
    if image.shape == (h, w):
        return image.copy()
    out = bilinear_resize(Tensor(image.astype(np.float64)[None]), h, w).data[0]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_sample(s: ImageSample, w: int, h: int) -> ImageSample:
    """Bilinear on the image, nearest-neighbour on the mask."""
    if w < 1 or h < 1:
        raise GeometryError(f"resize target must be positive, got {w}x{h}")
    return replace(s, image=resize_image(s.image, w, h), mask=resize_nearest(s.mask, h, w).copy())


def class_frequencies(m: DatasetManifest | list[ImageSample], palette: ClassPalette) -> np.ndarray:
    """Per class id, the number of samples whose mask contains that class."""
    samples = m.samples if isinstance(m, DatasetManifest) else m
    counts = np.zeros(len(palette), dtype=np.int64)
    for s in samples:
        present = np.bincount(s.mask.ravel(), minlength=len(palette)) > 0
        counts += present[: len(palette)]
    return counts


def split_dataset(m: DatasetManifest, train_fraction: float = 0.9, seed: int = 0) -> DatasetManifest:
    """Seeded shuffle of OPG samples into train/test; other modalities go to test."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    opg = [s.id for s in m.samples if s.source_kind == "opg"]
    order = np.random.default_rng(seed).permutation(len(opg))
    n_train = int(round(train_fraction * len(opg)))
    train = {opg[i] for i in order[:n_train]}
    split = {s.id: ("train" if s.id in train else "test") for s in m.samples}
    return DatasetManifest(m.samples, split)
