"""Dataset ingestion, class palette, resize/split conventions and class-balancing augmentation."""

from .augment import (
    AugmentConfig,
    AugmentParams,
    AugmentationPlan,
    allocate,
    apply_augmentations,
    plan_augmentation,
    realize_plan,
    source_coords,
    warp,
)
from .dataset import (
    DatasetManifest,
    ImageSample,
    class_frequencies,
    load_dataset,
    read_png,
    resize_sample,
    save_dataset,
    split_dataset,
    write_png,
)
from .palette import ClassPalette, PaletteEntry, default_palette

__all__ = [
    "AugmentConfig",
    "AugmentParams",
    "AugmentationPlan",
    "ClassPalette",
    "DatasetManifest",
    "ImageSample",
    "PaletteEntry",
    "allocate",
    "apply_augmentations",
    "class_frequencies",
    "default_palette",
    "load_dataset",
    "plan_augmentation",
    "read_png",
    "realize_plan",
    "resize_sample",
    "save_dataset",
    "source_coords",
    "split_dataset",
    "warp",
    "write_png",
]
