"""Command-line entry point: ``radious <command> [options]``.

Every command accepts ``--config`` (a YAML path or the presets ``desk`` and
``paper``), ``--seed`` and ``--out``. Failures print a single line
``error <CODE>: <message>`` on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, pipeline
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict, load_config
from .datakit import (
    AugmentConfig,
    ClassPalette,
    class_frequencies,
    load_dataset,
    plan_augmentation,
    read_png,
    realize_plan,
    save_dataset,
    split_dataset,
    write_png,
)
from .datakit.dataset import ImageSample, validate_mask
from .datakit.synthetic import make_dataset, synthetic_palette
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateEvaluationError,
    EmptyDatasetError,
    GeometryError,
    RadiousError,
)
from .metrics import ConfusionMatrix, MetricReport, compare_reports, format_comparison

log = logging.getLogger("radious")

FIXTURE_NAMES = ("radious", "deeplabv3plus", "segformer")


def fixture_paths() -> list[Path]:
    """Bundled reference reports (mIoU / mAcc of the three published models)."""
    base = resources.files("radious") / "fixtures"
    return [Path(str(base / f"{name}.json")) for name in FIXTURE_NAMES]


# -- shared plumbing ------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "data", None):
        cfg.dataset.root = str(Path(args.data).resolve())
    return cfg


def _palette(cfg: RunConfig) -> ClassPalette:
    if cfg.dataset.palette:
        return ClassPalette.load(cfg.dataset.palette)
    if not cfg.dataset.root:
        raise ConfigError("no dataset given: set dataset.root in the config or pass --data")
    path = Path(cfg.dataset.root) / "palette.json"
    if not path.exists():
        raise ConfigError(f"no palette: {path} is missing and dataset.palette is unset")
    return ClassPalette.load(path)


def _samples(cfg: RunConfig, split: str) -> tuple[list[ImageSample], ClassPalette]:
    cfg.validate(need_dataset=True)
    palette = _palette(cfg)
    manifest = load_dataset(cfg.dataset.root, palette)
    if not len(manifest):
        raise EmptyDatasetError(f"no images found under {cfg.dataset.root}/images")
    if split == "all":
        return list(manifest.samples), palette
    return split_dataset(manifest, cfg.dataset.train_fraction, seed=cfg.seed).subset(split), palette


def _epoch_logger(tag: str):
    def report(epoch: int, loss: float) -> None:
        print(f"{tag} epoch {epoch} loss {loss:.6f}", flush=True)

    return report


def _model_from_checkpoint(ckpt: Checkpoint):
    if ckpt.kind != "segmentation":
        raise CheckpointError(f"expected a segmentation checkpoint, got kind {ckpt.kind!r}")
    cfg = config_from_dict(ckpt.config)
    model = pipeline.build_model(cfg)
    missing = model.load_state_dict(ckpt.tensors, strict=False)
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[0]}")
    return model, cfg


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    samples = make_dataset(args.n, size=args.size, seed=args.seed or 0)
    save_dataset(args.out, samples, synthetic_palette())
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    samples, _ = _samples(cfg, args.split)
    result = pipeline.pretrain(cfg, samples, on_epoch=_epoch_logger("pretrain"))
    tensors = dict(result.model.state_dict())
    tensors["codebook.centroids"] = result.codebook.centroids
    ckpt = Checkpoint("pretrain", tensors, cfg.to_dict(), cfg.seed, {"losses": result.losses})
    save_checkpoint(args.out, ckpt)
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    samples, palette = _samples(cfg, args.split)
    pipeline.resolve_decoder(cfg, palette)
    model = pipeline.build_model(cfg)
    if args.init:
        init = load_checkpoint(args.init)
        if init.kind == "pretrain":
            n = pipeline.load_pretrained_encoder(model, init.tensors)
            print(f"initialised {n} encoder tensors from {args.init}")
        elif init.kind == "segmentation":
            missing = model.load_state_dict(init.tensors, strict=False)
            if missing:
                raise CheckpointError(f"{args.init} does not match the configured model: missing {missing[0]}")
        else:
            raise CheckpointError(f"unknown checkpoint kind {init.kind!r}")
    result = pipeline.train(cfg, samples, model=model, on_epoch=_epoch_logger("train"))
    meta = {"losses": result.losses, "palette": palette.to_json()}
    save_checkpoint(args.out, Checkpoint("segmentation", model.state_dict(), cfg.to_dict(), cfg.seed, meta))
    print(f"wrote {args.out}")
    return 0


def _read_predictions(pred_dir: Path, samples: list[ImageSample], palette: ClassPalette) -> list[np.ndarray]:
    preds = []
    for s in samples:
        path = pred_dir / f"{s.id}.png"
        pred = read_png(path)
        validate_mask(pred, palette, str(path))
        preds.append(pred)
    return preds


def cmd_eval(args) -> int:
    cfg = _config(args)
    samples, palette = _samples(cfg, args.split)
    if not samples:
        raise DegenerateEvaluationError(f"split {args.split!r} is empty")
    if args.predictions:
        preds = _read_predictions(Path(args.predictions), samples, palette)
        name = args.name or Path(args.predictions).name
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        model, model_cfg = _model_from_checkpoint(load_checkpoint(args.checkpoint))
        if model_cfg.decoder.num_classes != palette.num_foreground:
            raise ConfigError(
                f"checkpoint predicts {model_cfg.decoder.num_classes} classes but the palette has {palette.num_foreground}"
            )
        preds = pipeline.predict_samples(model, model_cfg, samples)
        name = args.name or Path(args.checkpoint).stem
    cm = ConfusionMatrix(len(palette))
    for s, pred in zip(samples, preds):
        cm = cm.accumulate(pred, s.mask)
    report = MetricReport.from_confusion(cm, name, palette.names, include_background=not args.exclude_background)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(f"{name}: mIoU {report.miou:.4f} mAcc {report.macc:.4f} over {report.pixel_total} pixels -> {out}")
    return 0


def overlay(image: np.ndarray, labels: np.ndarray, palette: ClassPalette, alpha: float = 0.5) -> np.ndarray:
    """RGB image: labelled pixels blend their palette colour over the grayscale at ``alpha``."""
    gray = np.repeat(image[..., None].astype(np.float64), 3, axis=-1)
    colors = palette.colors()[labels].astype(np.float64)
    fg = (labels > 0)[..., None]
    blended = np.where(fg, (1 - alpha) * gray + alpha * colors, gray)
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = _model_from_checkpoint(ckpt)
    if "palette" not in ckpt.meta:
        raise CheckpointError("checkpoint carries no palette")
    palette = ClassPalette.from_json(ckpt.meta["palette"])
    image = read_png(Path(args.image))
    if image.ndim != 2:
        raise GeometryError(f"expected a single-channel image, got shape {image.shape}")
    image = image.astype(np.uint8)
    sample = ImageSample(Path(args.image).stem, image, np.zeros_like(image))
    labels = pipeline.predict_samples(model, cfg, [sample])[0].astype(np.uint8)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, labels)
    overlay_path = Path(args.overlay) if args.overlay else out.with_name(out.stem + "_overlay.png")
    Image.fromarray(overlay(image, labels, palette), mode="RGB").save(overlay_path, format="PNG")
    present = sorted(int(c) for c in np.unique(labels) if c)
    print(f"classes: {', '.join(palette.name_of(c) for c in present) or 'none'}")
    print(f"wrote {out} and {overlay_path}")
    return 0


def _plan(cfg: RunConfig, samples, palette: ClassPalette, total: int | None):
    freq = class_frequencies(samples, palette)
    ac = cfg.augment
    return plan_augmentation(freq[1:], ac.a, ac.b, total if total is not None else ac.total_target, class_ids=palette.ids[1:])


def cmd_augment(args) -> int:
    cfg = _config(args)
    samples, palette = _samples(cfg, args.split)
    plan = _plan(cfg, samples, palette, args.total_target)
    rows = [
        {"id": c, "name": palette.name_of(c), "f": f, "f_prime": s, "target": t}
        for c, f, s, t in plan.rows()
    ]
    if args.action == "plan":
        width = max(len("class"), *(len(r["name"]) for r in rows))
        print(f"{'id':>3}  {'class':<{width}}  {'f':>6}  {'log(b+af)':>9}  {'target':>7}")
        for r in rows:
            print(f"{r['id']:>3}  {r['name']:<{width}}  {r['f']:>6}  {r['f_prime']:>9.4f}  {r['target']:>7}")
        print(f"total target {sum(plan.target_counts)} (requested {plan.total_target})")
        if args.out:
            _write_json(Path(args.out), {"a": plan.a, "b": plan.b, "total_target": plan.total_target, "classes": rows})
        return 0
    if not args.out:
        raise ConfigError("augment apply needs --out <dataset dir>")
    ac = cfg.augment
    aug_cfg = AugmentConfig(ac.flip_prob, ac.max_rotation_deg, ac.brightness, ac.contrast)
    out_samples = realize_plan(samples, plan, seed=cfg.seed, cfg=aug_cfg)
    save_dataset(args.out, out_samples, palette)
    _write_json(Path(args.out) / "plan.json", {"a": plan.a, "b": plan.b, "total_target": plan.total_target, "classes": rows})
    print(f"wrote {len(out_samples)} samples to {args.out}")
    return 0


def cmd_compare(args) -> int:
    paths = [Path(p) for p in args.reports]
    if args.fixtures:
        paths = fixture_paths() + paths
    rows = compare_reports([MetricReport.load(p) for p in paths])
    print(format_comparison(rows))
    if args.out:
        _write_json(Path(args.out), {
            "format": "radious-comparison",
            "rows": [
                {"rank": r.rank, "model_name": r.model_name, "miou": r.miou, "macc": r.macc,
                 "delta_miou": r.delta_miou, "delta_macc": r.delta_macc}
                for r in rows
            ],
        })
    return 0


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radious", description="Dental radiograph semantic segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"radious {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, out_default=None, out_required=False, data=True, split_default="train"):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default="desk", help="YAML config path, or the presets 'desk' / 'paper'")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=out_default, required=out_required)
        if data:
            p.add_argument("--data", help="dataset directory (overrides dataset.root)")
            p.add_argument("--split", choices=("train", "test", "all"), default=split_default)
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "write a synthetic shapes dataset", out_required=True, data=False)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=128)

    command("pretrain", cmd_pretrain, "masked image modeling pre-training", out_default="pretrain.ckpt")

    p = command("train", cmd_train, "fine-tune backbone and decoder", out_default="model.ckpt")
    p.add_argument("--init", help="pre-training or segmentation checkpoint to start from")

    p = command("eval", cmd_eval, "evaluate a checkpoint or a directory of predicted masks",
                out_default="report.json", split_default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of <id>.png label maps to score instead of a model")
    p.add_argument("--name", help="model name recorded in the report")
    p.add_argument("--exclude-background", action="store_true")

    p = command("infer", cmd_infer, "segment one image", out_default="mask.png", data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--overlay", help="overlay path (default: <out>_overlay.png)")

    p = command("augment", cmd_augment, "plan or apply class-balancing augmentation")
    p.add_argument("action", choices=("plan", "apply"))
    p.add_argument("--total-target", type=int, default=None, help="override augment.total_target")

    p = command("compare", cmd_compare, "rank metric reports", data=False)
    p.add_argument("reports", nargs="*")
    p.add_argument("--fixtures", action="store_true", help="include the bundled reference reports")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except RadiousError as exc:
        message = " ".join(str(exc).split())
        print(f"error {exc.code}: {message}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error E_IO: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
