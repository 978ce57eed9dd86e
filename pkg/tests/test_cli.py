import json

import numpy as np
import pytest
import yaml
from PIL import Image

from radious.checkpoint import dumps, load_checkpoint
from radious.cli import main, overlay
from radious.datakit import ClassPalette, ImageSample, load_dataset, read_png, save_dataset, write_png
from radious.datakit.synthetic import make_dataset, synthetic_palette
from radious.metrics import ConfusionMatrix, MetricReport, iou_per_class

TINY = {
    "seed": 0,
    "precision": "float64",
    "backbone": {"depth": 2, "embed_dim": 16, "heads": 2, "patch_size": 8, "num_interactions": 1},
    "decoder": {"num_queries": 6, "num_classes": None, "hidden_dim": 16, "heads": 2, "ffn_dim": 32},
    "augment": {"total_target": 40},
    "pretrain": {"image_size": [32, 32], "codebook_size": 8, "codebook_patches": 500, "epochs": 1, "batch_size": 4},
    "train": {"image_size": [32, 32], "epochs": 1, "batch_size": 4},
}


def write_config(path, **overrides):
    cfg = json.loads(json.dumps(TINY))
    for block, values in overrides.items():
        if isinstance(values, dict):
            cfg.setdefault(block, {}).update(values)
        else:
            cfg[block] = values
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "10", "--size", "32", "--seed", "1"]) == 0
    cfg = write_config(root / "tiny.yaml")
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "model.ckpt")]) == 0
    return root


def run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_synth_dataset_loads(workspace):
    m = load_dataset(workspace / "data")
    assert len(m) == 10
    assert all(s.image.shape == (32, 32) for s in m.samples)


# -- pretrain ----------------------------------------------------------------------------

def test_pretrain_smoke_and_round_trip(tmp_path, capsys):
    save_dataset(tmp_path / "d", make_dataset(2, size=32, seed=4), synthetic_palette())
    cfg = write_config(tmp_path / "c.yaml")
    code, out, _ = run(capsys, ["pretrain", "--config", cfg, "--data", str(tmp_path / "d"), "--split", "all",
                                "--out", str(tmp_path / "p.ckpt")])
    assert code == 0 and "pretrain epoch 1 loss" in out
    blob = (tmp_path / "p.ckpt").read_bytes()
    assert dumps(load_checkpoint(tmp_path / "p.ckpt")) == blob
    assert "codebook.centroids" in load_checkpoint(tmp_path / "p.ckpt").tensors


def test_pretrain_deterministic(workspace, tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    for name in ("a", "b"):
        assert main(["pretrain", "--config", cfg, "--data", str(workspace / "data"), "--out", str(tmp_path / f"{name}.ckpt")]) == 0
    a, b = load_checkpoint(tmp_path / "a.ckpt"), load_checkpoint(tmp_path / "b.ckpt")
    assert a.meta["losses"] == b.meta["losses"]
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.slow
def test_pretrain_loss_descends(tmp_path):
    save_dataset(tmp_path / "d", make_dataset(8, size=32, seed=2), synthetic_palette())
    cfg = write_config(tmp_path / "c.yaml", pretrain={"epochs": 50})
    assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "d"), "--split", "all", "--out", str(tmp_path / "p.ckpt")]) == 0
    losses = load_checkpoint(tmp_path / "p.ckpt").meta["losses"]
    assert len(losses) == 50 and losses[-1] < losses[0]


# -- train ------------------------------------------------------------------------------------

def test_train_zero_epochs_is_identity(workspace, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", train={"epochs": 0})
    out = tmp_path / "same.ckpt"
    assert main(["train", "--config", cfg, "--data", str(workspace / "data"), "--init", str(workspace / "model.ckpt"), "--out", str(out)]) == 0
    init, again = load_checkpoint(workspace / "model.ckpt"), load_checkpoint(out)
    assert list(init.tensors) == list(again.tensors)
    assert all(init.tensors[k].tobytes() == again.tensors[k].tobytes() for k in init.tensors)


def test_train_deterministic(workspace, tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["train", "--config", cfg, "--data", str(workspace / "data"), "--out", str(tmp_path / "m.ckpt")]) == 0
    assert (tmp_path / "m.ckpt").read_bytes() == (workspace / "model.ckpt").read_bytes()


def test_train_from_pretrain_checkpoint(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", train={"epochs": 0})
    assert main(["pretrain", "--config", cfg, "--data", str(workspace / "data"), "--out", str(tmp_path / "p.ckpt")]) == 0
    code, out, _ = run(capsys, ["train", "--config", cfg, "--data", str(workspace / "data"), "--init", str(tmp_path / "p.ckpt"),
                                "--out", str(tmp_path / "m.ckpt")])
    assert code == 0 and "encoder tensors" in out
    pre, seg = load_checkpoint(tmp_path / "p.ckpt"), load_checkpoint(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(seg.tensors["backbone.vit.blocks.1.mlp.layers.0.weight"], pre.tensors["vit.blocks.1.mlp.layers.0.weight"])


def test_train_capacity_error_names_sample(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", decoder={"num_queries": 1})
    code, _, err = run(capsys, ["train", "--config", cfg, "--data", str(workspace / "data"), "--out", str(tmp_path / "m.ckpt")])
    lines = err.strip().splitlines()
    assert code == 2 and len(lines) == 1
    assert lines[0].startswith("error E_CAPACITY:") and "sample syn0" in lines[0]


# -- eval ---------------------------------------------------------------------------------------

def test_eval_identity_predictions(workspace, tmp_path):
    out = tmp_path / "r.json"
    assert main(["eval", "--config", write_config(tmp_path / "c.yaml"), "--data", str(workspace / "data"), "--split", "all",
                 "--predictions", str(workspace / "data" / "masks"), "--name", "oracle", "--out", str(out)]) == 0
    report = MetricReport.load(out)
    assert report.miou == 1.0 and report.macc == 1.0 and report.model_name == "oracle"


def test_eval_matrix_matches_pixel_oracle(tmp_path):
    samples = make_dataset(3, size=32, seed=9)
    save_dataset(tmp_path / "d", samples, synthetic_palette())
    rng = np.random.default_rng(0)
    (tmp_path / "p").mkdir()
    preds = {}
    for s in samples:
        preds[s.id] = rng.integers(0, 5, size=s.mask.shape).astype(np.uint8)
        write_png(tmp_path / "p" / f"{s.id}.png", preds[s.id])
    out = tmp_path / "r.json"
    assert main(["eval", "--config", write_config(tmp_path / "c.yaml"), "--data", str(tmp_path / "d"), "--split", "all",
                 "--predictions", str(tmp_path / "p"), "--out", str(out)]) == 0
    counts = np.zeros((5, 5), dtype=np.int64)
    for s in samples:
        for g, p in zip(s.mask.ravel(), preds[s.id].ravel()):
            counts[g, p] += 1
    expected = iou_per_class(ConfusionMatrix(5, counts))
    report = MetricReport.load(out)
    assert report.pixel_total == 3 * 32 * 32
    assert {r.id: r.iou for r in report.per_class} == expected


def test_eval_checkpoint_and_compare_round_trip(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["eval", "--config", cfg, "--data", str(workspace / "data"), "--checkpoint", str(workspace / "model.ckpt"), "--out", str(a)]) == 0
    assert main(["eval", "--config", cfg, "--data", str(workspace / "data"), "--split", "all",
                 "--predictions", str(workspace / "data" / "masks"), "--name", "oracle", "--out", str(b)]) == 0
    capsys.readouterr()
    code, out, _ = run(capsys, ["compare", str(a), str(b), "--out", str(tmp_path / "t.json")])
    assert code == 0
    assert out.splitlines()[1].startswith("oracle")
    table = json.loads((tmp_path / "t.json").read_text())
    assert [r["rank"] for r in table["rows"]] == [1, 2]


def test_eval_empty_split(tmp_path, capsys):
    save_dataset(tmp_path / "d", make_dataset(1, size=32), synthetic_palette())
    code, _, err = run(capsys, ["eval", "--config", write_config(tmp_path / "c.yaml"), "--data", str(tmp_path / "d"),
                                "--predictions", str(tmp_path / "d" / "masks"), "--out", str(tmp_path / "r.json")])
    assert code == 2 and err.startswith("error E_DEGENERATE_EVAL:")


# -- infer ------------------------------------------------------------------------------------------

def test_infer_outputs(workspace, tmp_path):
    src = workspace / "data" / "images"
    image_path = sorted(src.glob("*.png"))[0]
    out = tmp_path / "res" / "masks" / image_path.name
    assert main(["infer", "--checkpoint", str(workspace / "model.ckpt"), "--image", str(image_path), "--out", str(out)]) == 0
    mask = read_png(out)
    image = read_png(image_path)
    assert mask.shape == image.shape
    palette = ClassPalette.load(workspace / "data" / "palette.json")
    assert set(np.unique(mask)) <= set(palette.ids)
    with Image.open(out.with_name(image_path.stem + "_overlay.png")) as ov:
        assert ov.mode == "RGB" and ov.size == (image.shape[1], image.shape[0])
    # re-ingest the predicted mask through the dataset loader
    (tmp_path / "res" / "images").mkdir()
    write_png(tmp_path / "res" / "images" / image_path.name, image)
    out.with_name(image_path.stem + "_overlay.png").unlink()
    assert len(load_dataset(tmp_path / "res", palette)) == 1


def test_overlay_blend():
    image = np.full((2, 2), 100, dtype=np.uint8)
    labels = np.array([[0, 1], [1, 0]])
    palette = ClassPalette.from_names(["x"])
    rgb = overlay(image, labels, palette)
    np.testing.assert_array_equal(rgb[0, 0], [100, 100, 100])
    color = palette.colors()[1].astype(float)
    np.testing.assert_array_equal(rgb[0, 1], np.rint(0.5 * 100 + 0.5 * color))


def test_infer_unreadable_image(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    code, _, err = run(capsys, ["infer", "--checkpoint", str(workspace / "model.ckpt"), "--image", str(bad), "--out", str(tmp_path / "m.png")])
    assert code == 2 and err.startswith("error E_INGEST:") and len(err.strip().splitlines()) == 1


# -- augment --------------------------------------------------------------------------------------

def _single_shape_dataset(root):
    samples = make_dataset(40, size=32, seed=5, max_shapes=1)
    save_dataset(root, samples, synthetic_palette())
    return samples


def test_augment_plan_uniform(tmp_path, capsys):
    palette = synthetic_palette()
    samples = []
    for cls in range(1, 5):
        for j in range(3):
            mask = np.zeros((8, 8), dtype=np.uint8)
            mask[:4, :4] = cls
            samples.append(ImageSample(f"s{cls}_{j}", np.full((8, 8), 50, dtype=np.uint8), mask))
    save_dataset(tmp_path / "d", samples, palette)
    code, out, _ = run(capsys, ["augment", "plan", "--config", write_config(tmp_path / "c.yaml"), "--data", str(tmp_path / "d"),
                                "--split", "all", "--out", str(tmp_path / "plan.json")])
    assert code == 0 and "total target" in out
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert {c["target"] for c in plan["classes"]} == {10}


def test_augment_apply_matches_plan_and_is_deterministic(tmp_path):
    _single_shape_dataset(tmp_path / "d")
    cfg = write_config(tmp_path / "c.yaml")
    for name in ("o1", "o2"):
        assert main(["augment", "apply", "--config", cfg, "--data", str(tmp_path / "d"), "--split", "all", "--out", str(tmp_path / name)]) == 0
    plan = json.loads((tmp_path / "o1" / "plan.json").read_text())
    out = load_dataset(tmp_path / "o1")
    palette = synthetic_palette()
    present = {c: sum(c in s.classes() for s in out.samples) for c in palette.ids[1:]}
    for row in plan["classes"]:
        assert abs(present[row["id"]] - row["target"]) <= 1
    files = sorted(p.relative_to(tmp_path / "o1") for p in (tmp_path / "o1").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / "o1" / rel).read_bytes() == (tmp_path / "o2" / rel).read_bytes()


# -- compare and errors ------------------------------------------------------------------------------

def test_compare_fixtures(capsys, tmp_path):
    code, out, _ = run(capsys, ["compare", "--fixtures", "--out", str(tmp_path / "t.json")])
    assert code == 0
    rows = json.loads((tmp_path / "t.json").read_text())["rows"]
    assert [r["model_name"] for r in rows] == ["Radious", "DeepLabv3+", "Segformer"]
    assert abs(rows[1]["delta_miou"] + 0.09) <= 0.005 and abs(rows[2]["delta_miou"] + 0.33) <= 0.005


def test_compare_copies_zero_delta(tmp_path):
    r = MetricReport("m", 0.4, 0.5)
    r.save(tmp_path / "a.json")
    MetricReport("m copy", 0.4, 0.5).save(tmp_path / "b.json")
    assert main(["compare", str(tmp_path / "a.json"), str(tmp_path / "b.json"), "--out", str(tmp_path / "t.json")]) == 0
    rows = json.loads((tmp_path / "t.json").read_text())["rows"]
    assert all(row["delta_miou"] == 0 and row["delta_macc"] == 0 for row in rows)


def test_compare_three_hand_built_reports(tmp_path):
    specs = [("b", 0.5, 0.2), ("a", 0.5, 0.9), ("c", 0.7, 0.1)]
    paths = []
    for name, m_iou, m_acc in specs:
        paths.append(str(tmp_path / f"{name}.json"))
        MetricReport(name, m_iou, m_acc).save(paths[-1])
    assert main(["compare", *paths, "--out", str(tmp_path / "t.json")]) == 0
    rows = json.loads((tmp_path / "t.json").read_text())["rows"]
    assert [r["model_name"] for r in rows] == [n for n, *_ in sorted(specs, key=lambda s: (-s[1], s[0]))]


@pytest.mark.parametrize(
    "argv_fn,code",
    [
        (lambda p: ["compare", str(p / "r.json"), str(p / "r.json")], "E_NAMING"),
        (lambda p: ["compare", str(p / "r.json")], "E_REPORT_INPUT"),
        (lambda p: ["train", "--config", str(p / "missing.yaml"), "--data", str(p)], "E_CONFIG"),
        (lambda p: ["train", "--config", str(p / "bad.yaml"), "--data", str(p)], "E_CONFIG"),
        (lambda p: ["pretrain", "--data", str(p / "empty")], "E_EMPTY_DATASET"),
        (lambda p: ["infer", "--checkpoint", str(p / "r.json"), "--image", "x.png"], "E_CHECKPOINT"),
    ],
)
def test_errors_are_single_machine_lines(tmp_path, capsys, argv_fn, code):
    MetricReport("m", 0.4, 0.5).save(tmp_path / "r.json")
    (tmp_path / "bad.yaml").write_text("train:\n  nonsense: 3\n")
    (tmp_path / "empty").mkdir()
    ClassPalette.from_names(["x"]).save(tmp_path / "empty" / "palette.json")
    rc, out, err = run(capsys, argv_fn(tmp_path))
    lines = err.strip().splitlines()
    assert rc == 2 and len(lines) == 1
    assert lines[0].startswith(f"error {code}:")
