import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from partpool.backbone import decode_array
from partpool.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from partpool.cli import PART_COLORS, heatmap_image, main
from partpool.imageio import read_pnm, write_pgm
from partpool.metrics import pck
from partpool.model import PartModel
from partpool.synth import load_split
from partpool.training import TrainConfig

GEN = {"seed": 5, "image_size": 32, "num_classes": 3, "train_per_class": 20, "test_per_class": 10}
TRAIN = {
    "seed": 1, "batch_size": 8, "backbone": {"widths": [4, 6, 8], "feature_channels": 8},
    "stages": [
        {"name": "head", "trainable": ["kphead"], "learning_rate": 1e-3, "epochs": 1, "objective": "keypoint"},
        {"name": "cls", "trainable": ["classifier"], "learning_rate": 1e-2, "epochs": 2, "objective": "classify",
         "converge_tol": None},
    ],
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def tree_hashes(root, skip=("manifest.json",)):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = write_json(root / "gen.json", GEN)
    assert main(["generate", "--config", gen, "--out", str(root / "data")]) == 0
    cfg = write_json(root / "train.json", TRAIN)
    assert main(["train", "--data", str(root / "data"), "--config", cfg, "--out", str(root / "run")]) == 0
    return root


def test_generate_counts_and_manifest(workspace):
    data = workspace / "data"
    assert len(list((data / "train").glob("*.ppm"))) == 60
    assert len(list((data / "test").glob("*.ppm"))) == 30
    manifest = json.loads((data / "manifest.json").read_text())
    assert {"config_hash", "seed", "git_describe", "start", "end", "outputs"} <= set(manifest)
    assert manifest["seed"] == 5 and "train.json" in manifest["outputs"]


def test_default_generate_counts(tmp_path):
    assert main(["generate", "--out", str(tmp_path)]) == 0
    assert len(json.loads((tmp_path / "train.json").read_text())) == 1000
    assert len(json.loads((tmp_path / "test.json").read_text())) == 300


def test_generate_same_seed_same_bytes(workspace, tmp_path):
    assert main(["generate", "--config", str(workspace / "gen.json"), "--out", str(tmp_path)]) == 0
    assert tree_hashes(tmp_path) == tree_hashes(workspace / "data")


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "model.ppool").read_bytes().startswith(b"PPOOL1\n")
    with open(run / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3   # one epoch + two epochs
    assert (run / "manifest.json").exists()


def test_train_bit_identical(workspace, tmp_path):
    args = ["train", "--data", str(workspace / "data"), "--config", str(workspace / "train.json"), "--out"]
    assert main(args + [str(tmp_path)]) == 0
    assert (tmp_path / "model.ppool").read_bytes() == (workspace / "run" / "model.ppool").read_bytes()
    assert (tmp_path / "train_log.csv").read_bytes() == (workspace / "run" / "train_log.csv").read_bytes()


def test_no_stages_checkpoint_is_initialisation(workspace, tmp_path):
    cfg = write_json(tmp_path / "c.json", {**TRAIN, "stages": []})
    assert main(["train", "--data", str(workspace / "data"), "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    data = load_split(workspace / "data", "train")
    init = PartModel(TrainConfig.from_dict({**TRAIN, "stages": []}).model_config(5, 3, 32))
    assert (tmp_path / "o" / "model.ppool").read_bytes() == checkpoint_bytes(init)
    assert data.image_size == 32


def test_eval_outputs_and_determinism(workspace, tmp_path):
    args = ["eval", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "model.ppool")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("accuracy.csv", "pck.csv", "pcp.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    pcp_text = (tmp_path / "a" / "pcp.csv").read_text()
    assert pcp_text.startswith("# part boxes:")
    with open(tmp_path / "a" / "pck.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["name"] for r in rows} == {"head", "tail", "back", "belly", "foot", "mean"}


def test_untrained_pck_near_random_floor(workspace, tmp_path):
    """PCK@0.02 of an untrained model against a Monte-Carlo random-cell oracle."""
    test = load_split(workspace / "data", "test")
    model = PartModel(TrainConfig.from_dict(TRAIN).model_config(5, 3, 32))
    save_checkpoint(model, tmp_path / "init.ppool")
    assert main(["eval", "--data", str(workspace / "data"), "--checkpoint", str(tmp_path / "init.ppool"),
                 "--out", str(tmp_path / "e")]) == 0
    with open(tmp_path / "e" / "pck.csv") as fh:
        got = next(float(r["fraction"]) for r in csv.DictReader(fh) if r["name"] == "mean" and r["threshold"] == "0.02")
    r = np.random.default_rng(0)
    g, s = model.grid_size, model.stride
    draws = []
    for _ in range(200):
        cells = r.integers(0, g, size=test.keypoints.shape[:2] + (2,))
        xy = np.stack([(cells[..., 1] + 0.5) * s, (cells[..., 0] + 0.5) * s], axis=-1)
        draws.append(np.nanmean(pck(xy, test.keypoints, test.boxes).mean_over_parts()[0]))
    floor, spread = float(np.mean(draws)), float(np.std(draws))
    n_visible = int((test.keypoints[..., 2] > 0).sum())
    # the untrained prediction is one draw from a (non-uniform) cell distribution
    assert abs(got - floor) <= max(4 * spread, 3.0 / n_visible)


def covering_part(points, cx, cy):
    """Index of the last part whose plus marker covers pixel (cx, cy), or None."""
    hit = None
    for k, (x, y) in enumerate(points):
        if abs(int(np.rint(x)) - cx) + abs(int(np.rint(y)) - cy) <= 1:
            hit = k
    return hit


def test_viz_outputs(workspace, tmp_path):
    ckpt = workspace / "run" / "model.ppool"
    assert main(["viz", "--data", str(workspace / "data"), "--checkpoint", str(ckpt), "--out", str(tmp_path),
                 "--n", "2"]) == 0
    model = load_checkpoint(ckpt)
    heat = read_pnm(tmp_path / "00000_part0.pgm")
    assert heat.shape == (model.grid_size, model.grid_size)
    overlay = read_pnm(tmp_path / "00001_overlay.ppm")
    assert overlay.shape == (32, 64, 3)
    test = load_split(workspace / "data", "test")
    xy = decode_array(model.keypoint_logits(model.features(test.images[1:2])), model.stride)[0]
    right = overlay[:, 32:]
    for x, y in xy:
        cx, cy = int(np.rint(x)), int(np.rint(y))
        assert tuple(right[cy, cx]) == tuple(PART_COLORS[covering_part(xy, cx, cy)])


def test_heatmap_planted_spike_is_unique_max(tmp_path):
    logits = np.full((7, 5), -3.0)
    logits[4, 2] = 3.0
    write_pgm(tmp_path / "h.pgm", heatmap_image(logits))
    img = read_pnm(tmp_path / "h.pgm")
    assert img.shape == (7, 5)
    assert np.argwhere(img == img.max()).tolist() == [[4, 2]]


def test_viz_n_too_large(workspace, tmp_path):
    assert main(["viz", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "model.ppool"),
                 "--out", str(tmp_path), "--n", "31"]) == 2


# -- exit codes -----------------------------------------------------------------------

def test_exit_config_error(tmp_path):
    cfg = write_json(tmp_path / "bad.json", {"num_classes": 0})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_exit_data_error(workspace, tmp_path):
    data = tmp_path / "data"
    assert main(["generate", "--config", str(workspace / "gen.json"), "--out", str(data)]) == 0
    (data / "train" / "00007.ppm").unlink()
    assert main(["train", "--data", str(data), "--config", str(workspace / "train.json"),
                 "--out", str(tmp_path / "o")]) == 3


def test_exit_numeric_error(workspace, tmp_path):
    model = load_checkpoint(workspace / "run" / "model.ppool")
    for _, p in model.group_parameters("backbone"):
        p.data[...] = np.nan
    save_checkpoint(model, tmp_path / "nan.ppool")
    assert main(["eval", "--data", str(workspace / "data"), "--checkpoint", str(tmp_path / "nan.ppool"),
                 "--out", str(tmp_path / "o")]) == 4


def test_exit_part_count_mismatch(workspace, tmp_path):
    gen = write_json(tmp_path / "g.json", {**GEN, "num_parts": 3, "num_classes": 3})
    assert main(["generate", "--config", gen, "--out", str(tmp_path / "d")]) == 0
    assert main(["eval", "--data", str(tmp_path / "d"), "--checkpoint", str(workspace / "run" / "model.ppool"),
                 "--out", str(tmp_path / "o")]) == 2


def test_console_script_entry(tmp_path):
    out = subprocess.run([sys.executable, "-m", "partpool.cli", "generate", "--config",
                          write_json(tmp_path / "k.json", {"num_classes": 1}), "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert out.returncode == 2 and "num_classes" in out.stderr


def test_thread_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("PARTPOOL_THREADS", "zero")
    assert main(["generate", "--out", str(tmp_path)]) == 2
