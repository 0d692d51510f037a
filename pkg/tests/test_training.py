import csv

import numpy as np
import pytest

from conftest import tiny_model
from partpool.backbone import BackboneConfig
from partpool.checkpoint import checkpoint_bytes
from partpool.errors import ConfigError
from partpool.gradcheck import RTOL, numerical_gradient, relative_error
from partpool.model import GROUPS, ModelConfig, PartModel
from partpool.parts import encode_targets, heatmap_loss, target_cells
from partpool.tensor import softmax_cross_entropy
from partpool.training import (Stage, TrainConfig, converged, default_schedule, joint_loss, pooled_locations,
                               predict, run_stage, train, write_log)


def group_bytes(model, group):
    return b"".join(p.data.tobytes() for _, p in model.group_parameters(group))


def test_default_schedule_shape():
    stages = default_schedule(learning_rate=1.0)
    assert [s.trainable for s in stages] == [["kphead"], ["kphead", "backbone"], ["classifier"], list(GROUPS)]
    assert [s.objective for s in stages] == ["keypoint", "keypoint", "classify", "joint"]
    assert stages[1].learning_rate == pytest.approx(0.1) and stages[3].learning_rate == pytest.approx(0.1)
    assert stages[2].pooling == "gt" and stages[3].pooling == "gt"


def test_unknown_group_is_config_error():
    with pytest.raises(ConfigError):
        Stage("x", ["decoder"], 0.1, 1)


def test_empty_trainable_stage_is_noop(tiny_data):
    model = tiny_model()
    before = checkpoint_bytes(model)
    rows = run_stage(model, tiny_data[0], Stage("none", [], 0.1, 3), TrainConfig())
    assert rows == [] and checkpoint_bytes(model) == before


@pytest.mark.parametrize("stage", default_schedule(learning_rate=1e-3, epochs=(1, 1, 1, 1)),
                         ids=lambda s: s.name)
def test_frozen_groups_bit_identical(tiny_data, stage):
    model = tiny_model()
    before = {g: group_bytes(model, g) for g in GROUPS}
    run_stage(model, tiny_data[0], stage, TrainConfig(batch_size=4))
    for g in GROUPS:
        if g in stage.trainable:
            assert group_bytes(model, g) != before[g], g
        else:
            assert group_bytes(model, g) == before[g], g


def test_classifier_stage_ignores_poisoned_head(tiny_data):
    data = tiny_data[0]
    cfg = TrainConfig(batch_size=4)
    stage = Stage("classifier", ["classifier"], 1e-2, 2, "classify", "gt")
    clean, poisoned = tiny_model(), tiny_model()
    for p in poisoned.kphead.parameters():
        p.data[...] = np.nan
    a = run_stage(clean, data, stage, cfg)
    b = run_stage(poisoned, data, stage, cfg)
    assert [r["loss_cls"] for r in a] == [r["loss_cls"] for r in b]
    assert group_bytes(clean, "classifier") == group_bytes(poisoned, "classifier")


def test_fixed_seed_reproducible(tiny_data):
    cfg = TrainConfig(stages=default_schedule(1e-3, epochs=(1, 1, 1, 1)), batch_size=4)
    runs = []
    for _ in range(2):
        model = tiny_model()
        rows = train(model, tiny_data[0], cfg)
        runs.append((rows, checkpoint_bytes(model)))
    assert runs[0] == runs[1]


def test_log_rows_and_csv(tiny_data, tmp_path):
    cfg = TrainConfig(stages=[Stage("a", ["kphead"], 1e-3, 2, "keypoint", converge_tol=None),
                              Stage("b", ["classifier"], 1e-3, 3, "classify", converge_tol=None)], batch_size=6)
    rows = train(tiny_model(), tiny_data[0], cfg)
    assert len(rows) == 5
    write_log(rows, tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == ["stage", "epoch", "loss_kp", "loss_cls", "loss_total"]
    assert table[0]["loss_cls"] == "" and table[-1]["loss_kp"] == ""
    assert float(table[-1]["loss_total"]) == pytest.approx(rows[-1]["loss_total"])


def test_convergence_rule():
    assert not converged([10, 9, 8], 1e-3, 3)
    assert not converged([10, 9, 8, 7], 1e-3, 3)
    assert converged([10, 10, 10, 9.995], 1e-3, 3)
    assert converged([10, 11, 12, 13], 1e-3, 3)


def test_stage_stops_on_convergence(tiny_data):
    stage = Stage("still", ["classifier"], 0.0, 10, "classify", converge_window=2)
    rows = run_stage(tiny_model(), tiny_data[0], stage, TrainConfig())
    assert len(rows) == 3


def test_no_tolerance_runs_every_epoch(tiny_data):
    stage = Stage("still", ["classifier"], 0.0, 6, "classify", converge_tol=None, converge_window=2)
    assert len(run_stage(tiny_model(), tiny_data[0], stage, TrainConfig())) == 6


def test_keypoint_loss_decreases(tiny_data):
    data = tiny_data[0]
    model = tiny_model()
    stage = Stage("kp", ["kphead", "backbone"], 3e-4, 20, "keypoint", converge_tol=None)
    rows = run_stage(model, data, stage, TrainConfig(batch_size=4))
    assert rows[-1]["loss_kp"] < rows[0]["loss_kp"]


def test_config_json_keys(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"seed": 3, "stages": [], "batch_size": 2, "lambda": 0.5, "window": 1,'
                    ' "compact_bilinear": {"enabled": true, "dim": 64, "seed": 9}}')
    cfg = TrainConfig.from_json(path)
    assert (cfg.seed, cfg.batch_size, cfg.lambda_, cfg.window) == (3, 2, 0.5, 1)
    mc = cfg.model_config(5, 4, 32)
    assert mc.holistic == "compact_bilinear" and mc.compact_dim == 64 and mc.compact_seed == 9


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})


# -- pooling protocol -----------------------------------------------------------------

def test_train_mode_matches_encode_targets(tiny_data):
    data = tiny_data[0]
    model = tiny_model()
    g = model.grid_size
    np.testing.assert_array_equal(pooled_locations(model, data.keypoints, "train"),
                                  target_cells(data.keypoints, g, g, model.stride))


def test_test_mode_finds_planted_spike(rng):
    model = tiny_model()
    for p in model.kphead.parameters():
        p.data[...] = 0
    # a single nonzero feature read by every part's filter plants the spike
    fmap = model.features(rng.random((1, 3, 32, 32)).astype(np.float32))
    fmap.data[...] = 0
    fmap.data[0, 0, 2, 1] = 1.0
    model.kphead.params["weight"].data[:, 0] = 1.0
    cells = pooled_locations(model, mode="test", fmap=fmap)
    assert all(tuple(c) == (2, 1) for c in cells[0])


def test_lambda_zero_is_pure_classification(rng):
    images = rng.random((2, 3, 32, 32))
    kp = np.array([[[5.0, 6.0, 1]] * 5, [[20.0, 9.0, 1]] * 5])
    labels = np.array([0, 2])
    a, b = tiny_model(dtype=np.float64), tiny_model(dtype=np.float64)
    joint_loss(a, images, kp, labels, lam=0.0)
    locs = pooled_locations(b, kp, "train")
    b.loss_and_backward(images, kp, labels, locs, kp_weight=0.0, cls_weight=1.0)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.grad, pb.grad)
    assert not any(p.grad.any() for p in a.kphead.parameters())


def test_large_lambda_aligns_with_keypoint_gradient(rng):
    images = rng.random((2, 3, 32, 32))
    kp = np.array([[[5.0, 6.0, 1]] * 5, [[20.0, 9.0, 1]] * 5])
    labels = np.array([0, 2])
    a, b = tiny_model(dtype=np.float64), tiny_model(dtype=np.float64)
    joint_loss(a, images, kp, labels, lam=1e6)
    b.loss_and_backward(images, kp, labels, kp_weight=1.0, cls_weight=0.0)
    ga = np.concatenate([p.grad.ravel() for _, p in a.group_parameters("backbone")])
    gb = np.concatenate([p.grad.ravel() for _, p in b.group_parameters("backbone")])
    assert ga @ gb / (np.linalg.norm(ga) * np.linalg.norm(gb)) >= 0.99


def small_model64(**kw):
    bb = BackboneConfig(input_size=8, widths=[2, 2, 3], feature_channels=3, num_parts=2, pool_last=False)
    return PartModel(ModelConfig(backbone=bb, num_classes=3, **kw), dtype=np.float64)


def test_joint_loss_gradcheck_one_sample(rng):
    model = small_model64()
    images = rng.random((1, 3, 8, 8))
    kp = np.array([[[2.0, 5.0, 1], [6.5, 1.0, 1]]])
    labels = np.array([1])

    def loss():
        fmap = model.features(images)
        locs = pooled_locations(model, kp, "train")
        h, w = fmap.grid
        lk, _ = heatmap_loss(model.keypoint_logits(fmap), encode_targets(kp, h, w, fmap.stride, np.float64))
        lc, _ = softmax_cross_entropy(model.class_logits(fmap, locs), labels)
        return lc + 1.0 * lk

    model.zero_grad()
    total = joint_loss(model, images, kp, labels, lam=1.0)
    assert total == pytest.approx(loss(), rel=1e-12)
    for name, p in model.named_parameters():
        assert relative_error(p.grad.copy(), numerical_gradient(loss, p.data)) < RTOL, name


def test_predict_shapes(tiny_data):
    test = tiny_data[1]
    pred = predict(tiny_model(), test.images, batch_size=4)
    assert pred.keypoints.shape == (len(test), 5, 2)
    assert pred.class_logits.shape == (len(test), 3) and pred.labels.shape == (len(test),)


def test_shipped_desk_config_matches_recipe():
    from pathlib import Path

    from partpool.experiment import desk_config
    path = Path(__file__).resolve().parents[1] / "configs" / "desk_train.json"
    assert TrainConfig.from_json(path) == desk_config()
