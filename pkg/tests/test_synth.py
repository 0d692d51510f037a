import hashlib

import numpy as np
import pytest

from partpool.errors import ConfigError, DataError
from partpool.imageio import read_pnm
from partpool.synth import (CANONICAL_OFFSETS, PALETTE, GeneratorConfig, Pose, class_codes, generate,
                            generate_sample, holistic_confusability_check, load_split, nearest_centroid_accuracy,
                            render, save_dataset)


def test_identity_pose_keypoints():
    cfg = GeneratorConfig()
    _, kps, _ = render(cfg, Pose(), 0, np.ones(5, bool))
    np.testing.assert_allclose(kps[:, :2], CANONICAL_OFFSETS + 32.0)


def test_rotation_180_reflects_through_center():
    cfg = GeneratorConfig()
    center = np.array([32.0 + 3, 32.0 - 2])
    _, a, _ = render(cfg, Pose(0.0, 3, -2), 1, np.ones(5, bool))
    _, b, _ = render(cfg, Pose(180.0, 3, -2), 1, np.ones(5, bool))
    np.testing.assert_allclose(b[:, :2], 2 * center - a[:, :2], atol=0.5)


def test_keypoint_pixels_carry_part_colour():
    cfg = GeneratorConfig()
    r = np.random.default_rng(0)
    for label in range(cfg.num_classes):
        pose = Pose(r.uniform(-90, 90), r.uniform(-4, 4), r.uniform(-4, 4), r.uniform(0.7, 1.3))
        visible = np.array([1, 1, 0, 1, 1], bool)
        img, kps, box = render(cfg, pose, label, visible)
        codes = class_codes(cfg)[label]
        x0, y0, w, h = box
        for k in np.nonzero(visible)[0]:
            x, y = kps[k, :2]
            assert tuple(img[int(y), int(x)]) == tuple(PALETTE[codes[k]])
            assert x0 <= x <= x0 + w and y0 <= y <= y0 + h


def test_generation_is_byte_identical(tiny_gen_config):
    a, b = generate(tiny_gen_config), generate(tiny_gen_config)
    for sa, sb in zip(a, b):
        assert hashlib.sha256(sa.images.tobytes()).digest() == hashlib.sha256(sb.images.tobytes()).digest()
        assert sa.keypoints.tobytes() == sb.keypoints.tobytes()


def test_sample_is_pure_function_of_index(tiny_gen_config):
    img1, kp1, _, _ = generate_sample(tiny_gen_config, "train", 5)
    generate_sample(tiny_gen_config, "train", 2)
    img2, kp2, _, _ = generate_sample(tiny_gen_config, "train", 5)
    assert img1.tobytes() == img2.tobytes() and kp1.tobytes() == kp2.tobytes()


def test_per_class_counts(tiny_data, tiny_gen_config):
    train, test = tiny_data
    np.testing.assert_array_equal(np.bincount(train.labels), [tiny_gen_config.train_per_class] * 3)
    np.testing.assert_array_equal(np.bincount(test.labels), [tiny_gen_config.test_per_class] * 3)


def test_visible_keypoints_inside_image(tiny_data):
    for ds in tiny_data:
        vis = ds.keypoints[..., 2] > 0
        xy = ds.keypoints[..., :2][vis]
        assert np.all((xy >= 0) & (xy <= ds.image_size))


@pytest.mark.parametrize("bad", [dict(num_classes=0), dict(num_classes=1), dict(num_parts=0),
                                 dict(occlusion_prob=1.0), dict(encoding="stripes")])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        GeneratorConfig(**bad)


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        GeneratorConfig.from_dict({"colour": 3})


def test_codes_agree_on_at_most_one_part():
    codes = class_codes(GeneratorConfig())
    assert len({tuple(c) for c in codes}) == 10
    for i in range(10):
        assert sorted(codes[i]) == list(range(5))
        for j in range(i):
            assert (codes[i] == codes[j]).sum() <= 1


def test_confusability_passes_for_shared_palette():
    cfg = GeneratorConfig(seed=1, num_classes=2, train_per_class=60, test_per_class=0)
    train, _ = generate(cfg)
    report = holistic_confusability_check(train)
    assert report.passed and report.margin > 0


def test_confusability_fails_for_disjoint_palettes():
    cfg = GeneratorConfig(seed=1, num_classes=2, train_per_class=60, test_per_class=0, encoding="disjoint")
    train, _ = generate(cfg)
    assert not holistic_confusability_check(train).passed
    with pytest.raises(ConfigError):
        holistic_confusability_check(train, raise_on_fail=True)


def test_round_trip_through_disk(tiny_data, tmp_path):
    train, test = tiny_data
    save_dataset(train, test, tmp_path)
    back = load_split(tmp_path, "train")
    assert back.images.tobytes() == train.images.tobytes()
    np.testing.assert_array_equal(back.keypoints, train.keypoints)
    np.testing.assert_array_equal(back.labels, train.labels)
    np.testing.assert_array_equal(back.boxes, train.boxes)
    assert read_pnm(tmp_path / train.files[0]).shape == (32, 32, 3)


def test_missing_image_names_file(tiny_data, tmp_path):
    train, test = tiny_data
    save_dataset(train, test, tmp_path)
    (tmp_path / train.files[3]).unlink()
    with pytest.raises(DataError, match=train.files[3]):
        load_split(tmp_path, "train")


def test_corrupt_image_names_file(tiny_data, tmp_path):
    train, test = tiny_data
    save_dataset(train, test, tmp_path)
    (tmp_path / train.files[1]).write_bytes(b"P6\n32 32\n255\n\x00\x01")
    with pytest.raises(DataError, match="00001"):
        load_split(tmp_path, "train")


def test_default_dataset_properties():
    """Default config: passes the confusability check and the part-local oracle is >= 95%."""
    train, test = generate(GeneratorConfig())
    assert len(train) == 1000 and len(test) == 300
    report = holistic_confusability_check(train)
    assert report.passed
    assert nearest_centroid_accuracy(train, test) >= 0.95
