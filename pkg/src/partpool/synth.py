"""Synthetic pose-varying fine-grained dataset.

Every object is a pale body ellipse with ``P`` coloured part discs at fixed
canonical offsets, placed in the image by a random similarity transform
(rotation, translation, scale). All classes share one palette; a class is a
permutation assigning palette colours to parts. The global colour content of
an image therefore says nothing about the class, while the colour at each
part does.
"""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .imageio import read_pnm, write_ppm

# canonical part centres relative to the body centre, x right / y down, at scale 1
CANONICAL_OFFSETS = np.array([
    [19.0, -4.0],   # head
    [-19.0, 2.5],   # tail
    [2.5, -12.5],   # back
    [-5.0, 11.0],   # belly
    [10.0, 9.0],    # foot
])
PART_NAMES = ["head", "tail", "back", "belly", "foot"]
PART_GROUPS = {"head": [0, 2], "body": [1, 3, 4]}

BODY_AXES = (19.0, 10.0)
PART_RADIUS = 4.0
BODY_COLOR = (225, 225, 215)
BACKGROUND_RANGE = (40, 150)
PALETTE = np.array([
    [235, 30, 30],
    [30, 200, 40],
    [40, 60, 235],
    [245, 215, 20],
    [200, 30, 210],
    [20, 210, 220],
    [250, 140, 20],
    [20, 20, 20],
], dtype=np.uint8)

SPLIT_IDS = {"train": 0, "test": 1}


@dataclass
class GeneratorConfig:
    seed: int = 0
    image_size: int = 64
    num_classes: int = 10
    num_parts: int = 5
    train_per_class: int = 100
    test_per_class: int = 30
    max_rotation_deg: float = 90.0
    max_translation: float | None = None  # defaults to image_size / 8
    scale_range: tuple[float, float] = (0.7, 1.3)
    occlusion_prob: float = 0.1
    # "permutation": shared palette, class = colour-to-part assignment.
    # "disjoint": each class paints every part in its own colour (negative control).
    encoding: str = "permutation"

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.validate()

    @property
    def translation(self) -> float:
        return self.image_size / 8 if self.max_translation is None else self.max_translation

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 1 <= self.num_parts <= len(CANONICAL_OFFSETS):
            raise ConfigError(f"num_parts must lie in [1, {len(CANONICAL_OFFSETS)}], got {self.num_parts}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ConfigError("samples per class must be non-negative")
        if not 0.0 <= self.occlusion_prob < 1.0:
            raise ConfigError(f"occlusion_prob must lie in [0, 1), got {self.occlusion_prob}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid scale_range {self.scale_range}")
        if self.encoding not in ("permutation", "disjoint"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        if self.encoding == "disjoint" and self.num_classes > len(PALETTE):
            raise ConfigError(f"disjoint encoding supports at most {len(PALETTE)} classes")
        if self.encoding == "permutation" and self.num_classes > _factorial(self.num_parts):
            raise ConfigError(f"{self.num_parts} parts cannot encode {self.num_classes} classes by permutation")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d


def _factorial(n: int) -> int:
    out = 1
    for i in range(2, n + 1):
        out *= i
    return out


@dataclass(frozen=True)
class Pose:
    angle_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0

    def apply(self, offsets: np.ndarray, center: float) -> np.ndarray:
        t = np.deg2rad(self.angle_deg)
        rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        return center + np.array([self.tx, self.ty]) + self.scale * offsets @ rot.T


@dataclass
class Sample:
    image: np.ndarray          # (3, S, S) float32 in [0, 1]
    keypoints: np.ndarray      # (P, 3): x, y, visible
    class_label: int
    object_box: tuple          # x, y, w, h in pixels
    file: str = ""


@dataclass
class Dataset:
    """Column-oriented split: one array per field, indexed by sample."""

    images: np.ndarray         # (N, 3, S, S) float32
    keypoints: np.ndarray      # (N, P, 3) float64
    labels: np.ndarray         # (N,) int64
    boxes: np.ndarray          # (N, 4) float64, x y w h
    files: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], self.keypoints[i], int(self.labels[i]),
                      tuple(self.boxes[i]), self.files[i] if self.files else "")

    @property
    def num_parts(self) -> int:
        return self.keypoints.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        files = [self.files[i] for i in idx] if self.files else []
        return Dataset(self.images[idx], self.keypoints[idx], self.labels[idx], self.boxes[idx], files)


def class_codes(config: GeneratorConfig) -> np.ndarray:
    """(K, P) palette index of each part for each class.

    For prime P the codes are the affine maps ``part -> (a*part + b) mod P``,
    any two of which agree on at most one part. Otherwise permutations are
    picked greedily, keeping the largest minimum Hamming distance that still
    yields K codes.
    """
    k, p = config.num_classes, config.num_parts
    if config.encoding == "disjoint":
        return np.repeat(np.arange(k)[:, None], p, axis=1)
    if p > 2 and all(p % d for d in range(2, p)) and k <= p * (p - 1):
        parts = np.arange(p)
        codes = [(a * parts + b) % p for a in range(1, p) for b in range(p)]
        return np.array(codes[:k])
    perms = list(itertools.permutations(range(p)))
    for min_dist in range(p, 0, -1):
        chosen = []
        for perm in perms:
            if all(sum(a != b for a, b in zip(perm, c)) >= min_dist for c in chosen):
                chosen.append(perm)
                if len(chosen) == k:
                    return np.array(chosen)
    raise ConfigError(f"cannot build {k} distinct codes over {p} parts")


def _disc_mask(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    c = np.arange(size) + 0.5
    return (c[None, :] - cx) ** 2 + (c[:, None] - cy) ** 2 <= r * r


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, angle_deg: float) -> np.ndarray:
    c = np.arange(size) + 0.5
    dx = c[None, :] - cx
    dy = c[:, None] - cy
    t = np.deg2rad(angle_deg)
    u = dx * np.cos(t) + dy * np.sin(t)
    v = -dx * np.sin(t) + dy * np.cos(t)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def render(config: GeneratorConfig, pose: Pose, class_label: int, visible: np.ndarray,
           rng: np.random.Generator | None = None):
    """Rasterise one object.

    Returns ``(rgb uint8 (S,S,3), keypoints (P,3), box (x,y,w,h))``. With
    ``rng=None`` the background is flat grey instead of noise.
    """
    s = config.image_size
    p = config.num_parts
    unit = s / 64.0
    if rng is None:
        img = np.full((s, s, 3), sum(BACKGROUND_RANGE) // 2, dtype=np.uint8)
    else:
        lo, hi = BACKGROUND_RANGE
        img = rng.integers(lo, hi + 1, size=(s, s, 3), dtype=np.uint8)
    centers = pose.apply(CANONICAL_OFFSETS[:p] * unit, s / 2.0)
    body = _ellipse_mask(s, s / 2.0 + pose.tx, s / 2.0 + pose.ty, BODY_AXES[0] * unit * pose.scale,
                         BODY_AXES[1] * unit * pose.scale, pose.angle_deg)
    img[body] = BODY_COLOR
    mask = body.copy()
    codes = class_codes(config)[class_label]
    radius = PART_RADIUS * unit * pose.scale
    for part in range(p):
        if not visible[part]:
            continue
        disc = _disc_mask(s, centers[part, 0], centers[part, 1], radius)
        img[disc] = PALETTE[codes[part]]
        mask |= disc
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise DataError("object fell outside the image")
    box = (float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))
    kps = np.concatenate([centers, visible[:, None].astype(float)], axis=1)
    return img, kps, box


def _sample_pose(config: GeneratorConfig, rng: np.random.Generator) -> Pose:
    t = config.translation
    return Pose(angle_deg=rng.uniform(-config.max_rotation_deg, config.max_rotation_deg),
                tx=rng.uniform(-t, t), ty=rng.uniform(-t, t),
                scale=rng.uniform(*config.scale_range))


def _pose_ok(config: GeneratorConfig, pose: Pose) -> bool:
    s = config.image_size
    centers = pose.apply(CANONICAL_OFFSETS[:config.num_parts] * s / 64.0, s / 2.0)
    margin = PART_RADIUS * s / 64.0 * pose.scale
    return bool(((centers >= margin) & (centers <= s - margin)).all())


def generate_sample(config: GeneratorConfig, split: str, index: int):
    """Render sample ``index`` of ``split``; a pure function of its arguments."""
    if split not in SPLIT_IDS:
        raise ConfigError(f"unknown split {split!r}")
    per_class = config.train_per_class if split == "train" else config.test_per_class
    label = index // per_class
    rng = np.random.default_rng([config.seed, SPLIT_IDS[split], index])
    for _ in range(100):
        pose = _sample_pose(config, rng)
        if _pose_ok(config, pose):
            break
    else:
        raise DataError(f"could not place sample {split}/{index} inside the image")
    visible = rng.random(config.num_parts) >= config.occlusion_prob
    img, kps, box = render(config, pose, label, visible, rng)
    return img, kps, label, box


def generate_split(config: GeneratorConfig, split: str) -> Dataset:
    per_class = config.train_per_class if split == "train" else config.test_per_class
    n = per_class * config.num_classes
    s, p = config.image_size, config.num_parts
    images = np.empty((n, 3, s, s), dtype=np.float32)
    keypoints = np.empty((n, p, 3))
    labels = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, 4))
    files = []
    for i in range(n):
        img, kps, label, box = generate_sample(config, split, i)
        images[i] = img.transpose(2, 0, 1) / np.float32(255.0)
        keypoints[i], labels[i], boxes[i] = kps, label, box
        files.append(f"{split}/{i:05d}.ppm")
    return Dataset(images, keypoints, labels, boxes, files)


def generate(config: GeneratorConfig) -> tuple[Dataset, Dataset]:
    return generate_split(config, "train"), generate_split(config, "test")


# ---------------------------------------------------------------------------
# sanity checks on a generated dataset
# ---------------------------------------------------------------------------

def color_histograms(images: np.ndarray, bins: int = 4) -> np.ndarray:
    """Joint RGB histogram per image, normalised to sum 1; images (N,3,S,S) in [0,1]."""
    q = np.minimum((images * bins).astype(int), bins - 1)
    idx = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    flat = idx.reshape(len(images), -1)
    hist = np.stack([np.bincount(row, minlength=bins ** 3) for row in flat]).astype(float)
    return hist / hist.sum(axis=1, keepdims=True)


def chi_square(a: np.ndarray, b: np.ndarray) -> float:
    denom = a + b
    nz = denom > 0
    return float(0.5 * ((a[nz] - b[nz]) ** 2 / denom[nz]).sum())


@dataclass
class ConfusabilityReport:
    max_distance: float
    threshold: float
    passed: bool

    @property
    def margin(self) -> float:
        return self.threshold - self.max_distance


def holistic_confusability_check(dataset: Dataset, threshold: float = 0.01, bins: int = 4,
                                 raise_on_fail: bool = False) -> ConfusabilityReport:
    """Check that class-mean global colour histograms are nearly identical.

    The largest pairwise chi-square distance between class means must stay
    below ``threshold``.
    """
    hists = color_histograms(dataset.images, bins)
    classes = np.unique(dataset.labels)
    means = [hists[dataset.labels == c].mean(axis=0) for c in classes]
    worst = max((chi_square(a, b) for a, b in itertools.combinations(means, 2)), default=0.0)
    report = ConfusabilityReport(worst, threshold, worst < threshold)
    if raise_on_fail and not report.passed:
        raise ConfigError(f"classes separable by global colour (chi2 {worst:.4f} >= {threshold})")
    return report


def part_patch_features(dataset: Dataset, half: int = 1) -> np.ndarray:
    """Mean colour of a (2*half+1)^2 patch at each ground-truth keypoint; zeros if invisible."""
    n, p, _ = dataset.keypoints.shape
    s = dataset.image_size
    feats = np.zeros((n, p, 3))
    for i in range(n):
        for k in range(p):
            x, y, vis = dataset.keypoints[i, k]
            if not vis:
                continue
            cx, cy = int(x), int(y)
            patch = dataset.images[i, :, max(cy - half, 0):min(cy + half + 1, s), max(cx - half, 0):min(cx + half + 1, s)]
            feats[i, k] = patch.reshape(3, -1).mean(axis=1)
    return feats.reshape(n, -1)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Upper-bound oracle: classify by part-local colour with known correspondence."""
    ftr, fte = part_patch_features(train), part_patch_features(test)
    classes = np.unique(train.labels)
    cents = np.stack([ftr[train.labels == c].mean(axis=0) for c in classes])
    d = ((fte[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float((classes[d.argmin(axis=1)] == test.labels).mean())


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def save_split(dataset: Dataset, root, split: str) -> None:
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(len(dataset)):
        fname = dataset.files[i] if dataset.files else f"{split}/{i:05d}.ppm"
        rgb = np.rint(dataset.images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        write_ppm(root / fname, rgb)
        kps = [{"part": k, "x": float(x), "y": float(y), "visible": bool(v)}
               for k, (x, y, v) in enumerate(dataset.keypoints[i])]
        records.append({"file": fname, "class": int(dataset.labels[i]),
                        "box": [float(v) for v in dataset.boxes[i]], "keypoints": kps})
    with open(root / f"{split}.json", "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)


def load_split(root, split: str) -> Dataset:
    root = Path(root)
    ann_path = root / f"{split}.json"
    try:
        with open(ann_path, encoding="utf-8") as fh:
            records = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"{ann_path}: annotation file missing") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{ann_path}: invalid JSON ({exc})") from exc
    if not records:
        raise DataError(f"{ann_path}: no samples")
    images, kps, labels, boxes, files = [], [], [], [], []
    num_parts = None
    for rec in records:
        try:
            fname = rec["file"]
            path = root / fname
            if not path.exists():
                raise DataError(f"{path}: image file missing")
            rgb = read_pnm(path)
            if rgb.ndim != 3:
                raise DataError(f"{path}: expected an RGB (P6) image")
            pts = sorted(rec["keypoints"], key=lambda k: k["part"])
            arr = np.array([[k["x"], k["y"], float(bool(k["visible"]))] for k in pts], dtype=float)
            label = int(rec["class"])
            box = [float(v) for v in rec["box"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{ann_path}: malformed record for {rec.get('file', '?') if isinstance(rec, dict) else rec!r}: {exc}") from exc
        if num_parts is None:
            num_parts = len(arr)
        if len(arr) != num_parts or len(box) != 4:
            raise DataError(f"{root / fname}: expected {num_parts} keypoints and a 4-value box")
        images.append(rgb.transpose(2, 0, 1))
        kps.append(arr)
        labels.append(label)
        boxes.append(box)
        files.append(fname)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"{root}/{split}: images have differing sizes {sorted(shapes)}")
    imgs = np.stack(images).astype(np.float32) / np.float32(255.0)
    return Dataset(imgs, np.stack(kps), np.array(labels, dtype=np.int64), np.array(boxes), files)


def save_dataset(train: Dataset, test: Dataset, root) -> None:
    os.makedirs(root, exist_ok=True)
    save_split(train, root, "train")
    save_split(test, root, "test")
