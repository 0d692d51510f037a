"""Staged optimisation of a :class:`~partpool.model.PartModel`.

A schedule is an ordered list of :class:`Stage` objects. Each stage names the
parameter groups it may update, its objective and learning rate; every other
group stays bit-identical for the duration of the stage.

Objectives:

``keypoint``  heatmap loss only
``classify``  softmax loss only
``joint``     softmax loss + ``lambda`` * heatmap loss
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import BackboneConfig, FeatureMap, argmax_cells, decode_array
from .errors import ConfigError
from .model import GROUPS, ModelConfig, PartModel
from .parts import target_cells
from .synth import Dataset
from .tensor import SGD

log = logging.getLogger(__name__)

OBJECTIVES = ("keypoint", "classify", "joint")
LOG_FIELDS = ["stage", "epoch", "loss_kp", "loss_cls", "loss_total"]


@dataclass
class Stage:
    name: str
    trainable: list[str]
    learning_rate: float
    epochs: int
    objective: str = "joint"
    pooling: str = "gt"          # "gt" or "pred": which locations feed the part pooling
    converge_tol: float | None = 1e-3   # relative improvement over ``converge_window`` epochs; None runs every epoch
    converge_window: int = 3

    def __post_init__(self):
        self.trainable = list(self.trainable)
        unknown = set(self.trainable) - set(GROUPS)
        if unknown:
            raise ConfigError(f"stage {self.name!r}: unknown parameter groups {sorted(unknown)}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"stage {self.name!r}: unknown objective {self.objective!r}")
        if self.pooling not in ("gt", "pred"):
            raise ConfigError(f"stage {self.name!r}: pooling must be 'gt' or 'pred'")
        if self.learning_rate < 0 or self.epochs < 0:
            raise ConfigError(f"stage {self.name!r}: learning rate and epochs must be non-negative")


def default_schedule(learning_rate: float = 1e-2, epochs=(5, 10, 5, 5), ratio: float = 0.1,
                     stage4_pooling: str = "gt") -> list[Stage]:
    """The four-stage recipe: head, then localisation net, then classifier, then everything.

    Stages 2 and 4 run at ``ratio`` times the learning rate of the stage
    before them.
    """
    e1, e2, e3, e4 = epochs
    return [
        Stage("keypoint-head", ["kphead"], learning_rate, e1, "keypoint"),
        Stage("keypoint-finetune", ["kphead", "backbone"], learning_rate * ratio, e2, "keypoint"),
        Stage("classifier", ["classifier"], learning_rate, e3, "classify", "gt"),
        Stage("joint-finetune", list(GROUPS), learning_rate * ratio, e4, "joint", stage4_pooling),
    ]


@dataclass
class CompactBilinearConfig:
    enabled: bool = False
    dim: int = 5120
    seed: int = 0
    per_part: bool = False


@dataclass
class TrainConfig:
    seed: int = 0
    stages: list[Stage] = field(default_factory=default_schedule)
    batch_size: int = 8
    lambda_: float = 1.0
    window: int = 3
    pool_mode: str = "mean"
    compact_bilinear: CompactBilinearConfig = field(default_factory=CompactBilinearConfig)
    backbone: dict = field(default_factory=dict)
    holistic_only: bool = False
    momentum: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {"seed", "stages", "batch_size", "lambda", "window", "pool_mode", "compact_bilinear",
                 "backbone", "holistic_only", "momentum"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        try:
            kwargs = {k: d[k] for k in ("seed", "batch_size", "window", "pool_mode", "backbone",
                                        "holistic_only", "momentum") if k in d}
            if "lambda" in d:
                kwargs["lambda_"] = float(d["lambda"])
            if "stages" in d:
                kwargs["stages"] = [Stage(**s) for s in d["stages"]]
            if "compact_bilinear" in d:
                kwargs["compact_bilinear"] = CompactBilinearConfig(**d["compact_bilinear"])
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"invalid training config: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    def model_config(self, num_parts: int, num_classes: int, input_size: int) -> ModelConfig:
        bb = dict(self.backbone)
        bb.update(num_parts=num_parts, input_size=input_size)
        try:
            bcfg = BackboneConfig(**bb)
        except TypeError as exc:
            raise ConfigError(f"invalid backbone config: {exc}") from exc
        cb = self.compact_bilinear
        return ModelConfig(backbone=bcfg, num_classes=num_classes, window=self.window, pool_mode=self.pool_mode,
                           use_parts=not self.holistic_only,
                           holistic="compact_bilinear" if cb.enabled else "gap",
                           compact_per_part=cb.enabled and cb.per_part, compact_dim=cb.dim,
                           compact_seed=cb.seed, seed=self.seed)


# ---------------------------------------------------------------------------
# pooling protocol and losses
# ---------------------------------------------------------------------------

def pooled_locations(model: PartModel, keypoints=None, mode: str = "train", fmap: FeatureMap | None = None,
                     images=None) -> np.ndarray:
    """Grid cells fed to the coordinate transfer layer.

    ``train`` mode uses the ground-truth keypoints (invisible parts come back
    as absent); ``test`` mode uses the argmax of the keypoint heatmaps.
    """
    if mode == "train":
        g = model.grid_size
        return target_cells(keypoints, g, g, model.stride)
    if mode == "test":
        if fmap is None:
            fmap = model.features(images)
        return model.predicted_cells(fmap)
    raise ConfigError(f"pooling mode must be 'train' or 'test', got {mode!r}")


def joint_loss(model: PartModel, images, keypoints, labels, lam: float = 1.0, pooling: str = "train",
               fmap: FeatureMap | None = None) -> float:
    """``L_cls + lam * L_kp`` for one batch; gradients accumulate into the model."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if fmap is None:
        fmap = model.features(images)
    locations = pooled_locations(model, keypoints, pooling, fmap) if model.config.use_parts else None
    kp, cls = model.loss_and_backward(images, keypoints, labels, locations, kp_weight=lam, cls_weight=1.0,
                                      fmap=fmap)
    return cls + (lam * kp if kp is not None else 0.0)


def _stage_weights(stage: Stage, lam: float) -> tuple[float, float]:
    """(keypoint, classification) loss weights; a holistic-only model keeps the keypoint term too."""
    if stage.objective == "keypoint":
        return 1.0, 0.0
    if stage.objective == "classify":
        return 0.0, 1.0
    return lam, 1.0


def converged(losses: list[float], tol: float = 1e-3, window: int = 3) -> bool:
    """Relative loss improvement over the last ``window`` epochs fell below ``tol``."""
    if len(losses) <= window:
        return False
    old, new = losses[-window - 1], losses[-1]
    if old == 0:
        return True
    return (old - new) / abs(old) < tol


def _batched_features(model: PartModel, images, batch_size: int) -> FeatureMap:
    chunks = [model.features(images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    return FeatureMap(np.concatenate(chunks), model.stride)


def run_stage(model: PartModel, data: Dataset, stage: Stage, config: TrainConfig, stage_index: int = 0) -> list[dict]:
    """Optimise one stage; returns one log row per epoch run."""
    model.set_trainable(stage.trainable)
    rows: list[dict] = []
    if not stage.trainable or stage.epochs == 0:
        return rows
    kp_w, cls_w = _stage_weights(stage, config.lambda_)
    frozen_backbone = not model.is_trainable("backbone")
    cached = _batched_features(model, data.images, config.batch_size) if frozen_backbone else None
    gt_cells = None
    if cls_w and model.config.use_parts and stage.pooling == "gt":
        g = model.grid_size
        gt_cells = target_cells(data.keypoints, g, g, model.stride)
    opt = SGD(model.parameters(), stage.learning_rate, config.momentum)
    n = len(data)
    totals: list[float] = []
    for epoch in range(1, stage.epochs + 1):
        rng = np.random.default_rng([config.seed, stage_index, epoch])
        order = rng.permutation(n)
        sums = {"kp": 0.0, "cls": 0.0}
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            model.zero_grad()
            fmap = FeatureMap(cached.data[idx], cached.stride) if cached is not None else None
            if fmap is None:
                fmap = model.features(data.images[idx])
            locations = None
            if cls_w and model.config.use_parts:
                locations = gt_cells[idx] if gt_cells is not None else model.predicted_cells(fmap)
            kp, cls = model.loss_and_backward(data.images[idx], data.keypoints[idx], data.labels[idx],
                                              locations, kp_weight=kp_w, cls_weight=cls_w, fmap=fmap)
            if kp is not None:
                sums["kp"] += kp * len(idx)
            if cls is not None:
                sums["cls"] += cls * len(idx)
            opt.step()
        loss_kp = sums["kp"] / n if kp_w else None
        loss_cls = sums["cls"] / n if cls_w else None
        total = (loss_cls or 0.0) + kp_w * (loss_kp or 0.0)
        totals.append(total)
        rows.append({"stage": stage.name, "epoch": epoch, "loss_kp": loss_kp, "loss_cls": loss_cls,
                     "loss_total": total})
        log.info("stage %s epoch %d: kp=%s cls=%s total=%.6f", stage.name, epoch, loss_kp, loss_cls, total)
        if stage.converge_tol is not None and converged(totals, stage.converge_tol, stage.converge_window):
            log.info("stage %s converged after %d epochs", stage.name, epoch)
            break
    model.zero_grad()
    return rows


def train(model: PartModel, data: Dataset, config: TrainConfig) -> list[dict]:
    rows = []
    for i, stage in enumerate(config.stages):
        rows += run_stage(model, data, stage, config, i)
    model.set_trainable(GROUPS)
    return rows


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r[k] is None else (repr(float(r[k])) if k.startswith("loss") else r[k]))
                             for k in LOG_FIELDS})


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class Predictions:
    keypoints: np.ndarray     # (N, P, 2) pixel x, y from the heatmap argmax
    cells: np.ndarray         # (N, P, 2) grid row, col
    class_logits: np.ndarray  # (N, K)

    @property
    def labels(self) -> np.ndarray:
        return self.class_logits.argmax(axis=1)


def predict(model: PartModel, images, batch_size: int = 32, pooling: str = "test", keypoints=None) -> Predictions:
    """Keypoints and class scores; parts are pooled at predicted locations unless ``pooling='train'``."""
    kps, cells, logits = [], [], []
    for i in range(0, len(images), batch_size):
        fmap = model.features(images[i:i + batch_size])
        heat = model.keypoint_logits(fmap)
        c = argmax_cells(heat)
        if pooling == "train":
            loc = pooled_locations(model, keypoints[i:i + batch_size], "train")
        else:
            loc = c
        logits.append(model.class_logits(fmap, loc if model.config.use_parts else None))
        kps.append(decode_array(heat, model.stride))
        cells.append(c)
    return Predictions(np.concatenate(kps), np.concatenate(cells), np.concatenate(logits))
