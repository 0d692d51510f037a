"""The part-pooling classifier: backbone, keypoint head and joint classifier as one DAG.

Parameter groups (for staged training) are ``backbone``, ``kphead`` and
``classifier``; parameter names carry the group as prefix.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig, FeatureMap, KeypointHead, argmax_cells
from .errors import ConfigError
from .parts import (CompactBilinear, CompactBilinearPool, CoordinateTransfer, GlobalAvgPool, JointHead,
                    RandomMaclaurinProjection, encode_targets, heatmap_loss, joint_representation)
from .tensor import TRAIN_DTYPE, Parameter, softmax_cross_entropy

GROUPS = ("backbone", "kphead", "classifier")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 10
    window: int = 3
    pool_mode: str = "mean"
    use_parts: bool = True
    # holistic branch: "gap" (global average), "compact_bilinear", or "none"
    holistic: str = "gap"
    compact_per_part: bool = False
    compact_dim: int = 5120
    compact_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.holistic not in ("gap", "compact_bilinear", "none"):
            raise ConfigError(f"unknown holistic branch {self.holistic!r}")
        if not self.use_parts and self.holistic == "none":
            raise ConfigError("a model without parts needs a holistic branch")

    @property
    def uses_compact(self) -> bool:
        return self.holistic == "compact_bilinear" or (self.use_parts and self.compact_per_part)

    @property
    def joint_dim(self) -> int:
        d = self.backbone.feature_channels
        part_dim = self.compact_dim if self.compact_per_part else d
        total = self.backbone.num_parts * part_dim if self.use_parts else 0
        if self.holistic == "gap":
            total += d
        elif self.holistic == "compact_bilinear":
            total += self.compact_dim
        return total

    def to_dict(self) -> dict:
        return asdict(self)


class PartModel:
    def __init__(self, config: ModelConfig, dtype=TRAIN_DTYPE):
        self.config = config
        rng = np.random.default_rng(config.seed)
        bcfg = config.backbone
        self.backbone = Backbone(bcfg, rng=rng, dtype=dtype)
        self.kphead = KeypointHead(bcfg.feature_channels, bcfg.num_parts, rng=rng, dtype=dtype)
        self.classifier = JointHead(config.joint_dim, config.num_classes, rng=rng, dtype=dtype)
        self.transfer = CoordinateTransfer(config.window, config.pool_mode)
        self.projection = None
        if config.uses_compact:
            self.projection = RandomMaclaurinProjection(bcfg.feature_channels, config.compact_dim,
                                                        config.compact_seed, dtype=dtype)
        self.part_phi = CompactBilinear(self.projection) if config.use_parts and config.compact_per_part else None
        if config.holistic == "gap":
            self.holistic = GlobalAvgPool()
        elif config.holistic == "compact_bilinear":
            self.holistic = CompactBilinearPool(self.projection)
        else:
            self.holistic = None

    # -- parameters ---------------------------------------------------------

    def group_parameters(self, group: str) -> list[tuple[str, Parameter]]:
        layer = {"backbone": self.backbone, "kphead": self.kphead, "classifier": self.classifier}.get(group)
        if layer is None:
            raise ConfigError(f"unknown parameter group {group!r}; expected one of {GROUPS}")
        return list(layer.named_parameters(group + "."))

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [item for g in GROUPS for item in self.group_parameters(g)]

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, groups):
        groups = set(groups)
        for g in groups:
            self.group_parameters(g)  # validates the name
        for g in GROUPS:
            for _, p in self.group_parameters(g):
                p.trainable = g in groups

    def is_trainable(self, group: str) -> bool:
        return any(p.trainable for _, p in self.group_parameters(group))

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        if self.projection is not None:
            self.projection.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.backbone.dtype

    @property
    def stride(self) -> int:
        return self.config.backbone.stride

    @property
    def grid_size(self) -> int:
        return self.config.backbone.grid_size

    # -- forward / backward ---------------------------------------------------

    def features(self, images) -> FeatureMap:
        return self.backbone.forward(np.asarray(images).astype(self.dtype, copy=False))

    def keypoint_logits(self, fmap: FeatureMap) -> np.ndarray:
        return self.kphead.forward(fmap)

    def predicted_cells(self, fmap: FeatureMap) -> np.ndarray:
        return argmax_cells(self.keypoint_logits(fmap))

    def class_logits(self, fmap: FeatureMap, locations=None) -> np.ndarray:
        """Class scores from the joint representation; ``locations`` (N, P, 2) grid cells."""
        parts = holistic = None
        if self.config.use_parts:
            if locations is None:
                raise ConfigError("part pooling needs locations")
            parts = self.transfer.forward(fmap, locations)
            if self.part_phi is not None:
                parts = self.part_phi.forward(parts)
        if self.holistic is not None:
            holistic = self.holistic.forward(fmap)
        self._part_shape = None if parts is None else parts.shape
        return self.classifier.forward(joint_representation(parts, holistic))

    def class_backward(self, grad_logits) -> np.ndarray:
        """Back-propagate class-score gradients to the feature map."""
        g_joint = self.classifier.backward(grad_logits)
        grad = None
        offset = 0
        if self.config.use_parts:
            n, p, dp = self._part_shape
            g_parts = g_joint[:, :p * dp].reshape(n, p, dp)
            offset = p * dp
            if self.part_phi is not None:
                g_parts = self.part_phi.backward(g_parts)
            grad = self.transfer.backward(g_parts)
        if self.holistic is not None:
            gh = self.holistic.backward(g_joint[:, offset:])
            grad = gh if grad is None else grad + gh
        return grad

    def loss_and_backward(self, images, keypoints=None, labels=None, locations=None,
                          kp_weight: float = 1.0, cls_weight: float = 1.0, fmap: FeatureMap | None = None):
        """One forward/backward pass of ``cls_weight * L_cls + kp_weight * L_kp``.

        Terms with zero weight are skipped entirely, so e.g. a classification-only
        pass never touches the keypoint head. Gradients accumulate into
        parameters; the backbone backward runs only when the backbone is
        trainable. Pass ``fmap`` to reuse precomputed (frozen) features.
        Returns ``(loss_kp, loss_cls)`` with ``None`` for skipped terms.
        """
        if fmap is None:
            fmap = self.features(images)
        grad_feat = None
        need_feat_grad = self.is_trainable("backbone")
        loss_kp = loss_cls = None
        if kp_weight:
            logits = self.keypoint_logits(fmap)
            h, w = fmap.grid
            targets = encode_targets(keypoints, h, w, fmap.stride, dtype=logits.dtype)
            loss_kp, g = heatmap_loss(logits, targets)
            g_in = self.kphead.backward(g * logits.dtype.type(kp_weight))
            if need_feat_grad:
                grad_feat = g_in
        if cls_weight:
            logits = self.class_logits(fmap, locations)
            loss_cls, g = softmax_cross_entropy(logits, labels)
            g = g * logits.dtype.type(cls_weight)
            if need_feat_grad:
                gf = self.class_backward(g)
                grad_feat = gf if grad_feat is None else grad_feat + gf
            else:
                self.classifier.backward(g)
        if need_feat_grad and grad_feat is not None:
            self.backbone.backward(grad_feat)
        return loss_kp, loss_cls
