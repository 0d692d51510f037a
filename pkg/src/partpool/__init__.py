"""Keypoint-guided part pooling for fine-grained classification, in NumPy.

A small fully convolutional backbone predicts one heatmap per keypoint; a
coordinate transfer layer pools backbone features around each keypoint and
a linear classifier reads the stacked part descriptors together with a
holistic descriptor. Everything, including gradients, is implemented here.
"""
from .backbone import Backbone, BackboneConfig, FeatureMap, KeypointHead, decode_keypoints
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError, PartPoolError, UsageError
from .metrics import PartBoxRule, accuracy, part_boxes, pck, pcp
from .model import ModelConfig, PartModel
from .parts import (CompactBilinear, CoordinateTransfer, RandomMaclaurinProjection, bilinear_pool,
                    encode_targets, heatmap_loss)
from .synth import Dataset, GeneratorConfig, generate
from .training import Stage, TrainConfig, default_schedule, joint_loss, pooled_locations, predict, run_stage, train

__version__ = "0.1.0"
