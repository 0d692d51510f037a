"""
Pooling features at keypoints
=============================

Render a few synthetic objects, run an untrained model and look at what the
coordinate transfer layer produces for each part.
"""

import numpy as np

from partpool import GeneratorConfig, generate
from partpool.backbone import BackboneConfig
from partpool.model import ModelConfig, PartModel
from partpool.synth import holistic_confusability_check, nearest_centroid_accuracy
from partpool.training import pooled_locations

train, test = generate(GeneratorConfig(seed=1, num_classes=4, train_per_class=50, test_per_class=20))
print(train.images.shape, train.keypoints.shape)

# Every class uses the same five colours; only their assignment to parts
# differs. Colour statistics of the whole image therefore say little about
# the class, while the colour at each keypoint says everything.
print(holistic_confusability_check(train))
print("part-colour nearest centroid:", nearest_centroid_accuracy(train, test))

model = PartModel(ModelConfig(backbone=BackboneConfig(input_size=64, pool_last=False), num_classes=4))
fmap = model.features(train.images[:2])
print("grid", fmap.grid, "stride", fmap.stride)

# training pools at ground-truth cells, testing at the heatmap argmax
gt_cells = pooled_locations(model, train.keypoints[:2], "train")
pred_cells = pooled_locations(model, mode="test", fmap=fmap)
print("ground-truth cells\n", gt_cells[0])
print("predicted cells (untrained)\n", pred_cells[0])

parts = model.transfer.forward(fmap, gt_cells)
print("part descriptors", parts.shape)
print("class scores", np.round(model.class_logits(fmap, gt_cells), 3))
