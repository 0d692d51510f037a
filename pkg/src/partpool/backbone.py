"""Fully convolutional feature extractor and the 1x1 keypoint scoring head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import RELU_GAIN, TRAIN_DTYPE, Conv2d, Layer, MaxPool2x2, ReLU, check_finite, sigmoid


@dataclass
class BackboneConfig:
    """Shape of the backbone.

    ``blocks`` blocks of [conv3x3-ReLU x2, maxpool2x2]; block ``b`` is
    ``widths[b]`` channels wide except the final conv, which emits
    ``feature_channels``. With ``pool_last=False`` the last block skips its
    pooling, halving the stride for finer keypoint resolution.
    """

    input_size: int = 64
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks: int = 3
    feature_channels: int = 64
    num_parts: int = 5
    pool_last: bool = True

    def __post_init__(self):
        self.widths = list(self.widths)
        if self.blocks < 1 or len(self.widths) < self.blocks:
            raise ConfigError(f"need at least {self.blocks} widths, got {self.widths}")
        if self.num_parts < 1 or self.feature_channels < 1:
            raise ConfigError("num_parts and feature_channels must be positive")
        if self.input_size % self.stride:
            raise ConfigError(f"input_size {self.input_size} is not divisible by stride {self.stride}")

    @property
    def num_pools(self) -> int:
        return self.blocks if self.pool_last else self.blocks - 1

    @property
    def stride(self) -> int:
        return 2 ** self.num_pools

    @property
    def grid_size(self) -> int:
        return self.input_size // self.stride

    def receptive_field(self) -> int:
        """Receptive field edge (pixels) of one output unit."""
        rf, jump = 1, 1
        for b in range(self.blocks):
            rf += 2 * 2 * jump
            if b < self.num_pools:
                rf += jump
                jump *= 2
        return rf

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureMap:
    """Backbone activations (N, D, H', W') plus the grid stride in pixels."""

    data: np.ndarray
    stride: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    def cell_to_pixel(self, i, j):
        return grid_to_pixel(i, j, self.stride)


def grid_to_pixel(i, j, stride: int):
    """Centre of grid cell (row i, col j) in image pixels, as (x, y)."""
    return (np.asarray(j) + 0.5) * stride, (np.asarray(i) + 0.5) * stride


class Backbone(Layer):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator | None = None, dtype=TRAIN_DTYPE):
        super().__init__()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers: list[tuple[str, Layer]] = []
        cin = 3
        for b in range(config.blocks):
            width = config.widths[b]
            last = b == config.blocks - 1
            out2 = config.feature_channels if last else width
            self.layers += [
                (f"block{b}.conv1.", Conv2d(cin, width, 3, rng=rng, dtype=dtype, gain=RELU_GAIN)),
                ("", ReLU()),
                (f"block{b}.conv2.", Conv2d(width, out2, 3, rng=rng, dtype=dtype, gain=RELU_GAIN)),
                ("", ReLU()),
            ]
            if b < config.num_pools:
                self.layers.append(("", MaxPool2x2()))
            cin = out2

    def named_parameters(self, prefix: str = ""):
        for name, layer in self.layers:
            yield from layer.named_parameters(prefix + name)

    def forward(self, images) -> FeatureMap:
        s = self.config.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (s, s):
            raise ConfigError(f"backbone expects (N, 3, {s}, {s}) images, got {images.shape}")
        h = images
        for _, layer in self.layers:
            h = layer.forward(h)
        return FeatureMap(h, self.config.stride)

    def backward(self, grad_features, need_input_grad: bool = False):
        g = grad_features
        last = len(self.layers) - 1
        for pos in range(last, -1, -1):
            layer = self.layers[pos]
            if pos == 0:
                g = layer[1].backward(g, need_input_grad=need_input_grad)
            else:
                g = layer[1].backward(g)
        return g


class KeypointHead(Layer):
    """1x1 convolution scoring one logit map per part."""

    def __init__(self, feature_channels: int, num_parts: int, rng: np.random.Generator | None = None,
                 dtype=TRAIN_DTYPE):
        super().__init__()
        self.conv = Conv2d(feature_channels, num_parts, kernel=1, rng=rng, dtype=dtype)
        self.params = self.conv.params

    def forward(self, features: FeatureMap | np.ndarray) -> np.ndarray:
        data = features.data if isinstance(features, FeatureMap) else features
        return self.conv.forward(data)

    def backward(self, grad_logits):
        return self.conv.backward(grad_logits)


def argmax_cells(logits: np.ndarray) -> np.ndarray:
    """Row-major first argmax of every (image, part) map; returns (N, P, 2) as (row, col)."""
    check_finite(logits, "keypoint logits")
    n, p, h, w = logits.shape
    flat = logits.reshape(n, p, h * w).argmax(axis=-1)
    return np.stack([flat // w, flat % w], axis=-1)


def decode_keypoints(logits: np.ndarray, stride: int) -> list[list[tuple[int, float, float, float]]]:
    """Per image, ``(part, x, y, score)`` at each part's heatmap argmax."""
    cells = argmax_cells(logits)
    n, p = cells.shape[:2]
    out = []
    for b in range(n):
        row = []
        for k in range(p):
            i, j = cells[b, k]
            x, y = grid_to_pixel(i, j, stride)
            score = float(sigmoid(np.array([logits[b, k, i, j]], dtype=np.float64))[0])
            row.append((k, float(x), float(y), score))
        out.append(row)
    return out


def decode_array(logits: np.ndarray, stride: int) -> np.ndarray:
    """Vectorised :func:`decode_keypoints`: (N, P, 2) pixel coordinates (x, y)."""
    cells = argmax_cells(logits)
    x, y = grid_to_pixel(cells[..., 0], cells[..., 1], stride)
    return np.stack([x, y], axis=-1).astype(np.float64)
