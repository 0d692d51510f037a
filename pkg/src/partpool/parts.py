"""Keypoint targets and loss, coordinate-transfer pooling, bilinear features.

Grid coordinates are (row, col) pairs; image coordinates are (x, y) pixels.
A part location of ``(-1, -1)`` marks an absent (invisible) part.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError, UsageError
from .tensor import TRAIN_DTYPE, Affine, Layer, check_finite, sigmoid, softmax_cross_entropy

ABSENT = -1


def _as_array(features) -> np.ndarray:
    """Accept a FeatureMap or a bare (N, D, H, W) array."""
    return features if isinstance(features, np.ndarray) else features.data


# ---------------------------------------------------------------------------
# keypoint targets and loss
# ---------------------------------------------------------------------------

def nearest_cell(x, y, stride: int, grid_h: int, grid_w: int):
    """Grid cell whose centre is nearest to pixel (x, y); ties go to the lower index.

    The grid is a product of per-axis centre lists, so the Euclidean nearest
    centre is the per-axis nearest centre.
    """
    col = np.clip(np.ceil(np.asarray(x, dtype=np.float64) / stride - 1.0), 0, grid_w - 1).astype(int)
    row = np.clip(np.ceil(np.asarray(y, dtype=np.float64) / stride - 1.0), 0, grid_h - 1).astype(int)
    return row, col


def target_cells(keypoints: np.ndarray, grid_h: int, grid_w: int, stride: int) -> np.ndarray:
    """(N, P, 2) positive cell per visible keypoint, ``ABSENT`` for invisible ones.

    ``keypoints`` is (N, P, 3) holding x, y, visible in image pixels.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    vis = kp[..., 2] > 0
    x, y = kp[..., 0], kp[..., 1]
    width, height = grid_w * stride, grid_h * stride
    bad = vis & ((x < 0) | (x > width) | (y < 0) | (y > height) | ~np.isfinite(x) | ~np.isfinite(y))
    if bad.any():
        n, p = np.argwhere(bad)[0]
        raise DataError(f"visible keypoint (image {n}, part {p}) at ({x[n, p]}, {y[n, p]}) "
                        f"lies outside the {width}x{height} image")
    row, col = nearest_cell(np.where(vis, x, 0.0), np.where(vis, y, 0.0), stride, grid_h, grid_w)
    cells = np.stack([row, col], axis=-1)
    cells[~vis] = ABSENT
    return cells


def encode_targets(keypoints: np.ndarray, grid_h: int, grid_w: int, stride: int, dtype=TRAIN_DTYPE) -> np.ndarray:
    """Binary target maps (N, P, H', W'): one positive per visible keypoint, none otherwise."""
    cells = target_cells(keypoints, grid_h, grid_w, stride)
    n, p = cells.shape[:2]
    targets = np.zeros((n, p, grid_h, grid_w), dtype=dtype)
    nn, pp = np.nonzero(cells[..., 0] >= 0)
    targets[nn, pp, cells[nn, pp, 0], cells[nn, pp, 1]] = 1
    return targets


def heatmap_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Pixelwise sigmoid cross-entropy summed over parts and cells, averaged over images.

    Returns the (negated log-likelihood) loss and its gradient w.r.t. ``logits``.
    """
    if logits.shape != targets.shape:
        raise ConfigError(f"logits {logits.shape} and targets {targets.shape} differ in shape")
    if not np.isin(targets, (0, 1)).all():
        raise DataError("heatmap targets must be 0 or 1")
    check_finite(logits, "heatmap logits")
    n = logits.shape[0]
    z = logits.astype(np.float64) if logits.dtype == np.float64 else logits
    # -[p log s(z) + (1-p) log(1-s(z))] = max(z,0) - z p + log(1 + e^{-|z|})
    per_cell = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    loss = float(per_cell.sum(dtype=np.float64) / n)
    grad = (sigmoid(z) - targets) / n
    return loss, grad.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# coordinate transfer
# ---------------------------------------------------------------------------

class CoordinateTransfer(Layer):
    """Pool a small window of the feature map around each part location.

    ``forward(features, locations)`` maps (N, D, H, W) features and (N, P, 2)
    grid locations to (N, P, D) part descriptors. The ``window`` x ``window``
    box is clipped at the grid border and averaged over its valid cells
    (``mode="mean"``) or max-pooled per channel (``mode="max"``). Absent parts
    give zero descriptors and receive no gradient.
    """

    def __init__(self, window: int = 3, mode: str = "mean"):
        super().__init__()
        if window < 1 or window % 2 == 0:
            raise ConfigError(f"window must be a positive odd integer, got {window}")
        if mode not in ("mean", "max"):
            raise ConfigError(f"unknown pooling mode {mode!r}")
        self.window = window
        self.mode = mode

    def windows(self, locations: np.ndarray, grid_h: int, grid_w: int):
        """Clipped ``(r0, r1, c0, c1)`` half-open bounds per (image, part); -1 rows for absent parts."""
        loc = np.asarray(locations)
        present = loc[..., 0] >= 0
        if (present & ((loc[..., 0] >= grid_h) | (loc[..., 1] >= grid_w) | (loc[..., 1] < 0))).any():
            raise UsageError(f"part location outside the {grid_h}x{grid_w} grid")
        half = self.window // 2
        r0 = np.clip(loc[..., 0] - half, 0, grid_h)
        r1 = np.clip(loc[..., 0] + half + 1, 0, grid_h)
        c0 = np.clip(loc[..., 1] - half, 0, grid_w)
        c1 = np.clip(loc[..., 1] + half + 1, 0, grid_w)
        return np.stack([r0, r1, c0, c1], axis=-1), present

    def forward(self, features, locations):
        data = _as_array(features)
        n, d, h, w = data.shape
        locations = np.asarray(locations)
        if locations.shape[0] != n or locations.shape[-1] != 2:
            raise ConfigError(f"locations shape {locations.shape} does not match batch of {n}")
        bounds, present = self.windows(locations, h, w)
        p = locations.shape[1]
        out = np.zeros((n, p, d), dtype=data.dtype)
        argmax = {}
        for b in range(n):
            for k in range(p):
                if not present[b, k]:
                    continue
                r0, r1, c0, c1 = bounds[b, k]
                patch = data[b, :, r0:r1, c0:c1].reshape(d, -1)
                if self.mode == "mean":
                    out[b, k] = patch.mean(axis=1)
                else:
                    idx = patch.argmax(axis=1)
                    out[b, k] = patch[np.arange(d), idx]
                    argmax[b, k] = idx
        self._cache = (data.shape, bounds, present, argmax)
        return out

    def backward(self, grad_parts):
        shape, bounds, present, argmax = self._cached()
        n, d, h, w = shape
        grad = np.zeros(shape, dtype=grad_parts.dtype)
        for b in range(n):
            for k in range(grad_parts.shape[1]):
                if not present[b, k]:
                    continue
                r0, r1, c0, c1 = bounds[b, k]
                if self.mode == "mean":
                    count = (r1 - r0) * (c1 - c0)
                    grad[b, :, r0:r1, c0:c1] += (grad_parts[b, k] / count)[:, None, None]
                else:
                    ww = c1 - c0
                    idx = argmax[b, k]
                    rows, cols = r0 + idx // ww, c0 + idx % ww
                    np.add.at(grad[b], (np.arange(d), rows, cols), grad_parts[b, k])
        return grad


class GlobalAvgPool(Layer):
    """Mean over all grid cells: (N, D, H, W) -> (N, D)."""

    def forward(self, features):
        data = _as_array(features)
        self._cache = data.shape
        return data.mean(axis=(2, 3))

    def backward(self, grad_out):
        n, d, h, w = self._cached()
        return np.broadcast_to((grad_out / (h * w))[:, :, None, None], (n, d, h, w)).copy()


# ---------------------------------------------------------------------------
# bilinear and compact bilinear
# ---------------------------------------------------------------------------

def signed_sqrt_l2(v: np.ndarray) -> np.ndarray:
    """Signed square root then L2 normalisation of each row; zero rows stay zero."""
    y = np.sign(v) * np.sqrt(np.abs(v))
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    return np.divide(y, norm, out=np.zeros_like(y), where=norm > 0)


def bilinear_pool(features, normalize: bool = True) -> np.ndarray:
    """Sum over cells of the outer product f f^T, flattened row-major: (N, D*D)."""
    data = _as_array(features)
    check_finite(data, "bilinear input")
    n, d = data.shape[:2]
    flat = data.reshape(n, d, -1)
    gram = np.einsum("nik,njk->nij", flat, flat).reshape(n, d * d)
    return signed_sqrt_l2(gram) if normalize else gram


class RandomMaclaurinProjection:
    """Two fixed random sign matrices (out_dim x in_dim) for the degree-2 Maclaurin map."""

    def __init__(self, in_dim: int, out_dim: int = 5120, seed: int = 0, dtype=TRAIN_DTYPE):
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"projection dims must be positive, got {in_dim} -> {out_dim}")
        self.in_dim, self.out_dim, self.seed = in_dim, out_dim, seed
        rng = np.random.default_rng(seed)
        signs = rng.integers(0, 2, size=(2, out_dim, in_dim), dtype=np.int8) * 2 - 1
        self.w1 = signs[0].astype(dtype)
        self.w2 = signs[1].astype(dtype)
        self.w1.flags.writeable = False
        self.w2.flags.writeable = False

    def astype(self, dtype):
        if self.w1.dtype != dtype:
            self.w1, self.w2 = self.w1.astype(dtype), self.w2.astype(dtype)
            self.w1.flags.writeable = False
            self.w2.flags.writeable = False
        return self


class CompactBilinear(Layer):
    """phi(x) = (W1 x) * (W2 x) / sqrt(d) on the last axis; <phi(x), phi(y)> estimates <x, y>^2."""

    def __init__(self, projection: RandomMaclaurinProjection):
        super().__init__()
        self.projection = projection

    def forward(self, x):
        proj = self.projection
        if x.shape[-1] != proj.in_dim:
            raise ConfigError(f"compact bilinear expects {proj.in_dim} inputs, got {x.shape[-1]}")
        proj.astype(x.dtype)
        scale = x.dtype.type(1.0 / np.sqrt(proj.out_dim))
        a = x @ proj.w1.T
        b = x @ proj.w2.T
        self._cache = (a, b, scale)
        return check_finite(a * b * scale, "compact bilinear forward")

    def backward(self, grad_out):
        a, b, scale = self._cached()
        proj = self.projection
        g = grad_out * scale
        return check_finite((g * b) @ proj.w1 + (g * a) @ proj.w2, "compact bilinear backward")


class CompactBilinearPool(Layer):
    """Mean of phi over every grid cell: (N, D, H, W) -> (N, d)."""

    def __init__(self, projection: RandomMaclaurinProjection):
        super().__init__()
        self.phi = CompactBilinear(projection)

    def forward(self, features):
        data = _as_array(features)
        n, d, h, w = data.shape
        cells = data.transpose(0, 2, 3, 1).reshape(n, h * w, d)
        self._cache = data.shape
        return self.phi.forward(cells).mean(axis=1)

    def backward(self, grad_out):
        n, d, h, w = self._cached()
        g = np.broadcast_to(grad_out[:, None, :] / (h * w), (n, h * w, grad_out.shape[-1]))
        gc = self.phi.backward(g)
        return np.ascontiguousarray(gc.reshape(n, h, w, d).transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# joint classification head
# ---------------------------------------------------------------------------

def joint_representation(parts: np.ndarray | None, holistic: np.ndarray | None) -> np.ndarray:
    """Concatenate [part 0, ..., part P-1, holistic] per image."""
    pieces = []
    if parts is not None:
        pieces.append(parts.reshape(parts.shape[0], -1))
    if holistic is not None:
        pieces.append(holistic.reshape(holistic.shape[0], -1))
    if not pieces:
        raise ConfigError("joint representation needs part or holistic features")
    return np.concatenate(pieces, axis=1)


class JointHead(Layer):
    """Fully connected classifier on the joint representation, trained with softmax loss."""

    def __init__(self, in_dim: int, num_classes: int, rng: np.random.Generator | None = None, dtype=TRAIN_DTYPE):
        super().__init__()
        self.fc = Affine(in_dim, num_classes, rng=rng, dtype=dtype)
        self.params = self.fc.params
        self.num_classes = num_classes

    def forward(self, stack):
        return self.fc.forward(stack)

    def backward(self, grad_logits):
        return self.fc.backward(grad_logits)

    def loss(self, logits, labels):
        return softmax_cross_entropy(logits, labels)
