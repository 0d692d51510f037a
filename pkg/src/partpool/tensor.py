"""Dense rank-4 tensors and the differentiable primitive layers.

Tensors are plain ``numpy.ndarray`` objects laid out as (batch, channel, row,
col). Layers keep whatever they need from ``forward`` to run ``backward`` and
accumulate parameter gradients additively until :meth:`Layer.zero_grad`.

Training runs in float32; gradient checks convert a model to float64 with
:meth:`Layer.astype`.
"""
from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, NumericError, UsageError

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {where}")
    return arr


RELU_GAIN = float(np.sqrt(6.0))


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=TRAIN_DTYPE, gain: float = 1.0) -> np.ndarray:
    """Centred uniform draw with bound ``gain / sqrt(fan_in)``."""
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Parameter:
    """A named array with its gradient buffer and a trainable flag."""

    def __init__(self, data: np.ndarray, trainable: bool = True):
        self.data = data
        self.grad = np.zeros_like(data)
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype}, trainable={self.trainable})"


class Layer:
    """Base class: a forward/backward pair with named parameters."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self.params.items():
            yield prefix + name, p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        return self

    def _cached(self):
        if self._cache is None:
            raise UsageError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    @property
    def dtype(self):
        for p in self.parameters():
            return p.data.dtype
        return None


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0):
    """Cross-correlate ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, k, k).

    Returns the output and the padded input, which the backward pass needs.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects rank-4 input and weights, got {x.shape} and {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ConfigError(f"conv2d input has {x.shape[1]} channels, weights expect {cin}")
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d kernels must be square and odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"invalid stride={stride} or pad={pad}")
    if bias.shape != (cout,):
        raise ConfigError(f"bias shape {bias.shape} does not match {cout} output channels")
    k = kh
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ConfigError(f"kernel {k} larger than padded input {xp.shape[2:]}")
    if k == 1:
        cols = xp[:, :, ::stride, ::stride]
        out = np.tensordot(weight[:, :, 0, 0], cols, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        # (N, Cin, Ho, Wo, k, k) view over every receptive window
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out), xp


def conv2d_backward(grad_out: np.ndarray, xp: np.ndarray, weight: np.ndarray, stride: int, pad: int,
                    need_input_grad: bool = True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    cout, cin, k, _ = weight.shape
    n, _, ho, wo = grad_out.shape
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if k == 1:
        cols = xp[:, :, ::stride, ::stride]
        grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    else:
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))
    if not need_input_grad:
        return None, grad_w, grad_b
    grad_xp = np.zeros_like(xp)
    # (N, Ho, Wo, Cin, k, k): contribution of each output cell to its window
    gcols = np.tensordot(grad_out, weight, axes=([1], [0]))
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            grad_xp[:, :, i:i + span_h:stride, j:j + span_w:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        grad_x = grad_xp[:, :, pad:-pad, pad:-pad]
    else:
        grad_x = grad_xp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


class Conv2d(Layer):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, pad: int | None = None,
                 rng: np.random.Generator | None = None, dtype=TRAIN_DTYPE, gain: float = 1.0):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        fan_in = cin * kernel * kernel
        self.params["weight"] = Parameter(init_uniform(rng, (cout, cin, kernel, kernel), fan_in, dtype, gain))
        self.params["bias"] = Parameter(init_uniform(rng, (cout,), fan_in, dtype))

    def forward(self, x):
        w = self.params["weight"].data
        out, xp = conv2d_forward(x.astype(w.dtype, copy=False), w, self.params["bias"].data, self.stride, self.pad)
        self._cache = (xp, out.shape)
        return check_finite(out, "conv2d forward")

    def backward(self, grad_out, need_input_grad: bool = True):
        xp, out_shape = self._cached()
        if grad_out.shape != out_shape:
            raise ConfigError(f"conv2d grad shape {grad_out.shape} != output shape {out_shape}")
        w = self.params["weight"]
        grad_x, grad_w, grad_b = conv2d_backward(grad_out.astype(w.data.dtype, copy=False), xp, w.data,
                                                 self.stride, self.pad, need_input_grad)
        w.grad += grad_w
        self.params["bias"].grad += grad_b
        if grad_x is not None:
            check_finite(grad_x, "conv2d backward")
        return grad_x


# ---------------------------------------------------------------------------
# pooling and elementwise layers
# ---------------------------------------------------------------------------

class MaxPool2x2(Layer):
    """Non-overlapping 2x2 max pooling; ties go to the first cell in row-major order."""

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)  # argmax returns the first maximum
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return check_finite(out, "maxpool forward")

    def backward(self, grad_out):
        shape, idx = self._cached()
        n, c, h, w = shape
        onehot = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
        np.put_along_axis(onehot, idx[..., None], grad_out[..., None], axis=-1)
        grad = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        return check_finite(grad, "maxpool backward")


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad_out):
        return grad_out * self._cached()


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Sigmoid(Layer):
    def forward(self, x):
        check_finite(x, "sigmoid input")
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, grad_out):
        y = self._cached()
        return grad_out * y * (1.0 - y)


class Affine(Layer):
    """Fully connected layer on inputs flattened to (N, features)."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator | None = None, dtype=TRAIN_DTYPE):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = Parameter(init_uniform(rng, (dout, din), din, dtype))
        self.params["bias"] = Parameter(init_uniform(rng, (dout,), din, dtype))

    def forward(self, x):
        w = self.params["weight"].data
        flat = x.reshape(x.shape[0], -1).astype(w.dtype, copy=False)
        if flat.shape[1] != w.shape[1]:
            raise ConfigError(f"affine expects {w.shape[1]} input features, got {flat.shape[1]}")
        self._cache = (flat, x.shape)
        return check_finite(flat @ w.T + self.params["bias"].data, "affine forward")

    def backward(self, grad_out):
        flat, in_shape = self._cached()
        w = self.params["weight"]
        w.grad += grad_out.T @ flat
        self.params["bias"].grad += grad_out.sum(axis=0)
        return check_finite((grad_out @ w.data).reshape(in_shape), "affine backward")


def softmax(logits: np.ndarray) -> np.ndarray:
    check_finite(logits, "softmax input")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ConfigError(f"expected {n} labels, got shape {labels.shape}")
    if (labels < 0).any() or (labels >= k).any():
        raise DataError(f"class labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float((logsum - z[rows, labels]).mean())
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def sgd_step(params: Iterable[Parameter], learning_rate: float):
    """Plain SGD: ``p <- p - lr * grad`` for trainable parameters only."""
    if learning_rate < 0:
        raise UsageError(f"learning rate must be non-negative, got {learning_rate}")
    for p in params:
        if not p.trainable:
            continue
        if p.grad.shape != p.data.shape:
            raise UsageError(f"gradient shape {p.grad.shape} does not match parameter {p.data.shape}")
        if learning_rate:
            p.data -= (learning_rate * p.grad).astype(p.data.dtype)


class SGD:
    """SGD with optional heavy-ball momentum; momentum=0 reduces to :func:`sgd_step`."""

    def __init__(self, params: Iterable[Parameter], learning_rate: float, momentum: float = 0.0):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity = {id(p): np.zeros_like(p.data) for p in self.params} if momentum else {}

    def step(self):
        if not self.momentum:
            sgd_step(self.params, self.learning_rate)
            return
        for p in self.params:
            if not p.trainable:
                continue
            v = self._velocity[id(p)]
            v *= self.momentum
            v += p.grad
            p.data -= (self.learning_rate * v).astype(p.data.dtype)
