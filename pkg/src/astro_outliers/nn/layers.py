"""Layer objects and the generic forward/backward driver.

Every layer exposes ``forward(x) -> (y, cache)`` and
``backward(dy, cache, need_dx=True) -> (dx, grads)`` where ``grads`` maps
parameter names to arrays shaped like ``layer.params[name]``.
"""

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigError, ShapeError, StateError
from . import ops


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    name = ""

    @property
    def params(self):
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache, need_dx=True):
        raise NotImplementedError


@dataclass(eq=False)
class ConvLayer(Layer):
    kernels: np.ndarray
    bias: np.ndarray
    padding: str = "same"
    name: str = "conv"

    def __post_init__(self):
        if self.kernels.ndim != 4:
            raise ConfigError(f"{self.name}: kernels must be (kh, kw, c_in, c_out), got {self.kernels.shape}")
        kh, kw, _, c_out = self.kernels.shape
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"{self.name}: kernel size must be odd and >= 1, got {kh}x{kw}")
        if self.bias.shape != (c_out,):
            raise ConfigError(f"{self.name}: bias length {self.bias.shape} != c_out {c_out}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"{self.name}: padding must be 'same' or 'valid'")

    @classmethod
    def init(cls, rng, c_in, c_out, kernel_size=3, dtype=np.float32, name="conv"):
        k = kernel_size
        kernels = he_uniform(rng, (k, k, c_in, c_out), k * k * c_in, dtype)
        return cls(kernels, np.zeros(c_out, dtype=dtype), "same", name)

    @property
    def params(self):
        return {"kernels": self.kernels, "bias": self.bias}

    def forward(self, x):
        y, conv_cache = ops.conv2d_forward(x, self.kernels, self.bias, self.padding)
        return y, (conv_cache, x.shape)

    def backward(self, dy, cache, need_dx=True):
        conv_cache, x_shape = cache
        dx, dk, db = ops.conv2d_backward(dy, conv_cache, x_shape, self.kernels, self.padding, need_dx)
        return dx, {"kernels": dk, "bias": db}


@dataclass(eq=False)
class DenseLayer(Layer):
    weight: np.ndarray
    bias: np.ndarray
    name: str = "dense"

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigError(f"{self.name}: inconsistent weight {self.weight.shape} / bias {self.bias.shape}")

    @classmethod
    def init(cls, rng, n_in, n_out, dtype=np.float32, name="dense"):
        return cls(he_uniform(rng, (n_in, n_out), n_in, dtype), np.zeros(n_out, dtype=dtype), name)

    @property
    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return ops.dense_forward(x, self.weight, self.bias), x

    def backward(self, dy, cache, need_dx=True):
        dx, dw, db = ops.dense_backward(dy, cache, self.weight)
        return dx, {"weight": dw, "bias": db}


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        return ops.relu(x), x

    def backward(self, dy, cache, need_dx=True):
        return ops.relu_backward(dy, cache), {}


class MaxPool2(Layer):
    name = "maxpool"

    def forward(self, x):
        return ops.maxpool2(x)

    def backward(self, dy, cache, need_dx=True):
        return ops.maxpool2_backward(dy, cache), {}


class Upsample2(Layer):
    name = "upsample"

    def forward(self, x):
        return ops.upsample2(x), None

    def backward(self, dy, cache, need_dx=True):
        return ops.upsample2_backward(dy), {}


class Flatten(Layer):
    name = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, need_dx=True):
        return dy.reshape(cache), {}


@dataclass(eq=False)
class Reshape(Layer):
    shape: tuple
    name: str = "reshape"

    def forward(self, x):
        if int(np.prod(self.shape)) != x.shape[1]:
            raise ShapeError(f"cannot reshape width {x.shape[1]} to {self.shape}")
        return x.reshape((x.shape[0],) + tuple(self.shape)), x.shape

    def backward(self, dy, cache, need_dx=True):
        return dy.reshape(cache), {}


class SoftmaxChannels(Layer):
    name = "softmax"

    def forward(self, x):
        y = ops.softmax_channels(x)
        return y, y

    def backward(self, dy, cache, need_dx=True):
        return ops.softmax_channels_backward(dy, cache), {}


class Sigmoid(Layer):
    name = "sigmoid"

    def forward(self, x):
        y = ops.sigmoid(x)
        return y, y

    def backward(self, dy, cache, need_dx=True):
        return ops.sigmoid_backward(dy, cache), {}


@dataclass
class ForwardCache:
    """Per-layer caches recorded by :func:`forward_stack`."""

    entries: list = field(default_factory=list)


def forward_stack(layers, x, record=True):
    """Run ``x`` through ``layers``; returns ``(y, ForwardCache | None)``."""
    cache = ForwardCache() if record else None
    for layer in layers:
        x, c = layer.forward(x)
        if record:
            cache.entries.append(c)
    return x, cache


def backward_pass(layers, cache, loss_gradient, need_input_grad=False):
    """Backpropagate ``loss_gradient`` through ``layers``.

    Returns ``(grads, dx)``: ``grads`` is a list aligned with ``layers`` of
    per-layer gradient dicts, ``dx`` the gradient w.r.t. the stack input
    (``None`` unless ``need_input_grad``).
    """
    if cache is None or len(cache.entries) != len(layers):
        raise StateError("backward_pass needs a recorded forward cache for every layer")
    grads = [None] * len(layers)
    dy = loss_gradient
    for i in range(len(layers) - 1, -1, -1):
        need_dx = i > 0 or need_input_grad
        dy, grads[i] = layers[i].backward(dy, cache.entries[i], need_dx=need_dx)
    return grads, dy
