"""CBAM channel and spatial attention gates for NHWC feature maps.

A :class:`CbamBlock` rescales a feature map first per (sample, channel)
and then per (sample, pixel).  Both gates are sigmoids, so every output
element has magnitude at most that of its input.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ShapeError
from .nn import ops
from .nn.layers import ConvLayer, Layer, he_uniform


def hidden_width(channels, reduction_ratio):
    return max(1, channels // reduction_ratio)


@dataclass(eq=False)
class ChannelAttention(Layer):
    """Shared bias-free MLP ``C -> C/r -> C`` applied to avg- and max-pooled descriptors."""

    mlp_in: np.ndarray
    mlp_out: np.ndarray
    reduction_ratio: int = 8
    name: str = "channel_attention"

    def __post_init__(self):
        c, hid = self.mlp_in.shape
        if self.mlp_out.shape != (hid, c):
            raise ConfigError(f"{self.name}: mlp_out shape {self.mlp_out.shape} != {(hid, c)}")

    @classmethod
    def init(cls, rng, channels, reduction_ratio=8, dtype=np.float32, name="channel_attention"):
        hid = hidden_width(channels, reduction_ratio)
        return cls(
            he_uniform(rng, (channels, hid), channels, dtype),
            he_uniform(rng, (hid, channels), hid, dtype),
            reduction_ratio,
            name,
        )

    @property
    def channels(self):
        return self.mlp_in.shape[0]

    @property
    def params(self):
        return {"mlp_in": self.mlp_in, "mlp_out": self.mlp_out}

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got shape {x.shape}")
        b, h, w, c = x.shape
        flat = x.reshape(b, h * w, c)
        avg = flat.mean(axis=1)
        arg = flat.argmax(axis=1)
        mx = np.take_along_axis(flat, arg[:, None, :], axis=1)[:, 0, :]
        pre_a = avg @ self.mlp_in
        pre_m = mx @ self.mlp_in
        hid_a = np.maximum(pre_a, 0)
        hid_m = np.maximum(pre_m, 0)
        gate = ops.sigmoid(hid_a @ self.mlp_out + hid_m @ self.mlp_out)
        out = x * gate[:, None, None, :]
        return out, (x, avg, mx, arg, pre_a, pre_m, hid_a, hid_m, gate)

    def backward(self, dy, cache, need_dx=True):
        x, avg, mx, arg, pre_a, pre_m, hid_a, hid_m, gate = cache
        b, h, w, c = x.shape
        dgate = np.einsum("bhwc,bhwc->bc", dy, x)
        dz = dgate * gate * (1 - gate)
        d_out = hid_a.T @ dz + hid_m.T @ dz
        dpre_a = (dz @ self.mlp_out.T) * (pre_a > 0)
        dpre_m = (dz @ self.mlp_out.T) * (pre_m > 0)
        d_in = avg.T @ dpre_a + mx.T @ dpre_m
        grads = {"mlp_in": d_in, "mlp_out": d_out}
        if not need_dx:
            return None, grads
        dx = dy * gate[:, None, None, :]
        dx += (dpre_a @ self.mlp_in.T)[:, None, None, :] / (h * w)
        flat = dx.reshape(b, h * w, c)
        dmax = dpre_m @ self.mlp_in.T
        picked = np.take_along_axis(flat, arg[:, None, :], axis=1) + dmax[:, None, :]
        np.put_along_axis(flat, arg[:, None, :], picked, axis=1)
        return flat.reshape(b, h, w, c), grads


@dataclass(eq=False)
class SpatialAttention(Layer):
    """k x k same-padded conv over the [channel-mean, channel-max] map, then a sigmoid gate."""

    conv: ConvLayer
    name: str = "spatial_attention"

    def __post_init__(self):
        kh, kw, c_in, c_out = self.conv.kernels.shape
        if (c_in, c_out) != (2, 1):
            raise ConfigError(f"{self.name}: conv must map 2 channels to 1, got {c_in}->{c_out}")

    @classmethod
    def init(cls, rng, kernel_size=7, dtype=np.float32, name="spatial_attention"):
        return cls(ConvLayer.init(rng, 2, 1, kernel_size, dtype, name=name + ".conv"), name)

    @property
    def params(self):
        return {"kernels": self.conv.kernels, "bias": self.conv.bias}

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected 4-d input, got shape {x.shape}")
        arg = x.argmax(axis=-1)
        mx = np.take_along_axis(x, arg[..., None], axis=-1)
        desc = np.concatenate([x.mean(axis=-1, keepdims=True), mx], axis=-1)
        z, conv_cache = self.conv.forward(desc)
        gate = ops.sigmoid(z)
        return x * gate, (x, arg, conv_cache, gate)

    def backward(self, dy, cache, need_dx=True):
        x, arg, conv_cache, gate = cache
        dgate = np.einsum("bhwc,bhwc->bhw", dy, x)[..., None]
        dz = dgate * gate * (1 - gate)
        ddesc, conv_grads = self.conv.backward(dz, conv_cache, need_dx=need_dx)
        if not need_dx:
            return None, conv_grads
        c = x.shape[3]
        dx = dy * gate
        dx += ddesc[..., 0:1] / c
        flat = dx.reshape(-1, c)
        flat[np.arange(flat.shape[0]), arg.ravel()] += ddesc[..., 1].ravel()
        return dx, conv_grads


@dataclass(eq=False)
class CbamBlock(Layer):
    """Channel gate followed by spatial gate."""

    channel: ChannelAttention
    spatial: SpatialAttention
    name: str = "cbam"

    @classmethod
    def init(cls, rng, channels, reduction_ratio=8, kernel_size=7, dtype=np.float32, name="cbam"):
        return cls(
            ChannelAttention.init(rng, channels, reduction_ratio, dtype, name=name + ".channel"),
            SpatialAttention.init(rng, kernel_size, dtype, name=name + ".spatial"),
            name,
        )

    @property
    def params(self):
        p = {f"channel.{k}": v for k, v in self.channel.params.items()}
        p.update({f"spatial.{k}": v for k, v in self.spatial.params.items()})
        return p

    def forward(self, x):
        y, c_cache = self.channel.forward(x)
        out, s_cache = self.spatial.forward(y)
        return out, (c_cache, s_cache)

    def backward(self, dy, cache, need_dx=True):
        c_cache, s_cache = cache
        dmid, s_grads = self.spatial.backward(dy, s_cache, need_dx=True)
        dx, c_grads = self.channel.backward(dmid, c_cache, need_dx=need_dx)
        grads = {f"channel.{k}": v for k, v in c_grads.items()}
        grads.update({f"spatial.{k}": v for k, v in s_grads.items()})
        return dx, grads


def cbam_param_count(channels, reduction_ratio=8, kernel_size=7):
    return 2 * channels * hidden_width(channels, reduction_ratio) + kernel_size * kernel_size * 2 + 1


def channel_attention(features, block):
    return block.forward(features)[0]


def spatial_attention(features, block):
    return block.forward(features)[0]


def cbam(features, block):
    return block.forward(features)[0]
