"""Minimal numpy neural-network kernel: NHWC ops, layers, backprop, Adam."""

from .layers import (
    ConvLayer,
    DenseLayer,
    Flatten,
    ForwardCache,
    Layer,
    MaxPool2,
    ReLU,
    Reshape,
    Sigmoid,
    SoftmaxChannels,
    Upsample2,
    backward_pass,
    forward_stack,
)
from .ops import (
    bce_loss,
    conv2d_forward,
    dense_forward,
    maxpool2,
    relu,
    softmax_channels,
    upsample2,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "ConvLayer",
    "DenseLayer",
    "Flatten",
    "ForwardCache",
    "Layer",
    "MaxPool2",
    "ReLU",
    "Reshape",
    "Sigmoid",
    "SoftmaxChannels",
    "Upsample2",
    "adam_step",
    "backward_pass",
    "bce_loss",
    "conv2d_forward",
    "dense_forward",
    "forward_stack",
    "maxpool2",
    "relu",
    "softmax_channels",
    "upsample2",
]
