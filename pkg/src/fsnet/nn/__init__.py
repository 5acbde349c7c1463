"""Self-contained numpy layer engine: ops, layers, SGD, gradient checking."""

from fsnet.nn.gradcheck import grad_check
from fsnet.nn.layers import Conv2d, Deconv2d, Parameter, ReLU, Stack
from fsnet.nn.ops import (
    ConvSpec,
    concat_channels,
    conv2d,
    conv2d_backward,
    deconv2d,
    deconv2d_backward,
    relu,
    relu_backward,
    split_channels,
)
from fsnet.nn.optim import MomentumSgd, sgd_step

__all__ = [
    "ConvSpec",
    "Conv2d",
    "Deconv2d",
    "MomentumSgd",
    "Parameter",
    "ReLU",
    "Stack",
    "concat_channels",
    "conv2d",
    "conv2d_backward",
    "deconv2d",
    "deconv2d_backward",
    "grad_check",
    "relu",
    "relu_backward",
    "sgd_step",
    "split_channels",
]
