"""Stateful layer objects built on the functional ops.

Layers cache their last forward input and re-derive patch matrices during
backward; gradients accumulate into ``Parameter.grad`` so several backward
passes (e.g. a multi-head detector) sum naturally until ``zero_grad``.
Weight init is He-normal (std = sqrt(2 / fan_in), fan_in counted on the
layer's own input channels), biases start at zero, all drawn from the
generator handed to the constructor so model builds are reproducible.
"""

from __future__ import annotations

import numpy as np

from fsnet.errors import ConfigError
from fsnet.nn import ops

__all__ = ["Parameter", "Conv2d", "Deconv2d", "ReLU", "Stack"]


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Parameter({self.name}, shape={self.value.shape})"


def _he_weight(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Conv2d:
    """Convolution with optional ReLU fused off (activation is a layer)."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int,
        *,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.name = name
        self.spec = ops.ConvSpec(
            in_channels, out_channels, kernel, kernel, stride, padding, dilation
        )
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(
            f"{name}.weight",
            _he_weight(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype),
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, dtype=dtype))
        self._x = None
        # a first layer can set this False to skip the input-gradient scatter
        self.need_input_grad = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return ops.conv2d(x, self.weight.value, self.bias.value, self.spec)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise ConfigError(f"{self.name}: backward before forward")
        gx, gw, gb = ops.conv2d_backward(
            self._x, self.weight.value, self.spec, grad_out, self.need_input_grad
        )
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Deconv2d:
    """Transposed convolution mapping in_channels -> out_channels.

    Internally the spec describes the convolution being transposed, so the
    weight is laid out (in_channels, out_channels, k, k) — the same array a
    conv from out_channels to in_channels would use.
    """

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int,
        *,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        out_pad: int = 0,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.name = name
        self.spec = ops.ConvSpec(
            out_channels, in_channels, kernel, kernel, stride, padding, dilation, out_pad
        )
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(
            f"{name}.weight",
            _he_weight(rng, (in_channels, out_channels, kernel, kernel), fan_in, dtype),
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, dtype=dtype))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return ops.deconv2d(x, self.weight.value, self.bias.value, self.spec)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise ConfigError(f"{self.name}: backward before forward")
        gx, gw, gb = ops.deconv2d_backward(
            self._x, self.weight.value, self.spec, grad_out
        )
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class ReLU:
    def __init__(self, name: str = "relu"):
        self.name = name
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return ops.relu(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise ConfigError(f"{self.name}: backward before forward")
        return ops.relu_backward(self._x, grad_out)

    def parameters(self) -> list[Parameter]:
        return []


class Stack:
    """A plain sequential composite."""

    def __init__(self, layers: list):
        self.layers = layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out
