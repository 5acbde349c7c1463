"""Future-representation regressor.

A fully convolutional network that maps the channel-concatenated bottleneck
maps of the K most recent frames (newest first) to the predicted bottleneck
map delta frames ahead.  The layer table is fixed: seven 5x5/256 layers, one
dilation-3 5x5/1024 layer whose kernel spans 13x13, and a linear 1x1/256
output layer.  Every layer preserves the spatial extent, so the output is a
drop-in input for the detector's decode-and-detect half at any grid size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fsnet.backbone import FeatureMap
from fsnet.errors import ConfigError
from fsnet.nn import Conv2d, ReLU, Stack
from fsnet.nn.ops import concat_channels

__all__ = [
    "LAYER_TABLE",
    "RegressorConfig",
    "FeatureStack",
    "FutureRegressor",
    "forward_r",
    "receptive_field",
    "reconstruction_loss",
    "reconstruction_loss_grad",
]

# (out_channels, kernel, padding, dilation); stride is 1 everywhere
LAYER_TABLE = (
    (256, 5, 2, 1),
    (256, 5, 2, 1),
    (256, 5, 2, 1),
    (256, 5, 2, 1),
    (256, 5, 2, 1),
    (256, 5, 2, 1),
    (256, 5, 2, 1),
    (1024, 5, 6, 3),
    (256, 1, 0, 1),
)


@dataclass(frozen=True)
class RegressorConfig:
    k: int
    delta: int
    bottleneck_channels: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"history length must be >= 1, got {self.k}")
        if self.delta < 1:
            raise ConfigError(f"forecast horizon must be >= 1, got {self.delta}")
        if self.bottleneck_channels < 1:
            raise ConfigError(f"bad bottleneck width {self.bottleneck_channels}")
        if self.bottleneck_channels != LAYER_TABLE[-1][0]:
            raise ConfigError(
                f"regressor emits {LAYER_TABLE[-1][0]} channels but the "
                f"bottleneck has {self.bottleneck_channels}"
            )

    @property
    def input_channels(self) -> int:
        return self.k * self.bottleneck_channels


@dataclass(frozen=True)
class FeatureStack:
    """Bottleneck maps newest first: times t, t-1, ..., t-(K-1)."""

    maps: tuple

    def __post_init__(self) -> None:
        if not self.maps:
            raise ConfigError("feature stack is empty")
        shape = self.maps[0].tensor.shape
        for m in self.maps[1:]:
            if m.tensor.shape != shape:
                raise ConfigError(
                    f"stacked maps must share one shape: {m.tensor.shape} vs {shape}"
                )
        times = [m.time_index for m in self.maps]
        if any(a <= b for a, b in zip(times, times[1:])):
            raise ConfigError(f"stack times must strictly decrease, got {times}")

    @property
    def k(self) -> int:
        return len(self.maps)

    @property
    def time_index(self) -> int:
        return self.maps[0].time_index

    def tensor(self) -> np.ndarray:
        return concat_channels([m.tensor for m in self.maps])


class FutureRegressor:
    def __init__(self, config: RegressorConfig, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        layers = []
        prev = config.input_channels
        for i, (ch, k, p, d) in enumerate(LAYER_TABLE, 1):
            # stride 1 + symmetric padding: extent is preserved at any size
            assert 2 * p == d * (k - 1)
            layers.append(Conv2d(f"r{i}", prev, ch, k, padding=p, dilation=d, rng=rng))
            if i < len(LAYER_TABLE):
                layers.append(ReLU())  # final layer stays linear
            prev = ch
        layers[0].need_input_grad = False  # the detector below is frozen
        self.net = Stack(layers)

    def forward(self, stack: FeatureStack) -> FeatureMap:
        if stack.k != self.config.k:
            raise ConfigError(f"stack has {stack.k} frames, config wants {self.config.k}")
        x = stack.tensor()
        if x.shape[0] != self.config.input_channels:
            raise ConfigError(
                f"stack gives {x.shape[0]} channels, "
                f"config wants {self.config.input_channels}"
            )
        out = self.net.forward(x)
        return FeatureMap(out, stack.time_index + self.config.delta, "regressed")

    def backward(self, grad_out: np.ndarray) -> None:
        self.net.backward(grad_out)

    def parameters(self):
        return self.net.parameters()

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def forward_r(stack: FeatureStack, model: FutureRegressor) -> FeatureMap:
    return model.forward(stack)


def receptive_field(config: RegressorConfig) -> tuple:
    """(cumulative receptive field per layer, layer-8 kernel span)."""
    rf = 0
    out = []
    for ch, k, p, d in LAYER_TABLE:
        span = d * (k - 1) + 1
        rf = span if not out else rf + (span - 1)  # stride 1: jumps stay 1
        out.append(rf)
    k8_span = LAYER_TABLE[7][3] * (LAYER_TABLE[7][1] - 1) + 1
    return tuple(out), k8_span


def _check_pair(pred: FeatureMap, target: FeatureMap) -> None:
    if pred.tensor.shape != target.tensor.shape:
        raise ConfigError(
            f"loss needs equal shapes, got {pred.tensor.shape} vs {target.tensor.shape}"
        )


def reconstruction_loss(pred: FeatureMap, target: FeatureMap) -> float:
    """Mean squared difference over all elements."""
    _check_pair(pred, target)
    d = pred.tensor.astype(np.float64) - target.tensor.astype(np.float64)
    return float(np.mean(d * d))


def reconstruction_loss_grad(pred: FeatureMap, target: FeatureMap):
    """(loss, dloss/dpred); pair with FutureRegressor.backward."""
    _check_pair(pred, target)
    d = pred.tensor.astype(np.float64) - target.tensor.astype(np.float64)
    return float(np.mean(d * d)), 2.0 * d / d.size
