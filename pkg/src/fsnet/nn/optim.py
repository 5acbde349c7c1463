"""Momentum SGD.

The update is the classic recurrence

    v <- momentum * v + grad
    value <- value - lr * v

applied parameter by parameter in list order, so a fixed parameter ordering
gives bit-identical trajectories run to run.  Gradients are zeroed once the
step is taken: a step consumes the accumulated gradient.
"""

from __future__ import annotations

import numpy as np

from fsnet.errors import ConfigError, TrainingError
from fsnet.nn.layers import Parameter

__all__ = ["sgd_step", "MomentumSgd"]


def sgd_step(
    params: list[Parameter],
    state: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """One in-place update; velocities live in `state` keyed by parameter name."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in {p.name}")
        v = state.get(p.name)
        if v is None:
            v = np.zeros_like(p.value)
            state[p.name] = v
        v *= momentum
        v += p.grad
        p.value -= (lr * v).astype(p.value.dtype, copy=False)
        p.zero_grad()


class MomentumSgd:
    def __init__(self, params: list[Parameter], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.state: dict[str, np.ndarray] = {}

    def step(self) -> None:
        sgd_step(self.params, self.state, self.lr, self.momentum)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
