"""Central-difference gradient verification.

Run the closure once to collect analytic gradients, then probe sampled
parameter coordinates with f(t + eps) and f(t - eps).  Meant to be used on
float64 models: float32 storage drowns a 1e-4 step in rounding noise.
"""

from __future__ import annotations

import numpy as np

from fsnet.nn.layers import Parameter

__all__ = ["grad_check"]


def grad_check(
    loss_fn,
    params: list[Parameter],
    *,
    eps: float = 1e-4,
    max_coords_per_param: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error |analytic - numeric| / max(1, |numeric|) over probes.

    `loss_fn()` must return a scalar loss and leave d loss / d param in each
    `param.grad` (gradients are zeroed here before every invocation).
    """
    if rng is None:
        rng = np.random.default_rng(0)

    def run() -> float:
        for p in params:
            p.zero_grad()
        return float(loss_fn())

    run()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        n = flat.shape[0]
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            up = run()
            flat[c] = keep - eps
            down = run()
            flat[c] = keep
            numeric = (up - down) / (2 * eps)
            err = abs(ana.reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
