"""Dense optical flow between consecutive frames (TV-L1, primal-dual).

The solver follows the classic duality-based scheme: coarse-to-fine pyramid,
per level a fixed number of warps of the second image towards the first, and
per warp an inner loop alternating a pointwise thresholding step on the
linearized data term with one dual update of the total-variation term.  The
returned field maps pixels of `prev` into `cur`: cur(x + u, y + v) ~ prev(x, y).

Flow files carry the magic ``FSFL``, then width and height as little-endian
u32, then row-major interleaved (u, v) float32 pairs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fsnet.errors import ConfigError, DataError

__all__ = [
    "FlowField",
    "Tvl1Params",
    "grayscale",
    "tvl1_flow",
    "flow_to_stream_input",
    "write_flow",
    "read_flow",
]

_MAGIC = b"FSFL"


@dataclass
class FlowField:
    """Per-pixel displacement (u: +x/right, v: +y/down), float32."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ConfigError(f"flow components must be 2D and equal: {self.u.shape} vs {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise DataError("non-finite flow values")


@dataclass(frozen=True)
class Tvl1Params:
    lam: float = 0.15
    theta: float = 0.3
    tau: float = 0.25
    levels: int = 5
    scale: float = 0.5
    warps: int = 5
    inner_iters: int = 25

    def __post_init__(self) -> None:
        if not 0.0 < self.scale < 1.0:
            raise ConfigError(f"pyramid scale must be in (0, 1): {self.scale}")
        if self.levels < 1 or self.warps < 1 or self.inner_iters < 1:
            raise ConfigError("levels, warps and inner_iters must be >= 1")
        if min(self.lam, self.theta, self.tau) <= 0:
            raise ConfigError("lam, theta, tau must be positive")


def grayscale(rgb: np.ndarray) -> np.ndarray:
    """(3, H, W) RGB in [0, 1] -> (H, W) luma, float32."""
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ConfigError(f"grayscale expects (3, H, W), got {rgb.shape}")
    return (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]).astype(np.float32)


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample img at float coords, replicating the border."""
    h, w = img.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _resize(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    nh, nw = hw
    h, w = img.shape
    if (nh, nw) == (h, w):
        return img
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear(img, xx, yy)


def _blur(img: np.ndarray) -> np.ndarray:
    # separable [1 2 1]/4, replicate border; takes the edge off before downsampling
    p = np.pad(img, 1, mode="edge")
    img = (p[:-2, 1:-1] + 2 * p[1:-1, 1:-1] + p[2:, 1:-1]) / 4.0
    p = np.pad(img, ((0, 0), (1, 1)), mode="edge")
    return (p[:, :-2] + 2 * p[:, 1:-1] + p[:, 2:]) / 4.0


def _pyramid(img: np.ndarray, params: Tvl1Params) -> list[np.ndarray]:
    levels = [img]
    for _ in range(params.levels - 1):
        h, w = levels[-1].shape
        nh = int(round(h * params.scale))
        nw = int(round(w * params.scale))
        if min(nh, nw) < 8:
            break
        levels.append(_resize(_blur(levels[-1]), (nh, nw)))
    return levels


def _forward_grad(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[:, :-1] = f[:, 1:] - f[:, :-1]
    gy[:-1, :] = f[1:, :] - f[:-1, :]
    return gx, gy


def _divergence(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    d = np.zeros_like(p1)
    d[:, 0] += p1[:, 0]
    d[:, 1:] += p1[:, 1:] - p1[:, :-1]
    d[0, :] += p2[0, :]
    d[1:, :] += p2[1:, :] - p2[:-1, :]
    return d


def _energy(u, v, rho_c, gx, gy, lam):
    ux, uy = _forward_grad(u)
    vx, vy = _forward_grad(v)
    tv = np.sum(np.hypot(ux, uy)) + np.sum(np.hypot(vx, vy))
    data = lam * np.sum(np.abs(rho_c + gx * u + gy * v))
    return float(tv + data)


def _median5(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, 2, mode="edge")
    win = sliding_window_view(p, (5, 5))
    return np.median(win, axis=(2, 3))


def _solve_level(i0, i1, u, v, level, params, trace):
    h, w = i0.shape
    yy, xx = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    gy_full, gx_full = np.gradient(i1)
    p1u = np.zeros_like(u)
    p2u = np.zeros_like(u)
    p1v = np.zeros_like(u)
    p2v = np.zeros_like(u)
    lt = params.lam * params.theta
    taut = params.tau / params.theta

    for _ in range(params.warps):
        u = _median5(u)
        v = _median5(v)
        u0 = u.copy()
        v0 = v.copy()
        wx = xx + u0
        wy = yy + v0
        i1w = _bilinear(i1, wx, wy)
        gx = _bilinear(gx_full, wx, wy)
        gy = _bilinear(gy_full, wx, wy)
        rho_c = i1w - gx * u0 - gy * v0 - i0
        grad_sq = gx * gx + gy * gy
        safe = np.maximum(grad_sq, 1e-12)
        warp_trace = []
        for _ in range(params.inner_iters):
            rho = rho_c + gx * u + gy * v
            lo = rho < -lt * grad_sq
            hi = rho > lt * grad_sq
            mid = ~(lo | hi)
            du = lt * gx * lo - lt * gx * hi - (rho / safe) * gx * mid
            dv = lt * gy * lo - lt * gy * hi - (rho / safe) * gy * mid
            au = u + du
            av = v + dv
            for _ in range(2):  # two dual sweeps tighten the TV prox
                u = au + params.theta * _divergence(p1u, p2u)
                v = av + params.theta * _divergence(p1v, p2v)
                ux, uy = _forward_grad(u)
                vx, vy = _forward_grad(v)
                nu = 1.0 + taut * np.hypot(ux, uy)
                nv = 1.0 + taut * np.hypot(vx, vy)
                p1u = (p1u + taut * ux) / nu
                p2u = (p2u + taut * uy) / nu
                p1v = (p1v + taut * vx) / nv
                p2v = (p2v + taut * vy) / nv
            u = au + params.theta * _divergence(p1u, p2u)
            v = av + params.theta * _divergence(p1v, p2v)
            if trace is not None:
                warp_trace.append(_energy(u, v, rho_c, gx, gy, params.lam))
        if trace is not None:
            trace.append({"level": level, "energies": warp_trace})
    return u, v


def tvl1_flow(
    prev: np.ndarray,
    cur: np.ndarray,
    params: Tvl1Params | None = None,
    *,
    energy_trace: list | None = None,
) -> FlowField:
    """Flow from `prev` to `cur`, both (H, W) grayscale in [0, 1].

    Pass a list as `energy_trace` to collect, per warp, the TV+L1 energy
    after each inner iteration (entries are {"level", "energies"} dicts).
    The alternating scheme is not pointwise monotone -- re-linearizing the
    data term at each warp can bump the exact energy transiently -- but
    every pyramid level descends in aggregate: some iterate of the level
    lands strictly below the level's starting energy, and the coarsest
    level (which starts from zero flow) finishes at or below its start.
    """
    if params is None:
        params = Tvl1Params()
    if prev.shape != cur.shape or prev.ndim != 2:
        raise DataError(f"flow inputs must be equal 2D shapes: {prev.shape} vs {cur.shape}")
    if min(prev.shape) < 16:
        raise DataError(f"image too small for the pyramid: {prev.shape}")
    # lam/theta defaults are calibrated for 8-bit intensity scale; unit-range
    # luma would shrink data-term steps ~255x and stall convergence
    p0 = _pyramid(prev.astype(np.float64) * 255.0, params)
    p1 = _pyramid(cur.astype(np.float64) * 255.0, params)
    u = np.zeros_like(p0[-1])
    v = np.zeros_like(p0[-1])
    for lvl in range(len(p0) - 1, -1, -1):
        if lvl < len(p0) - 1:
            ch, cw = u.shape
            nh, nw = p0[lvl].shape
            u = _resize(u, (nh, nw)) * (nw / cw)
            v = _resize(v, (nh, nw)) * (nh / ch)
        u, v = _solve_level(p0[lvl], p1[lvl], u, v, lvl, params, energy_trace)
    return FlowField(u.astype(np.float32), v.astype(np.float32))


def flow_to_stream_input(flow: FlowField, clip: float = 20.0) -> np.ndarray:
    """(2, H, W) float32 in [-1, 1]: components clipped at +-clip px and scaled."""
    if clip <= 0:
        raise ConfigError(f"clip must be positive: {clip}")
    u = np.clip(flow.u, -clip, clip) / clip
    v = np.clip(flow.v, -clip, clip) / clip
    return np.stack([u, v]).astype(np.float32)


def write_flow(path, flow: FlowField) -> None:
    h, w = flow.u.shape
    body = np.stack([flow.u, flow.v], axis=-1).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(body)


def read_flow(path) -> FlowField:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: bad flow magic {raw[:4]!r}")
    if len(raw) < 12:
        raise DataError(f"{path}: truncated flow header")
    w, h = struct.unpack("<II", raw[4:12])
    want = 12 + 8 * w * h
    if len(raw) != want:
        raise DataError(f"{path}: flow payload is {len(raw)} bytes, expected {want}")
    uv = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(np.ascontiguousarray(uv[..., 0]), np.ascontiguousarray(uv[..., 1]))
