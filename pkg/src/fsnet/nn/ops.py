"""Functional layer operations on channels-first numpy arrays.

A tensor here is a plain ``np.ndarray`` shaped ``(C, H, W)``, or
``(N, C, H, W)`` with a leading batch extent; results never depend on which
of the two forms the caller picked.  Parameters and activations are stored
in float32.  Every matrix product accumulates in float64 and the result is
rounded back to the input dtype, so a float32 convolution agrees with a
direct-sum oracle to ~1e-7 relative error.  Feeding float64 arrays keeps
the whole computation in float64; that mode exists for gradient checking.

Convolution weights are laid out ``(out_channels, in_channels, kh, kw)``.
``deconv2d`` is the transposed convolution: its spec describes the forward
convolution being transposed, so the *input* of ``deconv2d`` carries
``spec.out_channels`` channels and its output ``spec.in_channels``.  With a
shared weight and zero bias, ``<conv2d(x), y> == <x, deconv2d(y)>``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fsnet.errors import ConfigError

__all__ = [
    "ConvSpec",
    "conv2d",
    "conv2d_backward",
    "deconv2d",
    "deconv2d_backward",
    "relu",
    "relu_backward",
    "concat_channels",
    "split_channels",
]


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a convolution (and of the transposed convolution over it).

    ``out_pad`` applies to the transposed side only: it appends rows/columns
    at the bottom/right of the deconv output, disambiguating which of the
    several input extents that map to the same conv output extent is meant.
    With ``out_pad == 0`` the deconv output extent is exactly
    ``(H - 1) * stride - 2 * padding + dilation * (kernel - 1) + 1``.
    """

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    out_pad: int = 0

    def __post_init__(self) -> None:
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w) < 1:
            raise ConfigError(f"channel and kernel extents must be >= 1: {self}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ConfigError(f"bad stride/dilation/padding: {self}")
        if not 0 <= self.out_pad < max(self.stride, 1):
            raise ConfigError(f"out_pad must lie in [0, stride): {self}")

    @property
    def span_h(self) -> int:
        return self.dilation * (self.kernel_h - 1) + 1

    @property
    def span_w(self) -> int:
        return self.dilation * (self.kernel_w - 1) + 1

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output extent of the forward convolution; ConfigError if < 1."""
        oh = (h + 2 * self.padding - self.span_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.span_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ConfigError(
                f"conv output extent {oh}x{ow} < 1 for input {h}x{w} with {self}"
            )
        return oh, ow

    def tr_out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output extent of the transposed convolution."""
        oh = (h - 1) * self.stride - 2 * self.padding + self.span_h + self.out_pad
        ow = (w - 1) * self.stride - 2 * self.padding + self.span_w + self.out_pad
        if oh < 1 or ow < 1:
            raise ConfigError(
                f"deconv output extent {oh}x{ow} < 1 for input {h}x{w} with {self}"
            )
        return oh, ow


def _as_batch(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ConfigError(f"{what} must be (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _check_weight(weight: np.ndarray, spec: ConvSpec) -> None:
    want = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weight.shape != want:
        raise ConfigError(f"weight shape {weight.shape} does not match spec {want}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap_slices(i: int, j: int, oh: int, ow: int, spec: ConvSpec):
    s, d = spec.stride, spec.dilation
    return (
        slice(i * d, i * d + (oh - 1) * s + 1, s),
        slice(j * d, j * d + (ow - 1) * s + 1, s),
    )


def _im2col(x4: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """Patch tensor (N, Cin*kh*kw, oh*ow) in float64.

    Filled tap by tap with strided block copies — far cheaper than gathering a
    6D window view — and shaped so conv is one stacked GEMM with no output
    transpose.  Identical code serves batched and single inputs, keeping
    results independent of batching.
    """
    xp = _pad(x4, spec.padding)
    n, c = x4.shape[:2]
    buf = np.empty((n, c, spec.kernel_h, spec.kernel_w, oh, ow))
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            rows, cols = _tap_slices(i, j, oh, ow, spec)
            buf[:, :, i, j] = xp[:, :, rows, cols]
    return buf.reshape(n, c * spec.kernel_h * spec.kernel_w, oh * ow)


def _col2im(
    cols: np.ndarray, n: int, oh: int, ow: int, h: int, w: int, spec: ConvSpec
) -> np.ndarray:
    """Adjoint of `_im2col`: scatter-add (N, K, M) patches onto (N,Cin,h,w)."""
    p = spec.padding
    xp = np.zeros((n, spec.in_channels, h + 2 * p, w + 2 * p))
    taps = cols.reshape(n, spec.in_channels, spec.kernel_h, spec.kernel_w, oh, ow)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            rows, cc = _tap_slices(i, j, oh, ow, spec)
            xp[:, :, rows, cc] += taps[:, :, i, j]
    if p == 0:
        return xp
    return xp[:, :, p:-p, p:-p]


def _flip_spec(spec: ConvSpec) -> ConvSpec | None:
    """Spec of the stride-1 convolution equivalent to `spec` transposed.

    The transpose of a stride-1 convolution is itself a convolution with the
    channel-swapped, spatially flipped kernel and padding span-1-p; that path
    replaces the per-tap scatter of `_col2im` with one patch-matrix GEMM.
    Returns None when the identity does not apply.
    """
    if spec.stride != 1 or spec.span_h != spec.span_w:
        return None
    pad = spec.span_h - 1 - spec.padding
    if pad < 0:
        return None
    return ConvSpec(
        spec.out_channels,
        spec.in_channels,
        spec.kernel_h,
        spec.kernel_w,
        1,
        pad,
        spec.dilation,
    )


def _flip_weight(weight: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def conv2d(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, spec: ConvSpec
) -> np.ndarray:
    """Cross-correlating convolution, float64 accumulation."""
    x4, squeeze = _as_batch(x, "conv2d input")
    _check_weight(weight, spec)
    if x4.shape[1] != spec.in_channels:
        raise ConfigError(
            f"conv2d input has {x4.shape[1]} channels, spec wants {spec.in_channels}"
        )
    oh, ow = spec.out_hw(x4.shape[2], x4.shape[3])
    cols = _im2col(x4, spec, oh, ow)
    wmat = weight.reshape(spec.out_channels, -1).astype(np.float64, copy=False)
    out = np.matmul(wmat, cols)  # (N, Cout, oh*ow)
    if bias is not None:
        out += bias.astype(np.float64, copy=False)[:, None]
    out = out.reshape(x4.shape[0], spec.out_channels, oh, ow).astype(x.dtype, copy=False)
    return out[0] if squeeze else out


def conv2d_backward(
    x: np.ndarray,
    weight: np.ndarray,
    spec: ConvSpec,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. (input, weight, bias) given d loss / d output.

    Pass need_input_grad=False for a network's first layer to skip the
    scatter back onto the input (gx is returned as None).
    """
    x4, squeeze = _as_batch(x, "conv2d input")
    g4, _ = _as_batch(grad_out, "conv2d grad_out")
    _check_weight(weight, spec)
    n, _, h, w = x4.shape
    oh, ow = spec.out_hw(h, w)
    if g4.shape != (n, spec.out_channels, oh, ow):
        raise ConfigError(f"grad_out shape {g4.shape} != {(n, spec.out_channels, oh, ow)}")
    gmat = g4.reshape(n, spec.out_channels, oh * ow).astype(np.float64, copy=False)
    cols = _im2col(x4, spec, oh, ow)
    wmat = weight.reshape(spec.out_channels, -1).astype(np.float64, copy=False)
    gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    gb = gmat.sum(axis=(0, 2))
    gw = gw.astype(weight.dtype, copy=False)
    gb = gb.astype(weight.dtype, copy=False)
    if not need_input_grad:
        return None, gw, gb
    spec2 = _flip_spec(spec)
    if spec2 is not None:
        gx = conv2d(g4, _flip_weight(weight), None, spec2)
    else:
        gx = _col2im(np.matmul(wmat.T, gmat), n, oh, ow, h, w, spec)
    gx = gx.astype(x.dtype, copy=False)
    return (gx[0] if squeeze else gx), gw, gb


def deconv2d(
    z: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, spec: ConvSpec
) -> np.ndarray:
    """Transposed convolution: the linear adjoint of `conv2d` plus a bias.

    ``z`` carries ``spec.out_channels`` channels; the result carries
    ``spec.in_channels`` and the extent given by ``spec.tr_out_hw``.
    """
    z4, squeeze = _as_batch(z, "deconv2d input")
    _check_weight(weight, spec)
    if z4.shape[1] != spec.out_channels:
        raise ConfigError(
            f"deconv2d input has {z4.shape[1]} channels, spec wants {spec.out_channels}"
        )
    n, _, hz, wz = z4.shape
    h, w = spec.tr_out_hw(hz, wz)
    spec2 = _flip_spec(spec)
    if spec2 is not None:
        out4 = conv2d(z4, _flip_weight(weight), bias, spec2)
        return out4[0] if squeeze else out4
    zmat = z4.reshape(n, spec.out_channels, hz * wz).astype(np.float64, copy=False)
    wmat = weight.reshape(spec.out_channels, -1).astype(np.float64, copy=False)
    out = _col2im(np.matmul(wmat.T, zmat), n, hz, wz, h, w, spec)
    if bias is not None:
        out += bias.astype(np.float64, copy=False)[None, :, None, None]
    out = out.astype(z.dtype, copy=False)
    return out[0] if squeeze else out


def deconv2d_backward(
    z: np.ndarray, weight: np.ndarray, spec: ConvSpec, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of deconv2d w.r.t. (input, weight, bias)."""
    z4, squeeze = _as_batch(z, "deconv2d input")
    g4, _ = _as_batch(grad_out, "deconv2d grad_out")
    _check_weight(weight, spec)
    n, _, hz, wz = z4.shape
    h, w = spec.tr_out_hw(hz, wz)
    if g4.shape != (n, spec.in_channels, h, w):
        raise ConfigError(f"grad_out shape {g4.shape} != {(n, spec.in_channels, h, w)}")
    # d/dz is the forward convolution of grad_out; d/dW pairs grad_out patches
    # with the deconv input.
    cols = _im2col(g4, spec, hz, wz)
    wmat = weight.reshape(spec.out_channels, -1).astype(np.float64, copy=False)
    zmat = z4.reshape(n, spec.out_channels, hz * wz).astype(np.float64, copy=False)
    gz = np.matmul(wmat, cols).reshape(n, spec.out_channels, hz, wz)
    gw = np.matmul(zmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    gb = g4.sum(axis=(0, 2, 3), dtype=np.float64)
    gz = gz.astype(z.dtype, copy=False)
    gw = gw.astype(weight.dtype, copy=False)
    gb = gb.astype(weight.dtype, copy=False)
    return (gz[0] if squeeze else gz), gw, gb


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass-through where the forward input was > 0, zero elsewhere."""
    if x.shape != grad_out.shape:
        raise ConfigError(f"relu grad shape {grad_out.shape} != input {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(x.dtype, copy=False)


def concat_channels(maps: list[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis; spatial extents must agree."""
    if not maps:
        raise ConfigError("concat_channels needs at least one map")
    hw = maps[0].shape[-2:]
    nd = maps[0].ndim
    for m in maps[1:]:
        if m.shape[-2:] != hw or m.ndim != nd:
            raise ConfigError(
                f"concat_channels spatial/batch mismatch: {[m.shape for m in maps]}"
            )
    return np.concatenate(maps, axis=-3)


def split_channels(grad: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Inverse of concat_channels on the gradient path."""
    if sum(sizes) != grad.shape[-3]:
        raise ConfigError(f"split sizes {sizes} != {grad.shape[-3]} channels")
    out, at = [], 0
    for s in sizes:
        idx = [slice(None)] * grad.ndim
        idx[-3] = slice(at, at + s)
        out.append(grad[tuple(idx)])
        at += s
    return out
