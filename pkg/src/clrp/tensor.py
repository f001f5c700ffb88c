"""Shape-checked numerical primitives over dense float32 arrays.

All operations are pure: they never mutate their inputs and return freshly
allocated arrays, so they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLOAT = np.float32


class ShapeError(ValueError):
    """A tensor dimension does not match what an operation requires."""

    def __init__(self, message: str, dimension: str | None = None):
        super().__init__(message)
        self.dimension = dimension


def as_tensor(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=FLOAT)


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel_h", "kernel_w",
                      "stride_h", "stride_w"):
            if getattr(self, field) <= 0:
                raise ShapeError(f"{field} must be positive, got {getattr(self, field)}",
                                 dimension=field)
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeError("padding must be non-negative", dimension="pad")

    def out_size(self, in_h: int, in_w: int) -> tuple[int, int]:
        out_h = (in_h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        out_w = (in_w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(
                f"kernel {self.kernel_h}x{self.kernel_w} does not fit input "
                f"{in_h}x{in_w} with padding ({self.pad_h},{self.pad_w})",
                dimension="spatial")
        return out_h, out_w


def _check_conv_shapes(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                       geom: ConvGeometry) -> None:
    if x.ndim != 3:
        raise ShapeError(f"conv input must be [C,H,W], got {x.shape}", dimension="rank")
    if x.shape[0] != geom.in_channels:
        raise ShapeError(f"input channels {x.shape[0]} != geometry in_channels "
                         f"{geom.in_channels}", dimension="in_channels")
    expected_w = (geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w)
    if weights.shape != expected_w:
        raise ShapeError(f"conv weights {weights.shape} != expected {expected_w}",
                         dimension="weights")
    if bias.shape != (geom.out_channels,):
        raise ShapeError(f"conv bias {bias.shape} != ({geom.out_channels},)",
                         dimension="bias")


def pad_input(x: np.ndarray, geom: ConvGeometry, fill: float = 0.0) -> np.ndarray:
    if geom.pad_h == 0 and geom.pad_w == 0:
        return x
    return np.pad(x, ((0, 0), (geom.pad_h, geom.pad_h), (geom.pad_w, geom.pad_w)),
                  constant_values=FLOAT(fill))


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   geom: ConvGeometry) -> np.ndarray:
    """Cross-correlation with zero padding.

    Accumulation runs over channel, then kernel row, then kernel column, so
    repeated runs are bit-identical.
    """
    _check_conv_shapes(x, weights, bias, geom)
    out_h, out_w = geom.out_size(x.shape[1], x.shape[2])
    xp = pad_input(x, geom)
    out = np.zeros((geom.out_channels, out_h, out_w), dtype=FLOAT)
    sh, sw = geom.stride_h, geom.stride_w
    for c in range(geom.in_channels):
        for i in range(geom.kernel_h):
            for j in range(geom.kernel_w):
                patch = xp[c, i:i + sh * out_h:sh, j:j + sw * out_w:sw]
                out += weights[:, c, i, j][:, None, None] * patch[None, :, :]
    out += bias[:, None, None]
    return out


def im2col(x: np.ndarray, geom: ConvGeometry, fill: float = 0.0) -> np.ndarray:
    """Patch matrix [C*kh*kw, out_h*out_w]; rows ordered channel-major, then
    kernel row, then kernel column (matching the weight layout [K,C,kh,kw])."""
    out_h, out_w = geom.out_size(x.shape[1], x.shape[2])
    xp = pad_input(x, geom, fill=fill)
    sh, sw = geom.stride_h, geom.stride_w
    cols = np.empty((geom.in_channels * geom.kernel_h * geom.kernel_w, out_h * out_w),
                    dtype=FLOAT)
    row = 0
    for c in range(geom.in_channels):
        for i in range(geom.kernel_h):
            for j in range(geom.kernel_w):
                cols[row] = xp[c, i:i + sh * out_h:sh, j:j + sw * out_w:sw].ravel()
                row += 1
    return cols


def col2im_add(cols: np.ndarray, geom: ConvGeometry,
               in_h: int, in_w: int) -> tuple[np.ndarray, float]:
    """Scatter-add a patch matrix back onto the (unpadded) input plane.

    Returns the accumulated [C,H,W] array and the total mass that fell on
    padded positions (discarded from the array).
    """
    out_h, out_w = geom.out_size(in_h, in_w)
    ph, pw = geom.pad_h, geom.pad_w
    acc = np.zeros((geom.in_channels, in_h + 2 * ph, in_w + 2 * pw), dtype=np.float64)
    sh, sw = geom.stride_h, geom.stride_w
    row = 0
    for c in range(geom.in_channels):
        for i in range(geom.kernel_h):
            for j in range(geom.kernel_w):
                patch = cols[row].reshape(out_h, out_w)
                acc[c, i:i + sh * out_h:sh, j:j + sw * out_w:sw] += patch
                row += 1
    total = float(acc.sum())
    if ph or pw:
        inner = acc[:, ph:ph + in_h, pw:pw + in_w]
    else:
        inner = acc
    leakage = total - float(inner.sum())
    return inner, leakage


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 1:
        raise ShapeError(f"fc input must be 1-D, got {x.shape}", dimension="rank")
    if weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"fc weights {weights.shape} incompatible with input "
                         f"length {x.shape[0]}", dimension="in_features")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"fc bias {bias.shape} != ({weights.shape[0]},)",
                         dimension="bias")
    return (weights @ x + bias).astype(FLOAT)


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = (x > 0).astype(FLOAT)
    return x * mask, mask


def _pool_windows(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Stacked pooling windows [C, out_h, out_w, window*window] in scan order."""
    c, h, w = x.shape
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    if out_h < 1 or out_w < 1 or window > h or window > w:
        raise ShapeError(f"pool window {window} does not fit input {h}x{w}",
                         dimension="window")
    stacked = np.empty((c, out_h, out_w, window * window), dtype=FLOAT)
    k = 0
    for i in range(window):
        for j in range(window):
            stacked[..., k] = x[:, i:i + stride * out_h:stride,
                                j:j + stride * out_w:stride]
            k += 1
    return stacked


def maxpool_forward(x: np.ndarray, window: int,
                    stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling; switches hold, per output cell, the row-major flat index
    into the [C,H,W] input of the first maximal element in the window."""
    if window <= 0 or stride <= 0:
        raise ShapeError("pool window and stride must be positive", dimension="window")
    c, h, w = x.shape
    stacked = _pool_windows(x, window, stride)
    out = stacked.max(axis=-1)
    local = stacked.argmax(axis=-1)  # first occurrence on ties
    out_h, out_w = out.shape[1], out.shape[2]
    ci, oi, oj = np.meshgrid(np.arange(c), np.arange(out_h), np.arange(out_w),
                             indexing="ij")
    in_i = oi * stride + local // window
    in_j = oj * stride + local % window
    switches = (ci * h * w + in_i * w + in_j).astype(np.int64)
    return out.astype(FLOAT), switches


def avgpool_forward(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    if window <= 0 or stride <= 0:
        raise ShapeError("pool window and stride must be positive", dimension="window")
    stacked = _pool_windows(x, window, stride)
    return stacked.mean(axis=-1, dtype=np.float64).astype(FLOAT)
