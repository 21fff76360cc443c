"""Primitive numerical kernels shared by the filtering, similarity, and
upsampling stages.

Conventions used throughout:

* resizes map output pixel i to source coordinate (i + 0.5) * in / out - 0.5
  (half-pixel centers), clamped to the valid range;
* every gather that walks off the border clamps indices to the edge;
* box means normalize by the number of in-bounds pixels in the window;
* reductions accumulate in float64 and results are stored as float32;
* all kernels are pure functions and bit-reproducible: parallel execution
  only ever splits work into fixed-size row chunks whose layout does not
  depend on the thread count, and each chunk writes a disjoint output slice.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .tensor import FeatureMap

# Similarity scores are plain maps whose channel axis indexes the K*K
# neighbor slots of each pixel, so they reuse FeatureMap (and its container
# format) directly.
SimilarityScores = FeatureMap


class ShapeMismatch(Exception):
    """Operand dimensions are incompatible with the requested operation."""


class ChannelGroupMismatch(Exception):
    """A channel count is not divisible by the requested group count."""


# Fixed work-decomposition unit for threaded kernels.  The chunk layout must
# never depend on the thread count, otherwise outputs could not be promised
# byte-identical across thread counts.
CHUNK_ROWS = 32


def run_row_chunks(n_rows: int, threads: int, work) -> None:
    """Invoke work(row_start, row_end) over fixed CHUNK_ROWS-sized chunks.

    With threads > 1 the chunks run on a thread pool; each work() call must
    write only rows [row_start, row_end) of its output.
    """
    chunks = [(r0, min(r0 + CHUNK_ROWS, n_rows)) for r0 in range(0, n_rows, CHUNK_ROWS)]
    if threads <= 1:
        for r0, r1 in chunks:
            work(r0, r1)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda span: work(*span), chunks))


def _require_size(name: str, n) -> int:
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ShapeMismatch(f"{name} must be a positive integer, got {n!r}")
    return int(n)


def axis_linear_coords(n_in: int, n_out: int):
    """Half-pixel-center linear sampling along one axis.

    Returns (lo, hi, frac): integer source indices and the weight of `hi`,
    with frac in [0, 1].  Coordinates are computed in float64 so that the
    identity resize yields frac == 0 exactly.
    """
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def _resize_linear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of an (H, W, C) array, dtype preserved."""
    h, w, _ = arr.shape
    r0, r1, tr = axis_linear_coords(h, out_h)
    c0, c1, tc = axis_linear_coords(w, out_w)
    tr = tr.astype(arr.dtype)[:, None, None]
    tc = tc.astype(arr.dtype)[None, :, None]
    rows = arr[r0] * (1 - tr) + arr[r1] * tr
    return rows[:, c0] * (1 - tc) + rows[:, c1] * tc


def bilinear_resize(src: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    """Resize with half-pixel-center bilinear interpolation."""
    out_h = _require_size("out_h", out_h)
    out_w = _require_size("out_w", out_w)
    return FeatureMap(_resize_linear(src.data, out_h, out_w))


def nearest_resize(src: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    """Resize by picking floor((i + 0.5) * in / out) along each axis."""
    out_h = _require_size("out_h", out_h)
    out_w = _require_size("out_w", out_w)
    h, w, _ = src.shape
    ri = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.intp), 0, h - 1)
    ci = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.intp), 0, w - 1)
    return FeatureMap(src.data[np.ix_(ri, ci)])


def _box_sum_raw(arr: np.ndarray, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Window sums over (2r+1)^2 windows truncated at the borders.

    Returns (sums, counts) where counts is the number of in-bounds pixels per
    window.  Uses a float64 integral image; arr must already be float64.
    """
    h, w = arr.shape[:2]
    integral = np.empty((h + 1, w + 1) + arr.shape[2:], np.float64)
    integral[0] = 0.0
    integral[:, 0] = 0.0
    np.cumsum(arr, axis=0, out=integral[1:, 1:])
    np.cumsum(integral[1:, 1:], axis=1, out=integral[1:, 1:])
    rlo = np.maximum(np.arange(h) - radius, 0)
    rhi = np.minimum(np.arange(h) + radius, h - 1) + 1
    clo = np.maximum(np.arange(w) - radius, 0)
    chi = np.minimum(np.arange(w) + radius, w - 1) + 1
    sums = integral[np.ix_(rhi, chi)]
    sums -= integral[np.ix_(rlo, chi)]
    sums -= integral[np.ix_(rhi, clo)]
    sums += integral[np.ix_(rlo, clo)]
    counts = ((rhi - rlo)[:, None] * (chi - clo)[None, :]).astype(np.float64)
    return sums, counts


def _box_mean_raw(arr: np.ndarray, radius: int) -> np.ndarray:
    sums, counts = _box_sum_raw(arr, radius)
    sums /= counts[(...,) + (None,) * (arr.ndim - 2)]
    return sums


def box_mean(src: FeatureMap, radius: int) -> FeatureMap:
    """Mean over the (2r+1)x(2r+1) window, normalized by in-bounds count."""
    if not isinstance(radius, (int, np.integer)) or radius < 0:
        raise ShapeMismatch(f"radius must be a non-negative integer, got {radius!r}")
    return FeatureMap(_box_mean_raw(src.astype64(), int(radius)))


# 3x3 unit-sigma Gaussian taps: exp(-(di^2 + dj^2) / 2), normalized to sum 1.
_GAUSS3 = np.array(
    [[math.exp(-(di * di + dj * dj) / 2.0) for dj in (-1, 0, 1)] for di in (-1, 0, 1)],
    np.float64,
)
_GAUSS3 /= _GAUSS3.sum()


def gaussian_smooth3(src: FeatureMap) -> FeatureMap:
    """3x3 Gaussian smoothing (unit sigma, clamp-to-edge padding)."""
    padded = np.pad(src.astype64(), ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w, c = src.shape
    out = np.zeros((h, w, c), np.float64)
    for di in range(3):
        for dj in range(3):
            out += _GAUSS3[di, dj] * padded[di : di + h, dj : dj + w]
    return FeatureMap(out)


@dataclass(frozen=True)
class GroupNormAffine:
    """Per-channel scale/shift plus the group layout for normalization."""

    gamma: np.ndarray
    beta: np.ndarray
    groups: int
    eps: float = 1e-5

    def __post_init__(self):
        gamma = np.asarray(self.gamma, np.float32)
        beta = np.asarray(self.beta, np.float32)
        if gamma.ndim != 1 or gamma.shape != beta.shape:
            raise ShapeMismatch(f"gamma/beta must be equal-length vectors, got {gamma.shape} vs {beta.shape}")
        if self.groups < 1 or gamma.size % self.groups:
            raise ChannelGroupMismatch(f"{gamma.size} channels not divisible into {self.groups} groups")
        if not self.eps > 0:
            raise ShapeMismatch(f"eps must be positive, got {self.eps}")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)

    @property
    def channels(self) -> int:
        return self.gamma.size


def group_normalize(src: FeatureMap, affine: GroupNormAffine) -> FeatureMap:
    """Normalize each channel group to zero mean / unit variance, then apply
    the per-channel affine.

    Statistics pool over every pixel of the map and all channels in the
    group; variance is the population variance, stabilized by eps.
    """
    if src.channels != affine.channels:
        raise ShapeMismatch(f"map has {src.channels} channels, affine expects {affine.channels}")
    h, w, c = src.shape
    per = c // affine.groups
    grouped = src.astype64().reshape(h * w, affine.groups, per)
    mean = grouped.mean(axis=(0, 2))
    grouped -= mean[None, :, None]
    var = np.einsum("xgc,xgc->g", grouped, grouped) / (h * w * per)
    # normalization and affine fold into one per-channel scale pass
    scale = affine.gamma.astype(np.float64) / np.sqrt(np.repeat(var, per) + affine.eps)
    out = grouped.reshape(h, w, c)
    out *= scale
    out += affine.beta.astype(np.float64)
    return FeatureMap(out)


def grouped_pointwise_conv(src: FeatureMap, weight: np.ndarray, bias: np.ndarray, groups: int) -> FeatureMap:
    """1x1 convolution with channel groups.

    weight has shape (c_out, c_in // groups); output channel l belongs to
    group floor(l * groups / c_out) and only sees the matching input slice.
    """
    weight = np.asarray(weight, np.float32)
    bias = np.asarray(bias, np.float32)
    if weight.ndim != 2 or bias.ndim != 1 or bias.size != weight.shape[0]:
        raise ShapeMismatch(f"weight {weight.shape} / bias {bias.shape} are not a conv parameter pair")
    c_out = weight.shape[0]
    c_in = weight.shape[1] * groups
    if groups < 1 or c_out % groups:
        raise ChannelGroupMismatch(f"{c_out} output channels not divisible into {groups} groups")
    if src.channels != c_in:
        raise ShapeMismatch(f"map has {src.channels} channels, weight implies {c_in}")
    h, w, _ = src.shape
    flat = src.astype64().reshape(h * w, c_in)
    out = np.empty((h * w, c_out), np.float64)
    in_per, out_per = c_in // groups, c_out // groups
    w64 = weight.astype(np.float64)
    for g in range(groups):
        lo, li = g * out_per, g * in_per
        out[:, lo : lo + out_per] = flat[:, li : li + in_per] @ w64[lo : lo + out_per].T
    out += bias.astype(np.float64)
    return FeatureMap(out.reshape(h, w, c_out))


def relu(src: FeatureMap) -> FeatureMap:
    return FeatureMap(np.maximum(src.data, np.float32(0)))


@dataclass(frozen=True)
class NeighborhoodTensor:
    """Per-pixel gathered neighbor features, shape (pixels, neighbors, channels)."""

    data: np.ndarray

    @property
    def pixels(self) -> int:
        return self.data.shape[0]

    @property
    def neighbors(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def neighbor_offsets(kernel: int, dilation: int) -> list[tuple[int, int]]:
    """Row-major (di, dj) offsets of the dilated KxK neighborhood."""
    if kernel < 1 or kernel % 2 == 0:
        raise ShapeMismatch(f"kernel size must be odd and >= 1, got {kernel}")
    if dilation < 1:
        raise ShapeMismatch(f"dilation must be >= 1, got {dilation}")
    reach = (kernel - 1) // 2
    return [(di * dilation, dj * dilation) for di in range(-reach, reach + 1) for dj in range(-reach, reach + 1)]


def gather_neighbors(src: FeatureMap, kernel: int, dilation: int = 1) -> NeighborhoodTensor:
    """Gather the dilated KxK neighborhood of every pixel (clamped at edges).

    Slot n of pixel (i, j) holds src at (i + dilation*di, j + dilation*dj)
    for the n-th row-major offset, indices clamped to the map.
    """
    offsets = neighbor_offsets(kernel, dilation)
    h, w, c = src.shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    out = np.empty((h * w, len(offsets), c), np.float32)
    for n, (di, dj) in enumerate(offsets):
        ri = np.clip(rows + di, 0, h - 1)
        ci = np.clip(cols + dj, 0, w - 1)
        out[:, n, :] = src.data[ri, ci].reshape(h * w, c)
    return NeighborhoodTensor(out)


def softmax_rows(scores: SimilarityScores) -> SimilarityScores:
    """Max-stabilized softmax across the slot (channel) axis of a score map."""
    raw = scores.astype64()
    shifted = raw - raw.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    return FeatureMap(e / e.sum(axis=2, keepdims=True))
