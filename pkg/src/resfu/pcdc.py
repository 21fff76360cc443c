"""Paired central difference similarity head.

The core layer compares a query pixel against the dilated KxK neighborhood
of the key map, channel group by channel group:

    v[i, l] = sum_d sum_n w[n, d', l] * (k[N(i)_n, d] - q[i, d]) + b[l]

where d runs over the input channels of output l's group and d' is the
within-group channel index.  Because the query term does not depend on the
neighbor slot, the layer is evaluated in decomposed form: a grouped dilated
KxK convolution over the key minus a 1x1 convolution over the query whose
weights are the spatial sums of w.  The literal triple-loop form lives in
resfu.oracle and the two are held to agree in tests.

A full block normalizes both inputs with a shared affine (statistics stay
per input), applies the difference layer, then compresses the L channels
down to one score per neighbor slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import (
    ChannelGroupMismatch,
    GroupNormAffine,
    ShapeMismatch,
    SimilarityScores,
    group_normalize,
    grouped_pointwise_conv,
    neighbor_offsets,
    relu,
    run_row_chunks,
)
from .tensor import FeatureMap


def _as_float32(name: str, arr, rank: int) -> np.ndarray:
    arr = np.asarray(arr, np.float32)
    if arr.ndim != rank:
        raise ShapeMismatch(f"{name} must have rank {rank}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class PcdcParams:
    """Difference-convolution weights: (K*K, D//groups, L) plus per-output bias."""

    weight: np.ndarray
    bias: np.ndarray
    groups: int
    dilation: int = 1

    def __post_init__(self):
        weight = _as_float32("weight", self.weight, 3)
        bias = _as_float32("bias", self.bias, 1)
        ksq, _, l_out = weight.shape
        kernel = math.isqrt(ksq)
        if kernel * kernel != ksq or kernel % 2 == 0:
            raise ShapeMismatch(f"leading weight dim {ksq} is not an odd kernel squared")
        if bias.size != l_out:
            raise ShapeMismatch(f"bias has {bias.size} entries, weight implies {l_out}")
        if self.groups < 1 or l_out % self.groups:
            raise ChannelGroupMismatch(f"{l_out} outputs not divisible into {self.groups} groups")
        if self.dilation < 1:
            raise ShapeMismatch(f"dilation must be >= 1, got {self.dilation}")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def kernel(self) -> int:
        return math.isqrt(self.weight.shape[0])

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[2]


def _pcdc_core(q: np.ndarray, k: np.ndarray, weight: np.ndarray, bias: np.ndarray,
               groups: int, dilation: int, threads: int = 1) -> np.ndarray:
    """Decomposed difference conv on raw arrays; dtype follows the inputs."""
    h, w, d_in = q.shape
    ksq, in_per, l_out = weight.shape
    kernel = math.isqrt(ksq)
    offsets = neighbor_offsets(kernel, dilation)
    out_per = l_out // groups
    wsum = weight.sum(axis=0)  # (D/G, L): the 1x1-conv weights of the query term
    # flatten each group's weight block once so the contraction below is a
    # plain matmul over (pixels, taps*channels)
    w_flat = [np.ascontiguousarray(weight[:, :, g * out_per : (g + 1) * out_per]).reshape(ksq * in_per, out_per)
              for g in range(groups)]
    wsum_flat = [np.ascontiguousarray(wsum[:, g * out_per : (g + 1) * out_per]) for g in range(groups)]
    out = np.empty((h, w, l_out), q.dtype)

    def work(r0, r1):
        m = r1 - r0
        rows = np.arange(r0, r1)[:, None]
        cols = np.arange(w)[None, :]
        gathered = np.empty((m, w, ksq, d_in), q.dtype)
        for n, (di, dj) in enumerate(offsets):
            ri = np.clip(rows + di, 0, h - 1)
            ci = np.clip(cols + dj, 0, w - 1)
            gathered[:, :, n, :] = k[ri, ci]
        for g in range(groups):
            ls = slice(g * out_per, (g + 1) * out_per)
            ds = slice(g * in_per, (g + 1) * in_per)
            flat = np.ascontiguousarray(gathered[:, :, :, ds]).reshape(m * w, ksq * in_per)
            conv_k = (flat @ w_flat[g]).reshape(m, w, out_per)
            conv_q = q[r0:r1, :, ds] @ wsum_flat[g]
            out[r0:r1, :, ls] = conv_k - conv_q
        out[r0:r1] += bias

    run_row_chunks(h, threads, work)
    return out


def pcdc_layer(q_bar: FeatureMap, k_bar: FeatureMap, params: PcdcParams, threads: int = 1) -> FeatureMap:
    """Apply the difference convolution to a projected query/key pair."""
    if q_bar.shape != k_bar.shape:
        raise ShapeMismatch(f"query {q_bar.shape} and key {k_bar.shape} must match")
    if q_bar.channels != params.in_channels:
        raise ShapeMismatch(
            f"maps have {q_bar.channels} channels, params expect {params.in_channels}"
        )
    out = _pcdc_core(
        q_bar.astype64(),
        k_bar.astype64(),
        params.weight.astype(np.float64),
        params.bias.astype(np.float64),
        params.groups,
        params.dilation,
        threads,
    )
    return FeatureMap(out)


@dataclass(frozen=True)
class CompressorParams:
    """Channel reduction after the difference layer: grouped 1x1 conv, ReLU,
    group norm, then a final 1x1 conv down to one score per neighbor slot.

    The hidden conv uses 4 channel groups; the final conv is ungrouped since
    its K*K outputs do not split evenly into 4.
    """

    conv1_weight: np.ndarray
    conv1_bias: np.ndarray
    norm: GroupNormAffine
    conv2_weight: np.ndarray
    conv2_bias: np.ndarray
    conv1_groups: int = 4
    conv2_groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "conv1_weight", _as_float32("conv1_weight", self.conv1_weight, 2))
        object.__setattr__(self, "conv1_bias", _as_float32("conv1_bias", self.conv1_bias, 1))
        object.__setattr__(self, "conv2_weight", _as_float32("conv2_weight", self.conv2_weight, 2))
        object.__setattr__(self, "conv2_bias", _as_float32("conv2_bias", self.conv2_bias, 1))
        hidden = self.conv1_weight.shape[0]
        if self.norm.channels != hidden:
            raise ShapeMismatch(f"norm covers {self.norm.channels} channels, conv1 makes {hidden}")
        if self.conv2_weight.shape[1] * self.conv2_groups != hidden:
            raise ShapeMismatch(
                f"conv2 expects {self.conv2_weight.shape[1] * self.conv2_groups} channels, conv1 makes {hidden}"
            )


def channel_compressor(v: FeatureMap, params: CompressorParams) -> SimilarityScores:
    """Compress L difference channels to K*K per-slot scores."""
    hidden = grouped_pointwise_conv(v, params.conv1_weight, params.conv1_bias, params.conv1_groups)
    hidden = relu(hidden)
    hidden = group_normalize(hidden, params.norm)
    return grouped_pointwise_conv(hidden, params.conv2_weight, params.conv2_bias, params.conv2_groups)


@dataclass(frozen=True)
class PcdcBlockParams:
    """Shared-affine input norm + difference layer + channel compressor."""

    norm: GroupNormAffine
    pcdc: PcdcParams
    comp: CompressorParams

    def __post_init__(self):
        if self.norm.channels != self.pcdc.in_channels:
            raise ShapeMismatch(
                f"norm covers {self.norm.channels} channels, pcdc expects {self.pcdc.in_channels}"
            )
        if self.comp.conv1_weight.shape[1] * self.comp.conv1_groups != self.pcdc.out_channels:
            raise ShapeMismatch("compressor input channels do not match pcdc outputs")


def pcdc_block(q_in: FeatureMap, k_in: FeatureMap, params: PcdcBlockParams, threads: int = 1) -> SimilarityScores:
    """Score the key neighborhood of every query pixel.

    Both inputs pass through group normalization with the same affine
    parameters (statistics are computed per input), then the difference
    layer and the compressor produce one score per neighbor slot.
    """
    q_bar = group_normalize(q_in, params.norm)
    k_bar = group_normalize(k_in, params.norm)
    v = pcdc_layer(q_bar, k_bar, params.pcdc, threads)
    return channel_compressor(v, params.comp)
