"""The full upsampling pipeline.

Given a low-resolution value/key feature x (h x w x C) and a high-resolution
guide y (H x W x c), the pipeline is:

    q, k    <- per-pixel linear projections of y and x        (D channels)
    k_up    <- bilinear_resize(k, H, W)
    q_gf    <- guided_filter(q, k_up)          # align q to k's structure
    q_gs    <- gaussian_smooth3(q)             # self-similarity reference
    s_s     <- pcdc_block(q_gf, k_up)          # semantic branch scores
    s_d     <- pcdc_block(q, q_gs)             # detail branch scores
    kernels <- softmax_rows(s_s + s_d)
    out_i   <- sum_n kernels[i, n] * x_up[N(i)_n]

Neighborhoods are K x K with dilation equal to the upsampling ratio, taken
on the high-resolution grids ("fine-grained neighbor selection"); both score
branches use the same dilation.  The value gather runs either naively
(materialize x_up = bilinear_resize(x)) or fused (bilinear samples computed
on demand per row chunk, never holding the full H x W x C buffer).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace
from math import prod

import numpy as np

from .guided_filter import GuidedFilterConfig, guided_filter
from .ops import (
    CHUNK_ROWS,
    GroupNormAffine,
    ShapeMismatch,
    SimilarityScores,
    axis_linear_coords,
    bilinear_resize,
    gather_neighbors,
    gaussian_smooth3,
    neighbor_offsets,
    run_row_chunks,
    softmax_rows,
)
from .pcdc import CompressorParams, PcdcBlockParams, PcdcParams, pcdc_block
from .tensor import FeatureMap

PROJ_DIM = 32  # D: projection width of q and k
PCDC_CHANNELS = 32  # L: difference-conv output channels
PCDC_GROUPS = 4  # G
COMPRESSOR_HIDDEN = 128
NORM_GROUPS = 4
NORM_EPS = 1e-5


class RatioMismatch(Exception):
    """Guide/input dimensions are not related by the integer ratio."""


class RowNotNormalized(Exception):
    """Kernel weights were not softmax-normalized before application."""


@dataclass(frozen=True)
class ProjectionParams:
    """Per-pixel affine projections: q from the guide, k from the input."""

    weight_q: np.ndarray
    bias_q: np.ndarray
    weight_k: np.ndarray
    bias_k: np.ndarray

    def __post_init__(self):
        for name in ("weight_q", "bias_q", "weight_k", "bias_k"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), np.float32))
        if self.weight_q.ndim != 2 or self.weight_k.ndim != 2:
            raise ShapeMismatch("projection weights must be matrices")
        d = self.weight_q.shape[0]
        if self.weight_k.shape[0] != d or self.bias_q.shape != (d,) or self.bias_k.shape != (d,):
            raise ShapeMismatch("projection tensors disagree on the output dimension")

    @property
    def dim(self) -> int:
        return self.weight_q.shape[0]


@dataclass(frozen=True)
class ResfuParams:
    """Everything learned/generated: projections, the two score blocks, and
    the guided-filter settings."""

    proj: ProjectionParams
    block_s: PcdcBlockParams
    block_d: PcdcBlockParams
    gf: GuidedFilterConfig = GuidedFilterConfig()

    def __post_init__(self):
        d = self.proj.dim
        if self.block_s.norm.channels != d or self.block_d.norm.channels != d:
            raise ShapeMismatch(
                f"score blocks expect {self.block_s.norm.channels}/{self.block_d.norm.channels} "
                f"channels but projections produce {d}"
            )
        if self.block_s.pcdc.kernel != self.block_d.pcdc.kernel:
            raise ShapeMismatch("both score blocks must share one kernel size")

    @property
    def kernel(self) -> int:
        return self.block_s.pcdc.kernel


@dataclass(frozen=True)
class UpsampleConfig:
    ratio: int
    kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.ratio, (int, np.integer)) or self.ratio < 1:
            raise RatioMismatch(f"ratio must be an integer >= 1, got {self.ratio!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeMismatch(f"kernel size must be odd and >= 1, got {self.kernel}")
        if not 0 <= int(self.seed) < 2**64:
            raise ShapeMismatch(f"seed must fit in 64 unsigned bits, got {self.seed}")


def project_qk(x: FeatureMap, y: FeatureMap, proj: ProjectionParams) -> tuple[FeatureMap, FeatureMap]:
    """Project guide and input into the shared D-channel comparison space."""
    if y.channels != proj.weight_q.shape[1]:
        raise ShapeMismatch(f"guide has {y.channels} channels, weight_q expects {proj.weight_q.shape[1]}")
    if x.channels != proj.weight_k.shape[1]:
        raise ShapeMismatch(f"input has {x.channels} channels, weight_k expects {proj.weight_k.shape[1]}")

    def affine(src: FeatureMap, weight: np.ndarray, bias: np.ndarray) -> FeatureMap:
        flat = src.astype64().reshape(-1, src.channels)
        out = flat @ weight.astype(np.float64).T + bias.astype(np.float64)
        return FeatureMap(out.reshape(src.height, src.width, -1))

    return affine(y, proj.weight_q, proj.bias_q), affine(x, proj.weight_k, proj.bias_k)


def _with_dilation(block: PcdcBlockParams, dilation: int) -> PcdcBlockParams:
    if block.pcdc.dilation == dilation:
        return block
    return replace(block, pcdc=replace(block.pcdc, dilation=dilation))


def compute_similarity(q: FeatureMap, k_up: FeatureMap, q_gs: FeatureMap,
                       params: ResfuParams, ratio: int, threads: int = 1) -> SimilarityScores:
    """Sum of the two branch scores; both branches run at dilation = ratio.

    The semantic branch compares the guided-filtered query against the
    upsampled key; the detail branch compares the query against its own
    Gaussian smoothing.
    """
    q_gf = guided_filter(q, k_up, params.gf)
    s_s = pcdc_block(q_gf, k_up, _with_dilation(params.block_s, ratio), threads)
    s_d = pcdc_block(q, q_gs, _with_dilation(params.block_d, ratio), threads)
    return FeatureMap(s_s.data + s_d.data)


# --- kernel application with fine-grained neighbor selection ---------------

_alloc_tallies: list["AllocationTally"] = []


class AllocationTally:
    """High-water byte counts of the large temporaries a call materializes."""

    def __init__(self):
        self.by_label: dict[str, int] = {}

    def note(self, label: str, nbytes: int) -> None:
        self.by_label[label] = max(self.by_label.get(label, 0), int(nbytes))

    def total(self) -> int:
        return sum(self.by_label.values())


@contextmanager
def track_allocations():
    """Collect temporary-buffer sizes of kernel application runs."""
    tally = AllocationTally()
    _alloc_tallies.append(tally)
    try:
        yield tally
    finally:
        _alloc_tallies.pop()


def _note_alloc(label: str, nbytes: int) -> None:
    if _alloc_tallies:
        _alloc_tallies[-1].note(label, nbytes)


def _apply_naive(weights: np.ndarray, x: FeatureMap, ratio: int, kernel: int) -> np.ndarray:
    """Reference path: materialize the upsampled value map, then gather."""
    out_h, out_w = weights.shape[:2]
    x_up = bilinear_resize(x, out_h, out_w)
    _note_alloc("naive/value_upsampled", x_up.data.nbytes)
    pad = (kernel - 1) // 2 * ratio
    padded = np.pad(x_up.data, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    _note_alloc("naive/value_padded", padded.nbytes)
    out = np.zeros((out_h, out_w, x.channels), np.float32)
    for n, (di, dj) in enumerate(neighbor_offsets(kernel, ratio)):
        view = padded[pad + di : pad + di + out_h, pad + dj : pad + dj + out_w]
        out += weights[:, :, n : n + 1] * view
    return out


def _apply_fused(weights: np.ndarray, x: FeatureMap, ratio: int, kernel: int, threads: int) -> np.ndarray:
    """Fused path: bilinear value samples are computed per row chunk on
    demand; the full upsampled buffer never exists."""
    out_h, out_w = weights.shape[:2]
    h, w, c = x.shape
    r_lo, r_hi, r_t = axis_linear_coords(h, out_h)
    c_lo, c_hi, c_t = axis_linear_coords(w, out_w)
    r_t = r_t.astype(np.float32)
    c_t = c_t.astype(np.float32)[None, :, None]
    pad = (kernel - 1) // 2 * ratio
    offsets = neighbor_offsets(kernel, ratio)
    data = x.data
    out = np.empty((out_h, out_w, c), np.float32)
    scratch_rows = min(CHUNK_ROWS, out_h) + 2 * pad
    _note_alloc("fused/chunk_scratch", 4 * scratch_rows * (out_w + 2 * pad) * c)

    def work(r0, r1):
        rows_ext = np.clip(np.arange(r0 - pad, r1 + pad), 0, out_h - 1)
        t = r_t[rows_ext][:, None, None]
        rows = data[r_lo[rows_ext]] * (1 - t) + data[r_hi[rows_ext]] * t
        samples = rows[:, c_lo] * (1 - c_t) + rows[:, c_hi] * c_t
        strip = np.pad(samples, ((0, 0), (pad, pad), (0, 0)), mode="edge")
        acc = np.zeros((r1 - r0, out_w, c), np.float32)
        for n, (di, dj) in enumerate(offsets):
            view = strip[pad + di : pad + di + (r1 - r0), pad + dj : pad + dj + out_w]
            acc += weights[r0:r1, :, n : n + 1] * view
        out[r0:r1] = acc

    run_row_chunks(out_h, threads, work)
    return out


def kernel_apply_fns(weights: SimilarityScores, x: FeatureMap, ratio: int, kernel: int = 3,
                     fused: bool = True, threads: int = 1) -> FeatureMap:
    """Mix bilinearly upsampled values of x with per-pixel kernel weights.

    `weights` holds one post-softmax weight per neighbor slot; slot n of
    output pixel i addresses x_up at i plus the n-th dilated offset (dilation
    = ratio, clamped at edges).  The fused and naive paths are held to agree
    within 1e-5 relative.
    """
    if weights.channels != kernel * kernel:
        raise ShapeMismatch(f"weights carry {weights.channels} slots, kernel {kernel} needs {kernel * kernel}")
    if not isinstance(ratio, (int, np.integer)) or ratio < 1:
        raise RatioMismatch(f"ratio must be an integer >= 1, got {ratio!r}")
    if weights.height != ratio * x.height or weights.width != ratio * x.width:
        raise RatioMismatch(
            f"weights are {weights.height}x{weights.width} but ratio {ratio} on "
            f"{x.height}x{x.width} input implies {ratio * x.height}x{ratio * x.width}"
        )
    row_sums = weights.astype64().sum(axis=2)
    worst = float(np.max(np.abs(row_sums - 1.0)))
    if worst > 1e-3:
        raise RowNotNormalized(f"kernel rows sum off by {worst:.3g}; run softmax_rows first")
    if fused:
        return FeatureMap(_apply_fused(weights.data, x, int(ratio), kernel, threads))
    return FeatureMap(_apply_naive(weights.data, x, int(ratio), kernel))


# --- end-to-end pipeline ----------------------------------------------------


@dataclass
class PipelineResult:
    """All intermediates of one upsampling run (for dumps and tests)."""

    q: FeatureMap
    k: FeatureMap
    k_up: FeatureMap
    q_gf: FeatureMap
    q_gs: FeatureMap
    s_s: SimilarityScores
    s_d: SimilarityScores
    scores: SimilarityScores
    kernels: SimilarityScores
    output: FeatureMap


def run_pipeline(x: FeatureMap, y: FeatureMap, params: ResfuParams, cfg: UpsampleConfig,
                 fused: bool = True, threads: int = 1) -> PipelineResult:
    if y.height != cfg.ratio * x.height or y.width != cfg.ratio * x.width:
        raise RatioMismatch(
            f"guide is {y.height}x{y.width}, ratio {cfg.ratio} on {x.height}x{x.width} "
            f"input implies {cfg.ratio * x.height}x{cfg.ratio * x.width}"
        )
    if params.kernel != cfg.kernel:
        raise ShapeMismatch(f"params were built for kernel {params.kernel}, config says {cfg.kernel}")

    q, k = project_qk(x, y, params.proj)
    k_up = bilinear_resize(k, y.height, y.width)
    q_gf = guided_filter(q, k_up, params.gf)
    q_gs = gaussian_smooth3(q)
    s_s = pcdc_block(q_gf, k_up, _with_dilation(params.block_s, cfg.ratio), threads)
    s_d = pcdc_block(q, q_gs, _with_dilation(params.block_d, cfg.ratio), threads)
    scores = FeatureMap(s_s.data + s_d.data)
    kernels = softmax_rows(scores)
    output = kernel_apply_fns(kernels, x, cfg.ratio, cfg.kernel, fused=fused, threads=threads)
    return PipelineResult(q, k, k_up, q_gf, q_gs, s_s, s_d, scores, kernels, output)


def resfu_upsample(x: FeatureMap, y: FeatureMap, params: ResfuParams, cfg: UpsampleConfig,
                   fused: bool = True, threads: int = 1) -> FeatureMap:
    """Upsample x by cfg.ratio under the guidance of y."""
    return run_pipeline(x, y, params, cfg, fused=fused, threads=threads).output


def inner_product_scores(q: FeatureMap, k_up: FeatureMap, kernel: int, ratio: int) -> SimilarityScores:
    """Plain dot-product similarity over the same dilated neighborhoods,
    kept as the baseline the difference blocks are compared against."""
    if q.shape != k_up.shape:
        raise ShapeMismatch(f"query {q.shape} and key {k_up.shape} must match")
    neighborhood = gather_neighbors(k_up, kernel, int(ratio))
    scores = np.einsum(
        "pd,pnd->pn",
        q.astype64().reshape(q.height * q.width, q.channels),
        neighborhood.data.astype(np.float64),
    )
    return FeatureMap(scores.reshape(q.height, q.width, kernel * kernel))


def innerprod_upsample(x: FeatureMap, y: FeatureMap, params: ResfuParams, cfg: UpsampleConfig,
                       fused: bool = True, threads: int = 1) -> FeatureMap:
    """Baseline pipeline with both score branches replaced by the
    inner-product similarity."""
    if y.height != cfg.ratio * x.height or y.width != cfg.ratio * x.width:
        raise RatioMismatch(
            f"guide is {y.height}x{y.width}, ratio {cfg.ratio} on {x.height}x{x.width} "
            f"input implies {cfg.ratio * x.height}x{cfg.ratio * x.width}"
        )
    q, k = project_qk(x, y, params.proj)
    k_up = bilinear_resize(k, y.height, y.width)
    kernels = softmax_rows(inner_product_scores(q, k_up, cfg.kernel, cfg.ratio))
    return kernel_apply_fns(kernels, x, cfg.ratio, cfg.kernel, fused=fused, threads=threads)


# --- deterministic parameter synthesis --------------------------------------


class _MixStream:
    """Counter-based splitmix64 stream: draw i is mix(seed + i * golden).

    Fixed for this repo so identical seeds give bitwise identical bundles;
    cross-implementation equality is not a goal.
    """

    _GOLDEN = np.uint64(0x9E3779B97F4A7C15)
    _MIX1 = np.uint64(0xBF58476D1CE4E5B9)
    _MIX2 = np.uint64(0x94D049BB133111EB)

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._drawn = 0

    def uniform(self, shape: tuple[int, ...], bound: float) -> np.ndarray:
        """float32 samples in [-bound, bound), row-major draw order."""
        count = prod(shape)
        with np.errstate(over="ignore"):
            z = self._seed + np.arange(self._drawn + 1, self._drawn + count + 1, dtype=np.uint64) * self._GOLDEN
            z = (z ^ (z >> np.uint64(30))) * self._MIX1
            z = (z ^ (z >> np.uint64(27))) * self._MIX2
            z = z ^ (z >> np.uint64(31))
        self._drawn += count
        unit = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53  # [0, 1)
        return (bound * (2.0 * unit - 1.0)).astype(np.float32).reshape(shape)


def generate_params(c_in: int, c_guide: int, cfg: UpsampleConfig) -> ResfuParams:
    """Synthesize a deterministic parameter bundle.

    Weights are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] from a seeded
    splitmix64 stream (drawn in serialization order); biases are zero, norm
    gains one, norm shifts zero.
    """
    d, l_out, g = PROJ_DIM, PCDC_CHANNELS, PCDC_GROUPS
    ksq = cfg.kernel * cfg.kernel
    stream = _MixStream(cfg.seed)

    proj = ProjectionParams(
        weight_q=stream.uniform((d, c_guide), 1.0 / np.sqrt(c_guide)),
        bias_q=np.zeros(d, np.float32),
        weight_k=stream.uniform((d, c_in), 1.0 / np.sqrt(c_in)),
        bias_k=np.zeros(d, np.float32),
    )

    def make_block() -> PcdcBlockParams:
        pcdc_fan_in = (d // g) * ksq
        block = PcdcBlockParams(
            norm=GroupNormAffine(np.ones(d, np.float32), np.zeros(d, np.float32), NORM_GROUPS, NORM_EPS),
            pcdc=PcdcParams(
                weight=stream.uniform((ksq, d // g, l_out), 1.0 / np.sqrt(pcdc_fan_in)),
                bias=np.zeros(l_out, np.float32),
                groups=g,
            ),
            comp=CompressorParams(
                conv1_weight=stream.uniform((COMPRESSOR_HIDDEN, l_out // 4), 1.0 / np.sqrt(l_out // 4)),
                conv1_bias=np.zeros(COMPRESSOR_HIDDEN, np.float32),
                norm=GroupNormAffine(
                    np.ones(COMPRESSOR_HIDDEN, np.float32),
                    np.zeros(COMPRESSOR_HIDDEN, np.float32),
                    NORM_GROUPS,
                    NORM_EPS,
                ),
                conv2_weight=stream.uniform((ksq, COMPRESSOR_HIDDEN), 1.0 / np.sqrt(COMPRESSOR_HIDDEN)),
                conv2_bias=np.zeros(ksq, np.float32),
            ),
        )
        return block

    return ResfuParams(proj=proj, block_s=make_block(), block_d=make_block())
