"""Brute-force reference implementations.

Everything in this module is written directly from the defining formulas:
explicit window/channel/neighbor loops, float64 arithmetic, no reuse of the
production kernels.  These are deliberately slow and exist only as ground
truth for the fast paths; they return plain float64 arrays.
"""

from __future__ import annotations

import numpy as np

from .guided_filter import GuidedFilterConfig
from .ops import ShapeMismatch
from .tensor import FeatureMap


def max_rel_error(actual, expected) -> float:
    """Max absolute deviation, normalized by the magnitude of `expected`.

    The scale floor keeps the metric meaningful when the reference output is
    identically zero.
    """
    actual = np.asarray(actual, np.float64)
    expected = np.asarray(expected, np.float64)
    scale = max(float(np.max(np.abs(expected))), 1e-30)
    return float(np.max(np.abs(actual - expected))) / scale


def oracle_pcdc_direct(q_bar: FeatureMap, k_bar: FeatureMap, weight, bias,
                       groups: int, dilation: int) -> np.ndarray:
    """Difference convolution straight from its definition.

    Triple loop over output channel, within-group input channel, and
    neighbor slot; only the pixel axis is vectorized.  Neighbor slot n is
    the n-th row-major offset of the dilated KxK window, clamped at edges.
    """
    q = q_bar.astype64()
    k = k_bar.astype64()
    w64 = np.asarray(weight, np.float64)
    b64 = np.asarray(bias, np.float64)
    h, w, d_in = q.shape
    ksq, in_per, l_out = w64.shape
    kernel = int(round(ksq**0.5))
    reach = (kernel - 1) // 2
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]

    out = np.zeros((h, w, l_out))
    for l in range(l_out):
        g = l * groups // l_out
        acc = np.zeros((h, w))
        for dt in range(in_per):
            d = g * in_per + dt
            n = 0
            for di in range(-reach, reach + 1):
                for dj in range(-reach, reach + 1):
                    ri = np.clip(rows + di * dilation, 0, h - 1)
                    ci = np.clip(cols + dj * dilation, 0, w - 1)
                    acc += w64[n, dt, l] * (k[ri, ci, d] - q[:, :, d])
                    n += 1
        out[:, :, l] = acc + b64[l]
    return out


def oracle_guided_filter_window(query: FeatureMap, key_up: FeatureMap, cfg: GuidedFilterConfig) -> np.ndarray:
    """Per-window ridge regression, solved independently for every window.

    For each window and channel, fits k ~ m*q + n by solving the 2x2 ridge
    normal equations, then averages the coefficient fields over each pixel's
    window (truncated at the borders) and applies them.
    """
    q = query.astype64()
    k = key_up.astype64()
    h, w, d = q.shape
    r = cfg.radius

    m = np.zeros((h, w, d))
    n = np.zeros((h, w, d))
    for i in range(h):
        for j in range(w):
            wq = q[max(i - r, 0) : i + r + 1, max(j - r, 0) : j + r + 1].reshape(-1, d)
            wk = k[max(i - r, 0) : i + r + 1, max(j - r, 0) : j + r + 1].reshape(-1, d)
            count = wq.shape[0]
            ones = np.ones(count)
            for ch in range(d):
                design = np.stack([wq[:, ch], ones], axis=1)
                lhs = design.T @ design + np.diag([count * cfg.eps, 0.0])
                rhs = design.T @ wk[:, ch]
                m[i, j, ch], n[i, j, ch] = np.linalg.solve(lhs, rhs)

    out = np.zeros((h, w, d))
    for i in range(h):
        for j in range(w):
            wm = m[max(i - r, 0) : i + r + 1, max(j - r, 0) : j + r + 1]
            wn = n[max(i - r, 0) : i + r + 1, max(j - r, 0) : j + r + 1]
            out[i, j] = wm.mean(axis=(0, 1)) * q[i, j] + wn.mean(axis=(0, 1))
    return out


def oracle_kernel_apply_gridwise(weights: FeatureMap, x: FeatureMap, ratio: int,
                                 kernel: int) -> np.ndarray:
    """Kernel application with coarse, grid-wise neighbor selection.

    Every pixel of a ratio x ratio output block shares the KxK dilation-1
    neighbors of its parent low-resolution pixel, so the mixed values jump
    only at block boundaries (the mosaic artifact the fine-grained variant
    removes).  Not a production path; literal per-pixel loops.
    """
    h, w, c = x.shape
    out_h, out_w, slots = weights.shape
    if slots != kernel * kernel:
        raise ShapeMismatch(f"weights carry {slots} slots, kernel {kernel} needs {kernel * kernel}")
    if out_h != ratio * h or out_w != ratio * w:
        raise ShapeMismatch(
            f"weights are {out_h}x{out_w} but ratio {ratio} on {h}x{w} input "
            f"implies {ratio * h}x{ratio * w}"
        )
    wdata = weights.astype64()
    xdata = x.astype64()
    reach = (kernel - 1) // 2

    out = np.zeros((out_h, out_w, c))
    for i in range(out_h):
        for j in range(out_w):
            pi, pj = i // ratio, j // ratio
            acc = np.zeros(c)
            n = 0
            for di in range(-reach, reach + 1):
                for dj in range(-reach, reach + 1):
                    ni = min(max(pi + di, 0), h - 1)
                    nj = min(max(pj + dj, 0), w - 1)
                    acc += wdata[i, j, n] * xdata[ni, nj]
                    n += 1
            out[i, j] = acc
    return out
