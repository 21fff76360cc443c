"""Hand-derived backward passes for the two novel kernels, verified against
central finite differences.

Everything here runs on raw float64 arrays: finite differences at 32-bit
would drown the comparison in rounding noise, so this module keeps its own
64-bit forward evaluations (same definitions as the production kernels) and
differentiates those.  Only the difference convolution and the
softmax-kernel application get backward passes; training the full pipeline
is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import ShapeMismatch, axis_linear_coords, neighbor_offsets
from .oracle import max_rel_error

FD_STEP = 1e-5
FD_TOLERANCE = 1e-6
EXACT_TOLERANCE = 1e-10
DEFAULT_PROBES = 64


class NonFiniteValue(Exception):
    """The probed function returned NaN or Inf."""


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of one gradient comparison."""

    op_name: str
    max_rel_error: float
    tolerance: float
    probes: int
    passed: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "passed", bool(self.max_rel_error <= self.tolerance))


# --- 64-bit forward evaluations ---------------------------------------------


def _clamped_indices(h, w, offsets, dilation):
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    return [
        (np.clip(rows + di * dilation, 0, h - 1), np.clip(cols + dj * dilation, 0, w - 1))
        for di, dj in offsets
    ]


def _pcdc_forward(q, k, weight, bias, groups, dilation):
    h, w, d_total = q.shape
    ksq, in_per, l_out = weight.shape
    kernel = int(round(ksq**0.5))
    out_per = l_out // groups
    wsum = weight.sum(axis=0)
    index_maps = _clamped_indices(h, w, neighbor_offsets(kernel, dilation), 1)

    out = np.broadcast_to(bias, (h, w, l_out)).astype(np.float64).copy()
    for g in range(groups):
        ds = slice(g * in_per, (g + 1) * in_per)
        ls = slice(g * out_per, (g + 1) * out_per)
        acc = -q[:, :, ds] @ wsum[:, ls]
        for n, (ri, ci) in enumerate(index_maps):
            acc += k[ri, ci][:, :, ds] @ weight[n][:, ls]
        out[:, :, ls] += acc
    return out


def _softmax64(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _bilinear64(x, out_h, out_w):
    h, w, _ = x.shape
    r_lo, r_hi, r_t = axis_linear_coords(h, out_h)
    c_lo, c_hi, c_t = axis_linear_coords(w, out_w)
    rows = x[r_lo] * (1 - r_t)[:, None, None] + x[r_hi] * r_t[:, None, None]
    return rows[:, c_lo] * (1 - c_t)[None, :, None] + rows[:, c_hi] * c_t[None, :, None]


def _kernel_apply_forward(scores, x, ratio, kernel):
    out_h, out_w, _ = scores.shape
    weights = _softmax64(scores)
    x_up = _bilinear64(x, out_h, out_w)
    out = np.zeros_like(x_up)
    for n, (ri, ci) in enumerate(_clamped_indices(out_h, out_w, neighbor_offsets(kernel, ratio), 1)):
        out += weights[:, :, n : n + 1] * x_up[ri, ci]
    return out


# --- finite differences ------------------------------------------------------


def finite_diff_grad(f, x, h: float = FD_STEP) -> np.ndarray:
    """Dense central-difference gradient of a scalar function."""
    x = np.asarray(x, np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for idx in range(flat.size):
        grad[idx] = _central_diff(f, x, idx, h)
    return grad.reshape(x.shape)


def _central_diff(f, x, flat_index, h):
    bumped = x.copy()
    bumped.reshape(-1)[flat_index] += h
    hi = float(f(bumped))
    bumped.reshape(-1)[flat_index] -= 2 * h
    lo = float(f(bumped))
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise NonFiniteValue(f"function returned {hi}/{lo} near probe {flat_index}")
    return (hi - lo) / (2 * h)


def _probe_coords(rng, size, probes):
    if size <= probes:
        return np.arange(size)
    return rng.choice(size, size=probes, replace=False)


def _fd_vs_analytic(op_name, loss, arr, analytic, rng, probes) -> GradCheckReport:
    coords = _probe_coords(rng, arr.size, probes)
    fd = np.array([_central_diff(loss, arr, int(idx), FD_STEP) for idx in coords])
    want = analytic.reshape(-1)[coords]
    return GradCheckReport(op_name, max_rel_error(fd, want), FD_TOLERANCE, len(coords))


# --- backward passes ---------------------------------------------------------


def pcdc_backward(upstream, q_bar, k_bar, weight, bias, groups: int, dilation: int):
    """Gradients of sum(upstream * pcdc(q_bar, k_bar)) for all four inputs.

    The query gradient reuses the spatially-summed weights (negated); the key
    gradient scatter-adds through the clamped neighbor maps; the weight
    gradient accumulates upstream-times-difference outer products.
    """
    upstream = np.asarray(upstream, np.float64)
    q = np.asarray(q_bar, np.float64)
    k = np.asarray(k_bar, np.float64)
    weight = np.asarray(weight, np.float64)
    h, w, d_total = q.shape
    ksq, in_per, l_out = weight.shape
    if upstream.shape != (h, w, l_out):
        raise ShapeMismatch(f"upstream {upstream.shape} does not match output {(h, w, l_out)}")
    if k.shape != q.shape or groups * in_per != d_total or l_out % groups:
        raise ShapeMismatch("saved inputs disagree with the weight layout")
    kernel = int(round(ksq**0.5))
    out_per = l_out // groups
    wsum = weight.sum(axis=0)
    index_maps = _clamped_indices(h, w, neighbor_offsets(kernel, dilation), 1)

    d_q = np.zeros_like(q)
    d_k = np.zeros_like(k)
    d_w = np.zeros_like(weight)
    d_b = upstream.sum(axis=(0, 1))
    for g in range(groups):
        ds = slice(g * in_per, (g + 1) * in_per)
        ls = slice(g * out_per, (g + 1) * out_per)
        u_g = upstream[:, :, ls]
        d_q[:, :, ds] = -np.einsum("hwl,dl->hwd", u_g, wsum[:, ls])
        d_k_g = d_k[:, :, ds]
        for n, (ri, ci) in enumerate(index_maps):
            diff = k[ri, ci][:, :, ds] - q[:, :, ds]
            d_w[n][:, ls] = np.einsum("hwd,hwl->dl", diff, u_g)
            np.add.at(d_k_g, (ri, ci), np.einsum("hwl,dl->hwd", u_g, weight[n][:, ls]))
    return d_q, d_k, d_w, d_b


def _axis_transpose(d, lo, hi, t, n_in):
    """Adjoint of one linear-interpolation axis (axis 0)."""
    out = np.zeros((n_in,) + d.shape[1:])
    shaped = t.reshape((-1,) + (1,) * (d.ndim - 1))
    np.add.at(out, lo, d * (1 - shaped))
    np.add.at(out, hi, d * shaped)
    return out


def kernel_apply_backward(upstream, weights, x, ratio: int, kernel: int = 3):
    """Gradients of sum(upstream * output) for the pre-softmax scores and x.

    `weights` are the saved post-softmax kernels.  The score gradient applies
    the softmax Jacobian w * (g - <w, g>); the value gradient scatters the
    weighted upstream through the neighbor maps and then through the adjoint
    of the bilinear resize.
    """
    upstream = np.asarray(upstream, np.float64)
    weights = np.asarray(weights, np.float64)
    x = np.asarray(x, np.float64)
    out_h, out_w, slots = weights.shape
    h, w, c = x.shape
    if slots != kernel * kernel:
        raise ShapeMismatch(f"weights carry {slots} slots, kernel {kernel} needs {kernel * kernel}")
    if upstream.shape != (out_h, out_w, c) or (out_h, out_w) != (ratio * h, ratio * w):
        raise ShapeMismatch(
            f"upstream {upstream.shape}, weights {weights.shape}, and value {x.shape} disagree"
        )
    index_maps = _clamped_indices(out_h, out_w, neighbor_offsets(kernel, ratio), 1)
    x_up = _bilinear64(x, out_h, out_w)

    d_post = np.empty_like(weights)
    d_x_up = np.zeros_like(x_up)
    for n, (ri, ci) in enumerate(index_maps):
        d_post[:, :, n] = (upstream * x_up[ri, ci]).sum(axis=2)
        np.add.at(d_x_up, (ri, ci), weights[:, :, n : n + 1] * upstream)
    d_scores = weights * (d_post - (weights * d_post).sum(axis=2, keepdims=True))

    r_lo, r_hi, r_t = axis_linear_coords(h, out_h)
    c_lo, c_hi, c_t = axis_linear_coords(w, out_w)
    cols_undone = _axis_transpose(d_x_up.transpose(1, 0, 2), c_lo, c_hi, c_t, w).transpose(1, 0, 2)
    d_x = _axis_transpose(cols_undone, r_lo, r_hi, r_t, h)
    return d_scores, d_x


# --- check drivers -----------------------------------------------------------


def check_pcdc_gradients(seed: int = 0, probes: int = DEFAULT_PROBES) -> list[GradCheckReport]:
    """FD-verify all four difference-convolution gradients on a random case."""
    rng = np.random.default_rng(seed)
    # every probed tensor holds at least DEFAULT_PROBES entries, so the
    # probe count is never truncated by exhausting a small array
    h, w, d_total, l_out, groups, dilation = 5, 4, 8, 64, 2, 2
    q = rng.standard_normal((h, w, d_total))
    k = rng.standard_normal((h, w, d_total))
    weight = rng.standard_normal((9, d_total // groups, l_out)) * 0.3
    bias = rng.standard_normal(l_out) * 0.1
    proj = rng.standard_normal((h, w, l_out))

    def loss_for(name):
        def loss(arr):
            parts = {"q": q, "k": k, "weight": weight, "bias": bias, name: arr}
            return float(
                (proj * _pcdc_forward(parts["q"], parts["k"], parts["weight"], parts["bias"],
                                      groups, dilation)).sum()
            )

        return loss

    d_q, d_k, d_w, d_b = pcdc_backward(proj, q, k, weight, bias, groups, dilation)
    return [
        _fd_vs_analytic("pcdc/d_query", loss_for("q"), q, d_q, rng, probes),
        _fd_vs_analytic("pcdc/d_key", loss_for("k"), k, d_k, rng, probes),
        _fd_vs_analytic("pcdc/d_weight", loss_for("weight"), weight, d_w, rng, probes),
        _fd_vs_analytic("pcdc/d_bias", loss_for("bias"), bias, d_b, rng, probes),
    ]


def check_kernel_apply_gradients(seed: int = 0, probes: int = DEFAULT_PROBES) -> list[GradCheckReport]:
    """FD-verify the softmax-kernel application plus its shift invariance."""
    rng = np.random.default_rng(seed)
    ratio, kernel = 2, 3
    h, w, c = 4, 4, 4  # 64 value entries: enough for a full probe set
    x = rng.standard_normal((h, w, c))
    scores = rng.standard_normal((h * ratio, w * ratio, kernel * kernel))
    proj = rng.standard_normal((h * ratio, w * ratio, c))

    def loss_scores(arr):
        return float((proj * _kernel_apply_forward(arr, x, ratio, kernel)).sum())

    def loss_x(arr):
        return float((proj * _kernel_apply_forward(scores, arr, ratio, kernel)).sum())

    d_scores, d_x = kernel_apply_backward(proj, _softmax64(scores), x, ratio, kernel)
    row_sum = float(np.max(np.abs(d_scores.sum(axis=2))))
    return [
        _fd_vs_analytic("kernel_apply/d_scores", loss_scores, scores, d_scores, rng, probes),
        _fd_vs_analytic("kernel_apply/d_value", loss_x, x, d_x, rng, probes),
        GradCheckReport("kernel_apply/shift_invariance", row_sum, EXACT_TOLERANCE,
                        d_scores.shape[0] * d_scores.shape[1]),
    ]


def check_gradients(seed: int = 0, probes: int = DEFAULT_PROBES) -> list[GradCheckReport]:
    return check_pcdc_gradients(seed, probes) + check_kernel_apply_gradients(seed, probes)
