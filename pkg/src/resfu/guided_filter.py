"""Edge-preserving alignment of the query map to the upsampled key map.

Fits, per channel and per local window, the linear model  k ~ m * q + n
(least squares with an eps ridge on m), then smooths the per-window
coefficients and applies them back to the query:

    q_out = mean(m) * q + mean(n)

Windows are (2*radius+1)^2 boxes truncated at the borders; every mean is
normalized by the in-bounds pixel count.  Statistics are accumulated in
float64, the result is stored as float32.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ops import ShapeMismatch, _box_mean_raw
from .tensor import FeatureMap


@dataclass(frozen=True)
class GuidedFilterConfig:
    radius: int = 8
    eps: float = 1e-3

    def __post_init__(self):
        if not isinstance(self.radius, int) or self.radius < 1:
            raise ShapeMismatch(f"radius must be an integer >= 1, got {self.radius!r}")
        if not self.eps > 0:
            raise ShapeMismatch(f"eps must be positive, got {self.eps!r}")


def guided_filter(query: FeatureMap, key_up: FeatureMap, cfg: GuidedFilterConfig) -> FeatureMap:
    """Filter `query` toward the local linear structure of `key_up`.

    Both maps must share the same H x W x C shape; channels are filtered
    independently.
    """
    if query.shape != key_up.shape:
        raise ShapeMismatch(f"query {query.shape} and key {key_up.shape} must match")
    q = query.astype64()
    k = key_up.astype64()
    r = cfg.radius

    mean_q = _box_mean_raw(q, r)
    mean_k = _box_mean_raw(k, r)
    cov_qk = _box_mean_raw(q * k, r)
    cov_qk -= mean_q * mean_k
    var_q = _box_mean_raw(q * q, r)
    var_q -= mean_q * mean_q

    var_q += cfg.eps
    m = cov_qk
    m /= var_q
    n = mean_k
    n -= m * mean_q

    out = _box_mean_raw(m, r)
    out *= q
    out += _box_mean_raw(n, r)
    return FeatureMap(out)
