"""Feature-map visualization: PCA projection to RGB, written as binary PPM.

The eigendecomposition is a hand-rolled cyclic Jacobi sweep (the covariance
matrices here are tiny, and a fixed rotation order keeps the output bytes
reproducible everywhere).  Zero-variance channels have no defined min-max
scaling and render as mid-gray 128; inputs with fewer than three channels
pad the missing RGB planes with 128 as well.
"""

from __future__ import annotations

import numpy as np

from .ops import ShapeMismatch
from .tensor import FeatureMap

MID_GRAY = 128
_VARIANCE_FLOOR = 1e-10  # eigenvalues below floor * largest count as zero


def jacobi_eigh(sym: np.ndarray, max_sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and eigenvectors (columns) of a symmetric
    matrix by cyclic Jacobi rotations."""
    a = np.asarray(sym, np.float64).copy()
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeMismatch(f"expected a square matrix, got {a.shape}")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= 1e-14 * max(1.0, float(np.max(np.abs(np.diag(a))))):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = 1.0 if theta == 0.0 else np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # two-sided rotation in the (p, q) plane, applied in place
                row_p, row_q = a[p].copy(), a[q].copy()
                a[p], a[q] = c * row_p - s * row_q, s * row_p + c * row_q
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * col_p - s * col_q, s * col_p + c * col_q
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vec_p - s * vec_q, s * vec_p + c * vec_q
    order = np.argsort(np.diag(a))[::-1]
    return np.diag(a)[order], v[:, order]


def _scale_to_bytes(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    if hi - lo <= 0.0:
        return np.full(plane.shape, MID_GRAY, np.uint8)
    return np.rint((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)


def pca_rgb(fmap: FeatureMap) -> np.ndarray:
    """Project channels onto the top-3 principal directions, one per RGB
    plane, each min-max scaled to [0, 255]."""
    h, w, c = fmap.shape
    flat = fmap.astype64().reshape(-1, c)
    centered = flat - flat.mean(axis=0)
    cov = centered.T @ centered / flat.shape[0]
    eigvals, eigvecs = jacobi_eigh(cov)

    rgb = np.full((h, w, 3), MID_GRAY, np.uint8)
    floor = _VARIANCE_FLOOR * max(float(eigvals[0]), 0.0)
    for plane in range(min(3, c)):
        if eigvals[plane] <= floor:
            continue  # no variance along this direction: keep mid-gray
        direction = eigvecs[:, plane]
        if direction[np.argmax(np.abs(direction))] < 0:
            direction = -direction  # fix the sign for reproducible bytes
        rgb[:, :, plane] = _scale_to_bytes((centered @ direction).reshape(h, w))
    return rgb


def channel_rgb(fmap: FeatureMap, channel: int) -> np.ndarray:
    """One channel as a min-max scaled grayscale image."""
    if not 0 <= channel < fmap.channels:
        raise ShapeMismatch(f"channel {channel} out of range for {fmap.channels} channels")
    plane = _scale_to_bytes(fmap.astype64()[:, :, channel])
    return np.repeat(plane[:, :, None], 3, axis=2)


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeMismatch(f"PPM wants an HxWx3 byte image, got {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def save_ppm(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))
