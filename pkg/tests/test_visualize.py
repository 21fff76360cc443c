"""Visualization tests: the Jacobi eigensolver against numpy's, byte-image
invariants of the PCA/channel renderers, and the PPM container format."""

import numpy as np
import pytest

from resfu.ops import ShapeMismatch
from resfu.tensor import FeatureMap
from resfu.visualize import (
    MID_GRAY,
    channel_rgb,
    encode_ppm,
    jacobi_eigh,
    pca_rgb,
    save_ppm,
)


def random_symmetric(rng, n):
    a = rng.standard_normal((n, n))
    return a + a.T


class TestJacobiEigh:
    @pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 13])
    def test_matches_numpy_eigh(self, n):
        rng = np.random.default_rng(n)
        sym = random_symmetric(rng, n)
        vals, vecs = jacobi_eigh(sym)
        ref = np.linalg.eigvalsh(sym)[::-1]  # numpy sorts ascending
        np.testing.assert_allclose(vals, ref, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, sym, atol=1e-10)

    @pytest.mark.parametrize("n", [2, 4, 7])
    def test_eigenvectors_orthonormal(self, n):
        rng = np.random.default_rng(10 + n)
        _, vecs = jacobi_eigh(random_symmetric(rng, n))
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-12)

    def test_eigenvalues_sorted_descending(self):
        rng = np.random.default_rng(42)
        vals, _ = jacobi_eigh(random_symmetric(rng, 9))
        assert np.all(np.diff(vals) <= 0)

    def test_diagonal_input_is_exact(self):
        vals, vecs = jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_array_equal(vals, [3.0, 2.0, 1.0])
        # eigenvectors are signed unit basis vectors, permuted to match
        np.testing.assert_allclose(np.abs(vecs), np.eye(3)[:, [0, 2, 1]], atol=0)

    def test_known_two_by_two(self):
        vals, vecs = jacobi_eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(vals, [3.0, 1.0], atol=1e-14)
        np.testing.assert_allclose(np.abs(vecs[:, 0]), np.full(2, 1 / np.sqrt(2)), atol=1e-14)

    def test_input_left_untouched(self):
        sym = random_symmetric(np.random.default_rng(5), 4)
        before = sym.copy()
        jacobi_eigh(sym)
        np.testing.assert_array_equal(sym, before)

    def test_rejects_nonsquare(self):
        with pytest.raises(ShapeMismatch):
            jacobi_eigh(np.zeros((3, 4)))


class TestPcaRgb:
    def test_constant_map_renders_mid_gray(self):
        rgb = pca_rgb(FeatureMap(np.full((5, 4, 6), 2.5, np.float32)))
        assert rgb.shape == (5, 4, 3) and rgb.dtype == np.uint8
        assert np.all(rgb == MID_GRAY)

    def test_single_varying_channel_drives_red_plane(self):
        # Only channel 2 varies, so the first principal direction is that
        # channel and the other two planes have no variance to show.
        h, w = 6, 5
        data = np.zeros((h, w, 4), np.float32)
        ramp = np.arange(h * w, dtype=np.float32).reshape(h, w)
        data[:, :, 2] = ramp
        rgb = pca_rgb(FeatureMap(data))
        want = np.rint((ramp - ramp.min()) / (ramp.max() - ramp.min()) * 255.0).astype(np.uint8)
        np.testing.assert_array_equal(rgb[:, :, 0], want)
        assert np.all(rgb[:, :, 1] == MID_GRAY)
        assert np.all(rgb[:, :, 2] == MID_GRAY)

    def test_two_channel_input_pads_blue_plane(self):
        rng = np.random.default_rng(0)
        rgb = pca_rgb(FeatureMap(rng.standard_normal((8, 8, 2)).astype(np.float32)))
        assert np.all(rgb[:, :, 2] == MID_GRAY)
        for plane in range(2):  # min-max scaling spans the full byte range
            assert rgb[:, :, plane].min() == 0
            assert rgb[:, :, plane].max() == 255

    def test_shift_invariant_bytes(self):
        rng = np.random.default_rng(1)
        data = rng.standard_normal((7, 9, 5)).astype(np.float32)
        np.testing.assert_array_equal(
            pca_rgb(FeatureMap(data)), pca_rgb(FeatureMap(data + 3.0))
        )

    def test_deterministic_bytes(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((6, 6, 16)).astype(np.float32)
        np.testing.assert_array_equal(pca_rgb(FeatureMap(data)), pca_rgb(FeatureMap(data)))


class TestChannelRgb:
    def test_grayscale_planes_match_min_max_scaling(self):
        rng = np.random.default_rng(3)
        data = rng.standard_normal((5, 7, 3)).astype(np.float32)
        rgb = channel_rgb(FeatureMap(data), 1)
        plane = data[:, :, 1].astype(np.float64)
        want = np.rint((plane - plane.min()) / (plane.max() - plane.min()) * 255.0).astype(np.uint8)
        for p in range(3):
            np.testing.assert_array_equal(rgb[:, :, p], want)

    def test_constant_channel_is_mid_gray(self):
        rgb = channel_rgb(FeatureMap(np.ones((4, 4, 2), np.float32)), 0)
        assert np.all(rgb == MID_GRAY)

    @pytest.mark.parametrize("channel", [-1, 2])
    def test_rejects_out_of_range_channel(self, channel):
        with pytest.raises(ShapeMismatch):
            channel_rgb(FeatureMap(np.zeros((3, 3, 2), np.float32)), channel)


class TestPpmFormat:
    def test_header_and_payload_bytes(self):
        rgb = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        blob = encode_ppm(rgb)
        header = b"P6\n3 2\n255\n"
        assert blob.startswith(header)
        assert blob[len(header):] == rgb.tobytes()

    @pytest.mark.parametrize("shape", [(2, 3), (2, 3, 4), (5,)])
    def test_rejects_non_rgb_arrays(self, shape):
        with pytest.raises(ShapeMismatch):
            encode_ppm(np.zeros(shape, np.uint8))

    def test_save_writes_encoded_bytes(self, tmp_path):
        rgb = np.full((4, 2, 3), 9, np.uint8)
        path = tmp_path / "img.ppm"
        save_ppm(path, rgb)
        assert path.read_bytes() == encode_ppm(rgb)
