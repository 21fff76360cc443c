"""Kernel-level tests: frozen hand-derived values, brute-force oracles, invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resfu.ops import (
    ChannelGroupMismatch,
    GroupNormAffine,
    NeighborhoodTensor,
    ShapeMismatch,
    bilinear_resize,
    box_mean,
    gather_neighbors,
    gaussian_smooth3,
    group_normalize,
    grouped_pointwise_conv,
    nearest_resize,
    relu,
    run_row_chunks,
    softmax_rows,
)
from resfu.tensor import FeatureMap


def fm(values, channels_last=True):
    arr = np.asarray(values, np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return FeatureMap(arr)


def rand_map(rng, h, w, c):
    return FeatureMap(rng.standard_normal((h, w, c)).astype(np.float32))


class TestResize:
    def test_bilinear_1x2_to_1x4(self):
        # Half-pixel centers: source coords -0.25, 0.25, 0.75, 1.25 (clamped).
        out = bilinear_resize(fm([[1.0, 3.0]]), 1, 4)
        np.testing.assert_array_equal(out.data[0, :, 0], [1.0, 1.5, 2.5, 3.0])

    def test_nearest_1x2_to_1x4(self):
        out = nearest_resize(fm([[1.0, 3.0]]), 1, 4)
        np.testing.assert_array_equal(out.data[0, :, 0], [1.0, 1.0, 3.0, 3.0])

    def test_identity_resize_is_exact(self):
        src = rand_map(np.random.default_rng(7), 5, 9, 3)
        assert np.array_equal(bilinear_resize(src, 5, 9).data, src.data)
        assert np.array_equal(nearest_resize(src, 5, 9).data, src.data)

    def test_constant_preserved(self):
        src = FeatureMap(np.full((3, 4, 2), 1.6180339, np.float32))
        out = bilinear_resize(src, 12, 16)
        np.testing.assert_allclose(out.data, 1.6180339, rtol=1e-6)

    def test_channel_permutation_commutes(self):
        src = rand_map(np.random.default_rng(8), 4, 6, 5)
        perm = np.array([3, 0, 4, 1, 2])
        a = bilinear_resize(FeatureMap(src.data[:, :, perm]), 9, 13).data
        b = bilinear_resize(src, 9, 13).data[:, :, perm]
        assert np.array_equal(a, b)

    def test_separable_matches_direct_four_corner_blend(self):
        # Oracle: evaluate the definition directly per output pixel.
        rng = np.random.default_rng(9)
        src = rand_map(rng, 4, 5, 2)
        out = bilinear_resize(src, 7, 11)
        a = src.astype64()
        for i in range(7):
            for j in range(11):
                y = min(max((i + 0.5) * 4 / 7 - 0.5, 0.0), 3.0)
                x = min(max((j + 0.5) * 5 / 11 - 0.5, 0.0), 4.0)
                y0, x0 = int(y), int(x)
                y1, x1 = min(y0 + 1, 3), min(x0 + 1, 4)
                ty, tx = y - y0, x - x0
                want = (
                    a[y0, x0] * (1 - ty) * (1 - tx)
                    + a[y0, x1] * (1 - ty) * tx
                    + a[y1, x0] * ty * (1 - tx)
                    + a[y1, x1] * ty * tx
                )
                np.testing.assert_allclose(out.data[i, j], want, atol=1e-5)

    def test_rejects_bad_sizes(self):
        src = fm([[1.0, 2.0]])
        with pytest.raises(ShapeMismatch):
            bilinear_resize(src, 0, 4)
        with pytest.raises(ShapeMismatch):
            nearest_resize(src, 2, -1)


class TestBoxMean:
    def test_3x3_ramp_radius1(self):
        src = fm(np.arange(9, dtype=np.float32).reshape(3, 3))
        out = box_mean(src, 1)
        assert out.data[1, 1, 0] == 4.0  # full window, mean of 0..8
        assert out.data[0, 0, 0] == 2.0  # corner window {0,1,3,4}

    def test_radius_zero_is_identity(self):
        src = rand_map(np.random.default_rng(3), 4, 4, 2)
        assert np.array_equal(box_mean(src, 0).data, src.data)

    def test_huge_radius_gives_global_mean(self):
        src = rand_map(np.random.default_rng(4), 5, 6, 3)
        want = src.astype64().mean(axis=(0, 1))
        out = box_mean(src, 10)
        np.testing.assert_allclose(out.data, np.broadcast_to(want, (5, 6, 3)), rtol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 6), w=st.integers(1, 6), r=st.integers(0, 4), v=st.floats(-100, 100, width=32))
    def test_constant_map_preserved(self, h, w, r, v):
        out = box_mean(FeatureMap(np.full((h, w, 1), v, np.float32)), r)
        np.testing.assert_allclose(out.data, v, rtol=1e-6, atol=1e-6)

    def test_matches_window_loop_oracle(self):
        rng = np.random.default_rng(5)
        src = rand_map(rng, 7, 6, 2)
        out = box_mean(src, 2)
        a = src.astype64()
        for i in range(7):
            for j in range(6):
                win = a[max(i - 2, 0) : i + 3, max(j - 2, 0) : j + 3]
                np.testing.assert_allclose(out.data[i, j], win.mean(axis=(0, 1)), rtol=1e-6)


class TestGaussianSmooth3:
    def test_impulse_response(self):
        # Weights exp(0), exp(-1/2), exp(-1) normalized by their sum.
        s = 1.0 + 4 * math.exp(-0.5) + 4 * math.exp(-1.0)
        imp = np.zeros((5, 5, 1), np.float32)
        imp[2, 2, 0] = 1.0
        out = gaussian_smooth3(FeatureMap(imp))
        np.testing.assert_allclose(out.data[2, 2, 0], 1.0 / s, rtol=1e-6)
        np.testing.assert_allclose(out.data[2, 1, 0], math.exp(-0.5) / s, rtol=1e-6)
        np.testing.assert_allclose(out.data[1, 1, 0], math.exp(-1.0) / s, rtol=1e-6)
        # Spot values, frozen from the definition above.
        assert out.data[2, 2, 0] == pytest.approx(0.2041800, abs=1e-6)
        assert out.data[2, 1, 0] == pytest.approx(0.1238412, abs=1e-6)
        assert out.data[1, 1, 0] == pytest.approx(0.0751135, abs=1e-6)
        assert out.data[0, 0, 0] == 0.0

    def test_constant_preserved(self):
        src = FeatureMap(np.full((4, 5, 3), -2.25, np.float32))
        np.testing.assert_allclose(gaussian_smooth3(src).data, -2.25, rtol=1e-6)

    def test_edge_clamping_via_window_oracle(self):
        rng = np.random.default_rng(11)
        src = rand_map(rng, 4, 4, 1)
        out = gaussian_smooth3(src)
        a = src.astype64()
        s = 1.0 + 4 * math.exp(-0.5) + 4 * math.exp(-1.0)
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        wgt = math.exp(-(di * di + dj * dj) / 2.0) / s
                        acc += wgt * a[min(max(i + di, 0), 3), min(max(j + dj, 0), 3), 0]
                np.testing.assert_allclose(out.data[i, j, 0], acc, rtol=1e-6)


class TestGroupNormalize:
    def test_normalizes_per_group(self):
        rng = np.random.default_rng(21)
        src = rand_map(rng, 6, 5, 8)
        affine = GroupNormAffine(np.ones(8), np.zeros(8), groups=4)
        out = group_normalize(src, affine).astype64().reshape(30, 4, 2)
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2)), 1.0, atol=1e-4)

    def test_affine_applied_per_channel(self):
        rng = np.random.default_rng(22)
        src = rand_map(rng, 4, 4, 4)
        gamma = np.array([1.0, 2.0, 0.5, -1.0], np.float32)
        beta = np.array([0.0, 1.0, -1.0, 0.25], np.float32)
        plain = group_normalize(src, GroupNormAffine(np.ones(4), np.zeros(4), groups=2)).astype64()
        styled = group_normalize(src, GroupNormAffine(gamma, beta, groups=2)).astype64()
        np.testing.assert_allclose(styled, plain * gamma + beta, atol=1e-6)

    def test_groups_are_independent(self):
        rng = np.random.default_rng(23)
        base = rng.standard_normal((5, 5, 6)).astype(np.float32)
        other = base.copy()
        other[:, :, 3:] = rng.standard_normal((5, 5, 3)).astype(np.float32)
        affine = GroupNormAffine(np.ones(6), np.zeros(6), groups=2)
        a = group_normalize(FeatureMap(base), affine).data
        b = group_normalize(FeatureMap(other), affine).data
        assert np.array_equal(a[:, :, :3], b[:, :, :3])

    def test_rejects_bad_groups(self):
        with pytest.raises(ChannelGroupMismatch):
            GroupNormAffine(np.ones(6), np.zeros(6), groups=4)
        src = rand_map(np.random.default_rng(0), 2, 2, 4)
        with pytest.raises(ShapeMismatch):
            group_normalize(src, GroupNormAffine(np.ones(6), np.zeros(6), groups=2))


def dense_conv_oracle(src, weight, bias, groups):
    """Brute-force check model: expand the grouped weight to a dense
    block-diagonal matrix and multiply."""
    c_out, in_per = weight.shape
    c_in = in_per * groups
    dense = np.zeros((c_out, c_in), np.float64)
    for l in range(c_out):
        g = l * groups // c_out
        for d in range(c_in):
            if d * groups // c_in == g:
                dense[l, d] = weight[l, d % in_per]
    flat = src.astype64().reshape(-1, c_in)
    out = flat @ dense.T + np.asarray(bias, np.float64)
    return out.reshape(src.height, src.width, c_out)


class TestGroupedPointwiseConv:
    @pytest.mark.parametrize("groups", [1, 2, 4, 8])
    def test_matches_dense_oracle(self, groups):
        rng = np.random.default_rng(31 + groups)
        c_in, c_out = 16, 8
        src = rand_map(rng, 5, 4, c_in)
        weight = rng.standard_normal((c_out, c_in // groups)).astype(np.float32)
        bias = rng.standard_normal(c_out).astype(np.float32)
        out = grouped_pointwise_conv(src, weight, bias, groups)
        want = dense_conv_oracle(src, weight, bias, groups)
        np.testing.assert_allclose(out.astype64(), want, rtol=1e-6, atol=1e-6)

    def test_single_group_is_plain_matmul(self):
        rng = np.random.default_rng(41)
        src = rand_map(rng, 3, 3, 5)
        weight = rng.standard_normal((2, 5)).astype(np.float32)
        out = grouped_pointwise_conv(src, weight, np.zeros(2, np.float32), 1)
        want = src.astype64() @ weight.astype(np.float64).T
        np.testing.assert_allclose(out.astype64(), want, atol=1e-6)

    def test_rejects_mismatches(self):
        src = rand_map(np.random.default_rng(0), 2, 2, 6)
        w = np.zeros((4, 3), np.float32)
        b = np.zeros(4, np.float32)
        with pytest.raises(ChannelGroupMismatch):
            grouped_pointwise_conv(src, w, b, 3)  # 4 outputs not divisible by 3
        with pytest.raises(ShapeMismatch):
            grouped_pointwise_conv(src, np.zeros((4, 4), np.float32), b, 2)  # implies c_in 8
        with pytest.raises(ShapeMismatch):
            grouped_pointwise_conv(src, w, np.zeros(3, np.float32), 2)


def test_relu():
    out = relu(fm([[-1.0, 0.0], [2.5, -0.0]]))
    np.testing.assert_array_equal(out.data[:, :, 0], [[0.0, 0.0], [2.5, 0.0]])


class TestGatherNeighbors:
    def test_3x3_top_left_corner(self):
        src = fm(np.arange(9, dtype=np.float32).reshape(3, 3))
        got = gather_neighbors(src, 3, 1)
        np.testing.assert_array_equal(got.data[0, :, 0], [0, 0, 1, 0, 0, 1, 3, 3, 4])

    def test_5x5_center_dilation2(self):
        src = fm(np.arange(25, dtype=np.float32).reshape(5, 5))
        got = gather_neighbors(src, 3, 2)
        center = 2 * 5 + 2
        np.testing.assert_array_equal(got.data[center, :, 0], [0, 2, 4, 10, 12, 14, 20, 22, 24])

    @settings(max_examples=25, deadline=None)
    @given(h=st.integers(1, 5), w=st.integers(1, 5), c=st.integers(1, 3), seed=st.integers(0, 999))
    def test_k1_is_identity(self, h, w, c, seed):
        src = rand_map(np.random.default_rng(seed), h, w, c)
        got = gather_neighbors(src, 1, 1)
        assert got.data.shape == (h * w, 1, c)
        assert np.array_equal(got.data[:, 0, :], src.data.reshape(h * w, c))

    def test_interior_matches_plain_slices(self):
        rng = np.random.default_rng(55)
        src = rand_map(rng, 6, 6, 2)
        got = gather_neighbors(src, 3, 1)
        i, j = 3, 2
        flat = i * 6 + j
        n = 0
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                assert np.array_equal(got.data[flat, n], src.data[i + di, j + dj])
                n += 1

    def test_rejects_even_kernel_and_bad_dilation(self):
        src = fm([[1.0]])
        with pytest.raises(ShapeMismatch):
            gather_neighbors(src, 2, 1)
        with pytest.raises(ShapeMismatch):
            gather_neighbors(src, 3, 0)


class TestSoftmaxRows:
    def test_two_slot_example(self):
        scores = FeatureMap(np.array([[[0.0, math.log(2.0)]]], np.float32))
        out = softmax_rows(scores)
        np.testing.assert_allclose(out.data[0, 0], [1 / 3, 2 / 3], rtol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(
        pixels=st.integers(1, 8),
        slots=st.integers(1, 12),
        seed=st.integers(0, 2**16),
        scale=st.floats(0.1, 50.0),
    )
    def test_rows_sum_to_one(self, pixels, slots, seed, scale):
        rng = np.random.default_rng(seed)
        scores = FeatureMap((scale * rng.standard_normal((pixels, 1, slots))).astype(np.float32))
        out = softmax_rows(scores)
        np.testing.assert_allclose(out.astype64().sum(axis=2), 1.0, atol=1e-6)
        assert np.all(out.data >= 0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(77)
        raw = rng.standard_normal((4, 3, 9)).astype(np.float32)
        a = softmax_rows(FeatureMap(raw))
        b = softmax_rows(FeatureMap(raw + np.float32(2.0)))
        np.testing.assert_allclose(a.astype64(), b.astype64(), atol=1e-6)

    def test_extreme_scores_stay_finite(self):
        scores = FeatureMap(np.array([[[500.0, -500.0, 499.0]]], np.float32))
        out = softmax_rows(scores)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.astype64().sum(), 1.0, atol=1e-9)


class TestRowChunks:
    @pytest.mark.parametrize("threads", [1, 3, 8])
    def test_covers_rows_once(self, threads):
        hits = np.zeros(100, np.int64)

        def work(r0, r1):
            hits[r0:r1] += 1

        run_row_chunks(100, threads, work)
        assert np.all(hits == 1)
