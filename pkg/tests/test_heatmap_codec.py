import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatpose.heatmap_codec import (
    EncodeConfig,
    combined_loss,
    encode_all_zero,
    encode_gaussian,
    flip_fuse_ssp,
    gaussian_filter,
    gaussian_kernel1d,
    mse_loss,
    subpixel_shift,
    unflip,
)
from heatpose.model import DimensionError, Pose
from heatpose.subpixel import DecodeOptions, Refinement, decode_stack
from heatpose.synthetic import gaussian_channel


def encode_oracle(x, y, h, w, sigma, peak=1.0):
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            d2 = (j - x) ** 2 + (i - y) ** 2
            if d2 <= (3 * sigma) ** 2:
                out[i, j] = peak * math.exp(-d2 / (2 * sigma * sigma))
    return out


def filter_oracle(z, sigma):
    # direct 2D correlation with clamped (replicated) indices
    r = math.ceil(3 * sigma)
    taps = {(u, v): math.exp(-(u * u + v * v) / (2 * sigma * sigma))
            for u in range(-r, r + 1) for v in range(-r, r + 1)}
    norm = sum(taps.values())
    h, w = z.shape
    out = np.zeros_like(z)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for (u, v), t in taps.items():
                acc += t * z[min(max(i + u, 0), h - 1), min(max(j + v, 0), w - 1)]
            out[i, j] = acc / norm
    return out


def single(x, y, vis=2):
    return Pose(xy=[[x, y]], visibility=[vis])


class TestEncode:
    def test_pixel_centre(self):
        out = encode_gaussian(single(40.0, 28.0), EncodeConfig(sigma=2.0, stride=4.0), (1, 16, 16))
        assert out[0, 7, 10] == 1.0
        assert out[0, 7, 11] == pytest.approx(math.exp(-1 / 8), rel=1e-12)
        assert out[0, 7, 10] == out.max()

    def test_unlabeled_channel_is_zero(self):
        out = encode_gaussian(single(40.0, 28.0, vis=0), EncodeConfig(), (1, 16, 16))
        assert not out.any()

    def test_subpixel_matches_loop(self):
        cfg = EncodeConfig(sigma=2.0, stride=1.0)
        out = encode_gaussian(single(10.3, 7.6), cfg, (1, 20, 24))
        ref = encode_oracle(10.3, 7.6, 20, 24, 2.0)
        np.testing.assert_allclose(out[0], ref, rtol=1e-12, atol=0)
        assert out.sum() == pytest.approx(ref.sum(), rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-5, 30), st.floats(-5, 25), st.floats(0.5, 4), st.floats(0.1, 5))
    def test_range_and_support(self, x, y, sigma, peak):
        cfg = EncodeConfig(sigma=sigma, stride=1.0, peak_value=peak)
        out = encode_gaussian(single(x, y), cfg, (1, 20, 24))[0]
        assert out.min() >= 0 and out.max() <= peak
        ii, jj = np.mgrid[0:20, 0:24]
        outside = (jj - x) ** 2 + (ii - y) ** 2 > (3 * sigma) ** 2
        assert not out[outside].any()

    def test_wrong_keypoint_count(self):
        with pytest.raises(DimensionError):
            encode_gaussian(single(1, 1), EncodeConfig(), (2, 8, 8))

    @pytest.mark.parametrize("dims", [(17, 64, 48), (1, 1, 1)])
    def test_all_zero(self, dims):
        z = encode_all_zero(dims)
        assert z.shape == dims and z.sum() == 0
        assert mse_loss(z, z) == 0


class TestLosses:
    def test_examples(self):
        assert mse_loss(np.ones((1, 2, 2)), np.ones((1, 2, 2))) == 0
        assert mse_loss(np.ones((2, 3, 3)), np.zeros((2, 3, 3))) == 1.0

    def test_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
        acc = 0.0
        for c in range(3):
            for i in range(4):
                for j in range(5):
                    acc += (a[c, i, j] - b[c, i, j]) ** 2
        assert mse_loss(a, b) == pytest.approx(acc / 60, rel=1e-12)

    def test_symmetric_nonnegative(self, rng):
        a, b = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6))
        assert mse_loss(a, b) == mse_loss(b, a) >= 0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))

    def test_combined(self):
        assert combined_loss(0.3, 0.0, 5.0) == 0.3
        assert combined_loss(0.2, 0.4, 0.5) == pytest.approx(0.4)
        assert combined_loss(0.7, 0.7, 2.0) == pytest.approx(0.7 * 3)
        with pytest.raises(ValueError):
            combined_loss(0.1, 0.1, -1.0)


class TestGaussianFilter:
    def test_kernel_normalized(self):
        k = gaussian_kernel1d(1.3)
        assert len(k) == 2 * math.ceil(3.9) + 1
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(k, k[::-1], rtol=0, atol=0)

    def test_constant_preserved(self):
        z = np.full((2, 9, 7), 0.37)
        np.testing.assert_allclose(gaussian_filter(z, 1.5), z, atol=1e-12)

    def test_impulse_gives_kernel(self):
        z = np.zeros((1, 15, 15))
        z[0, 7, 7] = 1.0
        out = gaussian_filter(z, 1.0)[0]
        r = 3
        table = np.array([[math.exp(-(u * u + v * v) / 2) for v in range(-r, r + 1)] for u in range(-r, r + 1)])
        table /= table.sum()
        np.testing.assert_allclose(out[4:11, 4:11], table, atol=1e-12)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_brute_force(self, rng):
        z = rng.uniform(size=(1, 7, 9))
        np.testing.assert_allclose(gaussian_filter(z, 0.8)[0], filter_oracle(z[0], 0.8), atol=1e-12)

    def test_float32_kept(self, rng):
        z = rng.uniform(size=(2, 8, 8)).astype(np.float32)
        out = gaussian_filter(z, 1.0)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out, gaussian_filter(z.astype(np.float64), 1.0), atol=1e-6)

    def test_symmetric_peak_stays(self):
        z = gaussian_channel(21, 21, 10, 10, 2.0)[None]
        out = gaussian_filter(z, 1.0)
        assert np.unravel_index(out[0].argmax(), out[0].shape) == (10, 10)


class TestFlipFusion:
    def test_unflip_involution(self, coco, rng):
        h = rng.uniform(size=(17, 4, 5))
        np.testing.assert_array_equal(unflip(unflip(h, coco), coco), h)
        np.testing.assert_array_equal(unflip(h, coco)[5], h[6, :, ::-1])

    def test_shift_one_is_column_shift(self, rng):
        h = rng.uniform(size=(2, 3, 6))
        out = subpixel_shift(h, 1.0)
        for j in range(6):
            np.testing.assert_array_equal(out[..., j], h[..., max(j - 1, 0)])

    def test_shift_zero_is_identity(self, rng):
        h = rng.uniform(size=(2, 3, 6))
        np.testing.assert_array_equal(subpixel_shift(h, 0.0), h)

    def test_self_fusion(self, coco, rng):
        h = rng.uniform(size=(17, 6, 5))
        hf = h[coco.flip_permutation(), :, ::-1]
        np.testing.assert_allclose(flip_fuse_ssp(h, hf, 0.0, coco), h, atol=1e-15)

    def test_bad_inputs(self, coco):
        h = np.zeros((17, 4, 4))
        with pytest.raises(ValueError):
            flip_fuse_ssp(h, h, 1.5, coco)
        with pytest.raises(DimensionError):
            flip_fuse_ssp(h, np.zeros((17, 4, 5)), 0.5, coco)

    @pytest.mark.parametrize("offset", [0.5, 1.0])
    def test_best_shift_equals_offset(self, toy3, offset):
        # the un-mirrored flipped map sits `offset` px left of the true peak
        cx, cy, sigma = 12.3, 9.0, 2.0
        h = np.stack([gaussian_channel(20, 28, cx, cy, sigma)] * 3)
        g = np.stack([gaussian_channel(20, 28, cx - offset, cy, sigma)] * 3)
        hf = g[toy3.flip_permutation(), :, ::-1]
        opts = DecodeOptions(refinement=Refinement.PARABOLA, stride=1.0)
        grid = np.linspace(0, 1, 21)
        errs = []
        for s in grid:
            xy, _ = decode_stack(flip_fuse_ssp(h, hf, s, toy3), opts)
            errs.append(abs(xy[0, 0] - cx))
        errs = np.array(errs)
        assert abs(grid[errs.argmin()] - offset) <= 0.05 + 1e-12
        assert errs[np.isclose(grid, offset)][0] <= errs[0]
