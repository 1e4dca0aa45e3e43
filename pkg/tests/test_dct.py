"""DCT checks against the direct O(N^4) definition."""

import numpy as np
import pytest

from korol.dct import FREQUENCY, SPATIAL, dct2, idct2, make_input_stack


def direct_dct2(x):
    """Orthonormal DCT-II straight from the definition; quartic cost."""
    H, W = x.shape
    out = np.zeros((H, W))
    for k in range(H):
        for l in range(W):
            s = 0.0
            for r in range(H):
                for c in range(W):
                    s += (
                        x[r, c]
                        * np.cos(np.pi * k * (2 * r + 1) / (2 * H))
                        * np.cos(np.pi * l * (2 * c + 1) / (2 * W))
                    )
            ak = np.sqrt(1.0 / H) if k == 0 else np.sqrt(2.0 / H)
            al = np.sqrt(1.0 / W) if l == 0 else np.sqrt(2.0 / W)
            out[k, l] = ak * al * s
    return out


class TestDct2:
    def test_constant_image_single_coefficient(self):
        coeffs = dct2(np.ones((32, 32)))
        assert abs(coeffs[0, 0] - 32.0) < 1e-12
        coeffs[0, 0] = 0.0
        assert np.max(np.abs(coeffs)) < 1e-12

    @pytest.mark.parametrize("shape", [(1, 1), (4, 4), (8, 5), (16, 16)])
    def test_matches_direct_definition(self, shape):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, shape)
        np.testing.assert_allclose(dct2(x), direct_dct2(x), atol=1e-10)

    def test_parseval(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 1, (32, 32))
        sx, sc = np.sum(x * x), np.sum(dct2(x) ** 2)
        assert abs(sx - sc) / sx < 1e-9

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal((2, 12, 12))
        lhs = dct2(2.5 * x - 0.3 * y)
        rhs = 2.5 * dct2(x) - 0.3 * dct2(y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestIdct2:
    def test_zero(self):
        assert not idct2(np.zeros((8, 8))).any()

    def test_delta_inverts_constant(self):
        coeffs = np.zeros((32, 32))
        coeffs[0, 0] = 32.0
        np.testing.assert_allclose(idct2(coeffs), np.ones((32, 32)), atol=1e-12)

    def test_roundtrip(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, (32, 32))
        assert np.max(np.abs(idct2(dct2(x)) - x)) < 1e-9


class TestMakeInputStack:
    def test_flag_off_identity(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, (2, 32, 32))
        stack = make_input_stack(img, use_frequency=False)
        np.testing.assert_array_equal(stack.channels, img)
        assert stack.tags == (SPATIAL, SPATIAL)

    def test_flag_on_doubles_channels(self):
        img = np.zeros((1, 32, 32))
        stack = make_input_stack(img, use_frequency=True)
        assert stack.channels.shape == (2, 32, 32)
        assert stack.tags == (SPATIAL, FREQUENCY)

    def test_constant_image_single_nonzero_frequency_entry(self):
        stack = make_input_stack(np.ones((1, 32, 32)), use_frequency=True)
        freq = stack.channels[1]
        assert abs(freq[0, 0] - 1.0) < 1e-12  # 32.0 / sqrt(32*32)
        assert np.count_nonzero(np.abs(freq) > 1e-12) == 1
