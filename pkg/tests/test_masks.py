"""Mask operations against brute-force set-arithmetic oracles."""

import numpy as np
import pytest

from latentswap.errors import ConfigError
from latentswap.masks import (
    AnnealSchedule,
    VariableDescriptor,
    anneal,
    as_binary_mask,
    dilate,
    feather,
    fit_to,
    load_binary_mask,
    query_weights,
    save_soft_mask,
    structuring_element,
)
from latentswap.numerics import FLOAT, SeededRng, conv2d, gaussian_kernel, resize_bilinear
from latentswap.pgm import write_pgm


def dilate_oracle(mask, extent):
    """Pixelwise scan: out[i,j] = 1 iff any covered input pixel is 1."""
    m = np.asarray(mask) > 0
    h, w = m.shape
    r = extent // 2
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            hit = False
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy * dy + dx * dx > (r + 0.5) ** 2:
                        continue
                    ii, jj = i + dy, j + dx
                    if 0 <= ii < h and 0 <= jj < w and m[ii, jj]:
                        hit = True
            out[i, j] = hit
    return out.astype(FLOAT)


def random_mask(seed, h, w, p=0.2):
    rng = np.random.Generator(np.random.PCG64(seed))
    m = (rng.random((h, w)) < p).astype(FLOAT)
    m[h // 2, w // 2] = 1.0  # avoid the degenerate all-zero warning
    return m


class TestBinaryMaskLoading:
    def test_load_maps_255_to_one(self, tmp_path):
        img = np.zeros((4, 6), dtype=np.uint8)
        img[1:3, 2:5] = 255
        path = tmp_path / "m.pgm"
        write_pgm(path, img)
        m = load_binary_mask(path)
        assert m.dtype == FLOAT
        assert np.array_equal(m, (img == 255).astype(FLOAT))

    def test_load_rejects_gray_values(self, tmp_path):
        img = np.zeros((4, 4), dtype=np.uint8)
        img[0, 0] = 128
        path = tmp_path / "m.pgm"
        write_pgm(path, img)
        with pytest.raises(ConfigError, match="non-binary"):
            load_binary_mask(path)

    def test_as_binary_rejects_soft_values(self):
        with pytest.raises(ValueError, match="0 and 1"):
            as_binary_mask(np.array([[0.0, 0.5]]))

    @pytest.mark.parametrize("fill", [0.0, 1.0])
    def test_degenerate_mask_warns(self, fill):
        with pytest.warns(UserWarning, match="degenerate"):
            as_binary_mask(np.full((3, 3), fill))

    def test_save_soft_mask_is_16_bit(self, tmp_path):
        path = tmp_path / "s.pgm"
        save_soft_mask(path, np.array([[0.0, 1.0]]))
        assert path.read_bytes().startswith(b"P5\n2 1\n65535\n")


class TestStructuringElement:
    def test_extent_one_is_single_pixel(self):
        assert np.array_equal(structuring_element(1), [[True]])

    def test_extent_three_is_full_square(self):
        # radius 1 + 0.5 covers the diagonal offsets (distance sqrt(2) < 1.5)
        assert structuring_element(3).all()

    def test_extent_five_drops_corners(self):
        elem = structuring_element(5)
        assert elem.shape == (5, 5)
        assert not elem[0, 0] and not elem[0, 4] and not elem[4, 0] and not elem[4, 4]
        assert elem[0, 1] and elem[2, 2]
        # Exhaustive check of the radius rule on every offset.
        r = 2
        for i in range(5):
            for j in range(5):
                inside = (i - r) ** 2 + (j - r) ** 2 <= (r + 0.5) ** 2
                assert elem[i, j] == inside

    def test_rejects_even_or_nonpositive(self):
        for extent in (0, 2, 4, -3):
            with pytest.raises(ValueError):
                structuring_element(extent)


class TestDilate:
    def test_extent_one_is_identity(self):
        m = random_mask(21, 9, 9)
        assert np.array_equal(dilate(m, 1), m)

    def test_center_pixel_extent_three(self):
        m = np.zeros((7, 7), dtype=FLOAT)
        m[3, 3] = 1.0
        out = dilate(m, 3)
        expected = np.zeros((7, 7), dtype=FLOAT)
        expected[2:5, 2:5] = 1.0
        assert np.array_equal(out, expected)

    def test_all_ones_fixed_point(self):
        with pytest.warns(UserWarning):
            out = dilate(np.ones((6, 6), dtype=FLOAT), 5)
        assert np.array_equal(out, np.ones((6, 6), dtype=FLOAT))

    def test_grows_monotonically(self):
        m = random_mask(22, 15, 15)
        d3 = dilate(m, 3)
        d5 = dilate(m, 5)
        assert np.all(d3 >= m)
        assert np.all(d5 >= d3)

    @pytest.mark.parametrize("size", [9, 17, 33])
    @pytest.mark.parametrize("extent", [3, 5, 7])
    def test_matches_brute_force_oracle(self, size, extent):
        m = random_mask(100 + size + extent, size, size, p=0.1)
        assert np.array_equal(dilate(m, extent), dilate_oracle(m, extent))

    def test_rejects_even_extent(self):
        with pytest.raises(ValueError):
            dilate(random_mask(23, 5, 5), 4)


class TestFeather:
    def test_values_in_unit_interval(self):
        soft = feather(random_mask(31, 12, 12))
        assert soft.min() >= 0.0 and soft.max() <= 1.0

    def test_foreground_stays_exactly_one(self):
        m = random_mask(32, 16, 16)
        soft = feather(m)
        assert np.all(soft[m == 1.0] == 1.0)

    def test_all_ones_unchanged(self):
        with pytest.warns(UserWarning):
            soft = feather(np.ones((8, 8), dtype=FLOAT))
        assert np.array_equal(soft, np.ones((8, 8), dtype=FLOAT))

    def test_trivial_parameters_reduce_to_mask(self):
        m = random_mask(33, 10, 10)
        soft = feather(m, extent=1, sigma=1.0, radius=0)
        assert np.array_equal(soft, m)

    def test_matches_composed_oracle(self):
        m = np.zeros((9, 9), dtype=FLOAT)
        m[3:6, 3:6] = 1.0
        soft = feather(m, extent=3, sigma=1.0, radius=2)
        grown = dilate_oracle(m, 3)
        blurred = conv2d(grown, gaussian_kernel(1.0, 2), padding="replicate")
        expected = np.clip(np.where(m == 1.0, 1.0, blurred), 0.0, 1.0).astype(FLOAT)
        np.testing.assert_allclose(soft, expected, atol=1e-6)

    def test_decays_away_from_foreground(self):
        m = np.zeros((21, 21), dtype=FLOAT)
        m[10, 10] = 1.0
        soft = feather(m, extent=3, sigma=1.5, radius=3)
        assert soft[10, 10] == 1.0
        assert soft[10, 13] > soft[10, 16]
        assert soft[0, 0] == 0.0


class TestAnneal:
    def test_ramp_reaches_one_at_k(self):
        sched = AnnealSchedule(k_anneal=30)
        assert sched.ramp(0) == 0.0
        assert sched.ramp(15) == 0.5
        assert sched.ramp(30) == 1.0
        assert sched.ramp(31) == 1.0

    def test_ramp_monotone(self):
        sched = AnnealSchedule(k_anneal=7)
        values = [sched.ramp(t) for t in range(20)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_zero_k_disables(self):
        sched = AnnealSchedule(k_anneal=0)
        m = random_mask(41, 6, 6)
        assert np.array_equal(anneal(m, 0, sched), m)
        assert np.array_equal(anneal(m, 99, sched), m)

    def test_scales_foreground_only(self):
        m = random_mask(42, 8, 8)
        sched = AnnealSchedule(k_anneal=10)
        out = anneal(m, 5, sched)
        np.testing.assert_allclose(out, m * 0.5, atol=1e-7)
        assert np.all(out[m == 0.0] == 0.0)

    def test_rejects_negative_parameters(self):
        with pytest.raises(ValueError):
            AnnealSchedule(k_anneal=-1)
        with pytest.raises(ValueError):
            AnnealSchedule(k_anneal=5).ramp(-1)


class TestFitTo:
    def test_latent_native_resolution_identity(self):
        m = feather(random_mask(51, 12, 10))
        out = fit_to(m, VariableDescriptor("latent", 12, 10))
        assert np.array_equal(out, m)

    def test_latent_resize_matches_bilinear(self):
        m = feather(random_mask(52, 16, 16))
        out = fit_to(m, VariableDescriptor("latent", 8, 8))
        expected = np.clip(resize_bilinear(m, 8, 8), 0.0, 1.0)
        assert np.array_equal(out, expected)

    def test_all_ones_fits_to_all_ones_everywhere(self):
        with pytest.warns(UserWarning):
            m = as_binary_mask(np.ones((8, 8)))
        cases = [
            VariableDescriptor("latent", 4, 4),
            VariableDescriptor("self_map", 4, 4),
            VariableDescriptor("cross_map", 4, 4, cols=5),
            VariableDescriptor("self_out", 4, 4, cols=16),
        ]
        for desc in cases:
            out = fit_to(m, desc)
            assert np.all(out == 1.0), desc.kind

    def test_self_map_rows_are_constant_per_query(self):
        m = feather(random_mask(53, 8, 8))
        out = fit_to(m, VariableDescriptor("self_map", 4, 4))
        assert out.shape == (16, 16)
        col = query_weights(m, VariableDescriptor("self_map", 4, 4))
        for q in range(16):
            assert np.all(out[q] == col[q, 0])

    def test_query_ordering_is_row_major(self):
        m = np.zeros((4, 4), dtype=FLOAT)
        m[1, 2] = 1.0  # row-major flat index 6 at native resolution
        out = fit_to(m, VariableDescriptor("cross_map", 4, 4, cols=3))
        assert out.shape == (16, 3)
        assert np.all(out[6] == 1.0)
        assert out.sum() == 3.0

    def test_cross_and_out_widths(self):
        m = feather(random_mask(54, 8, 8))
        cross = fit_to(m, VariableDescriptor("cross_map", 4, 4, cols=7))
        out = fit_to(m, VariableDescriptor("self_out", 4, 4, cols=32))
        assert cross.shape == (16, 7)
        assert out.shape == (16, 32)
        assert np.array_equal(cross[:, 0], out[:, 0])

    def test_values_clipped_to_unit_interval(self):
        m = feather(random_mask(55, 16, 16))
        for desc in (VariableDescriptor("latent", 6, 6),
                     VariableDescriptor("self_map", 6, 6)):
            out = fit_to(m, desc)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_rejects_bad_descriptors(self):
        with pytest.raises(ValueError):
            VariableDescriptor("texture", 4, 4)
        with pytest.raises(ValueError):
            VariableDescriptor("cross_map", 4, 4)  # missing cols
        with pytest.raises(ValueError):
            VariableDescriptor("latent", 0, 4)
