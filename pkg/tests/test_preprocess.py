import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_volume
from liverseg.preprocess import (
    AugmentParams,
    augment,
    equalize_volume,
    hist_equalize_slice,
    hu_window,
)
from liverseg.volume import Volume3D


class TestWindow:
    def test_clamps_above(self, rng):
        vol = Volume3D(np.full((1, 1, 1), 1000, dtype=np.int16), (1, 1, 1))
        assert hu_window(vol).data[0, 0, 0] == 400

    def test_clamps_below(self):
        vol = Volume3D(np.full((1, 1, 1), -200, dtype=np.int16), (1, 1, 1))
        assert hu_window(vol).data[0, 0, 0] == -100

    def test_interior_fixed(self):
        vol = Volume3D(np.full((1, 1, 1), 250, dtype=np.int16), (1, 1, 1))
        assert hu_window(vol).data[0, 0, 0] == 250

    def test_bad_bounds(self, rng):
        with pytest.raises(ValueError):
            hu_window(random_volume(rng), 400, -100)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_idempotent(self, seed):
        r = np.random.default_rng(seed)
        vol = Volume3D(r.integers(-2000, 2000, (3, 4, 4)).astype(np.int16), (1, 1, 1))
        once = hu_window(vol)
        twice = hu_window(once)
        assert np.array_equal(once.data, twice.data)


class TestEqualize:
    def test_constant_slice_maps_to_lo(self):
        out = hist_equalize_slice(np.full((4, 4), 137.0), value_range=(-100, 400))
        assert np.allclose(out, -100.0)

    def test_two_value_slice_preserved(self):
        s = np.array([[-100.0, 400.0]] * 8)
        out = hist_equalize_slice(s, value_range=(-100, 400))
        assert np.allclose(out, s)

    def test_uniform_histogram_close_to_identity(self):
        bins = 256
        lo, hi = -100.0, 400.0
        width = (hi - lo) / bins
        # one sample per bin centre -> perfectly uniform histogram
        s = (lo + (np.arange(bins) + 0.5) * width).reshape(16, 16)
        out = hist_equalize_slice(s, bins=bins, value_range=(lo, hi))
        assert np.max(np.abs(out - s)) <= width

    def test_output_in_range_and_monotone(self, rng):
        s = rng.uniform(-100, 400, (12, 12))
        out = hist_equalize_slice(s, value_range=(-100, 400))
        assert out.min() >= -100 and out.max() <= 400
        order = np.argsort(s.ravel())
        assert np.all(np.diff(out.ravel()[order]) >= -1e-6)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), bins=st.integers(2, 64))
    def test_monotone_property(self, seed, bins):
        r = np.random.default_rng(seed)
        s = r.uniform(0, 100, (6, 7))
        out = hist_equalize_slice(s, bins=bins, value_range=(0, 100))
        a = s.ravel()
        b = out.ravel()
        idx = np.argsort(a, kind="stable")
        assert np.all(np.diff(b[idx]) >= -1e-9)

    def test_empty_slice(self):
        with pytest.raises(ValueError, match="empty"):
            hist_equalize_slice(np.zeros((0, 3)))

    def test_degenerate_range(self):
        with pytest.raises(ValueError, match="range"):
            hist_equalize_slice(np.zeros((2, 2)), value_range=(5, 5))

    def test_volume_wrapper(self, rng):
        vol = Volume3D(rng.uniform(-100, 400, (3, 8, 8)).astype(np.float32), (1, 1, 1))
        out = equalize_volume(vol)
        assert out.dims == vol.dims
        for z in range(3):
            assert np.allclose(out.data[z], hist_equalize_slice(vol.data[z]))


class TestAugment:
    def setup_method(self):
        r = np.random.default_rng(42)
        self.img = r.uniform(-100, 400, (16, 16)).astype(np.float32)
        self.lab = (r.random((16, 16)) > 0.6).astype(np.uint8)

    def test_all_zero_params_identity(self):
        p = AugmentParams(0, 0.0, 0.0, seed=1)
        img, lab = augment(self.img, self.lab, p)
        assert np.array_equal(img, self.img)
        assert np.array_equal(lab, self.lab)

    def test_same_seed_bit_identical(self):
        p = AugmentParams(3, 8.0, 5.0, seed=99)
        a = augment(self.img, self.lab, p)
        b = augment(self.img, self.lab, p)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_pure_translation_shifts_pixels(self):
        # seed 26 draws (dx, dy) = (+2, 0) for max_shift_vox=2
        p = AugmentParams(max_shift_vox=2, max_rot_deg=0.0, noise_sigma=0.0, seed=26)
        img, lab = augment(self.img, self.lab, p)
        h, w = self.img.shape
        for y in range(h):
            for x in range(2, w):
                assert img[y, x] == self.img[y, x - 2]
                assert lab[y, x] == self.lab[y, x - 2]
        # border clamp repeats the edge column
        assert np.all(img[:, 0] == self.img[:, 0])

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            augment(self.img, self.lab[:4], AugmentParams(seed=0))

    def test_no_new_labels(self):
        for seed in range(8):
            p = AugmentParams(4, 15.0, 0.0, seed=seed)
            _, lab = augment(self.img, self.lab, p)
            assert set(np.unique(lab)) <= set(np.unique(self.lab))

    def test_translation_preserves_interior_multiset(self):
        # integer translations with zero noise only drop/duplicate border rows
        p = AugmentParams(max_shift_vox=2, max_rot_deg=0.0, noise_sigma=0.0, seed=26)
        img, _ = augment(self.img, self.lab, p)
        assert np.array_equal(np.sort(img[:, 2:].ravel()),
                              np.sort(self.img[:, :-2].ravel()))

    def test_labels_get_no_noise(self):
        p = AugmentParams(0, 0.0, 25.0, seed=5)
        img, lab = augment(self.img, self.lab, p)
        assert not np.array_equal(img, self.img)
        assert np.array_equal(lab, self.lab)
