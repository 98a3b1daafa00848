import numpy as np
import pytest

from stereo3dkit.disparity_bm import (
    DisparityMap,
    block_match,
    downsample_disparity,
    load_disparity_png16,
    save_disparity_png16,
)


def shifted_pair(seed, h, w, shift):
    """Random texture viewed through two windows `shift` columns apart."""
    rng = np.random.default_rng(seed)
    tex = rng.uniform(0.0, 255.0, (h, w + shift))
    return tex[:, :w].copy(), tex[:, shift:].copy()


class TestBlockMatch:
    def test_identity_pair_zero_disparity(self):
        left, _ = shifted_pair(0, 40, 80, 0)
        dm = block_match(left, left, block=9, max_disp=16)
        assert np.all(dm.disp[dm.valid] == 0.0)
        r = 9 // 2
        assert dm.valid[r:-r, r + 16:-r].mean() > 0.95

    def test_uniform_shift_recovered_exactly(self):
        left, right = shifted_pair(1, 48, 96, 5)
        dm = block_match(left, right, block=9, max_disp=16)
        r = 9 // 2
        inner = (slice(r, -r), slice(r + 16, -r))
        assert dm.valid[inner].all()
        assert np.all(dm.disp[inner] == 5.0)

    def test_integer_mode_yields_integer_values(self):
        left, right = shifted_pair(2, 32, 64, 3)
        dm = block_match(left, right, block=7, max_disp=8)
        assert np.all(dm.disp[dm.valid] == np.round(dm.disp[dm.valid]))

    def test_subpixel_stays_near_true_shift(self):
        left, right = shifted_pair(3, 48, 96, 5)
        dm = block_match(left, right, block=9, max_disp=16, subpixel=True)
        r = 9 // 2
        inner = (slice(r, -r), slice(r + 16, -r))
        assert dm.valid[inner].all()
        assert np.abs(dm.disp[inner] - 5.0).max() <= 0.5

    def test_textureless_input_all_invalid(self):
        flat = np.full((32, 48), 7.0)
        dm = block_match(flat, flat, block=5, max_disp=8)
        assert not dm.valid.any()

    def test_huge_texture_ratio_rejects_everything(self):
        left, right = shifted_pair(4, 32, 64, 2)
        dm = block_match(left, right, block=7, max_disp=8,
                         texture_ratio=1000.0)
        assert not dm.valid.any()

    def test_periodic_pattern_ties_pick_smallest(self):
        # identical images with period-4 stripes: 0, 4, 8 all match equally
        stripe = np.tile(np.array([0.0, 255.0, 0.0, 128.0]), (24, 10))
        dm = block_match(stripe, stripe, block=5, max_disp=12)
        assert dm.valid.any()
        assert np.all(dm.disp[dm.valid] == 0.0)

    def test_flip_swap_recovers_right_view_disparity(self):
        # the same rig seen mirrored: right image becomes the reference
        left, right = shifted_pair(5, 48, 96, 5)
        fwd = block_match(left, right, block=9, max_disp=16)
        rev = block_match(np.fliplr(right), np.fliplr(left), block=9,
                          max_disp=16)
        flipped = np.fliplr(rev.disp)
        r = 9 // 2
        inner = (slice(r, -r), slice(r + 16, 96 - r - 16))
        assert np.all(fwd.disp[inner] == 5.0)
        assert np.all(flipped[inner] == 5.0)

    def test_lr_tolerance_gates_validity(self):
        left, right = shifted_pair(6, 40, 80, 4)
        loose = block_match(left, right, block=9, max_disp=8, lr_tolerance=2.0)
        tight = block_match(left, right, block=9, max_disp=8, lr_tolerance=0.0)
        assert tight.valid.sum() <= loose.valid.sum()

    def test_max_disp_caps_search(self):
        left, right = shifted_pair(7, 48, 96, 5)
        dm = block_match(left, right, block=9, max_disp=3)
        assert not (dm.disp[dm.valid] > 3).any()

    def test_even_block_rejected(self):
        left, right = shifted_pair(8, 16, 32, 0)
        with pytest.raises(ValueError, match="odd"):
            block_match(left, right, block=4)

    def test_shape_mismatch_rejected(self):
        left, right = shifted_pair(9, 16, 32, 0)
        with pytest.raises(ValueError):
            block_match(left, right[:, :-1])

    def test_negative_max_disp_rejected(self):
        left, right = shifted_pair(10, 16, 32, 0)
        with pytest.raises(ValueError):
            block_match(left, right, max_disp=-1)

    def test_image_smaller_than_block_rejected(self):
        left, right = shifted_pair(11, 5, 5, 0)
        with pytest.raises(ValueError):
            block_match(left, right, block=9)


class TestDisparityMap:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            DisparityMap(np.ones((3, 3)), np.ones((2, 3), bool), 1)


class TestDownsample:
    def test_masked_median_per_block(self):
        disp = np.arange(16, dtype=float).reshape(4, 4)
        valid = np.ones((4, 4), bool)
        valid[0, 0] = False
        ds = downsample_disparity(DisparityMap(disp, valid, scale=1), factor=2)
        # top-left block keeps {1, 4, 5}: median 4, then scaled by the factor
        assert ds.disp.tolist() == [[2.0, 2.25], [5.25, 6.25]]
        assert ds.valid.all()
        assert ds.scale == 2

    def test_all_invalid_block_stays_invalid(self):
        dm = DisparityMap(np.ones((4, 4)), np.zeros((4, 4), bool), scale=1)
        ds = downsample_disparity(dm, 2)
        assert not ds.valid.any()
        assert np.all(ds.disp == 0.0)

    def test_scale_accumulates(self):
        dm = DisparityMap(np.full((8, 8), 4.0), np.ones((8, 8), bool), scale=2)
        ds = downsample_disparity(dm, 4)
        assert ds.scale == 8
        assert np.all(ds.disp == 1.0)

    def test_indivisible_dims_rejected(self):
        dm = DisparityMap(np.ones((5, 4)), np.ones((5, 4), bool), scale=1)
        with pytest.raises(ValueError, match="factor"):
            downsample_disparity(dm, 2)


class TestPng16:
    def test_round_trip_quantization(self, tmp_path):
        rng = np.random.default_rng(12)
        disp = rng.uniform(0.5, 100.0, (20, 30))
        valid = rng.random((20, 30)) < 0.8
        dm = DisparityMap(disp, valid, scale=4)
        p = tmp_path / "d.png"
        save_disparity_png16(dm, p)
        back = load_disparity_png16(p, scale=4)
        assert back.scale == 4
        assert np.array_equal(back.valid, valid)
        assert np.abs(back.disp[valid] - disp[valid]).max() <= 0.5 / 256

    def test_invalid_stored_as_zero(self, tmp_path):
        from PIL import Image

        dm = DisparityMap(np.array([[3.0, 9.0]]),
                          np.array([[False, True]]), scale=1)
        p = tmp_path / "d.png"
        save_disparity_png16(dm, p)
        raw = np.asarray(Image.open(p))
        assert raw.dtype == np.uint16
        assert raw[0, 0] == 0
        assert raw[0, 1] == 9 * 256

    def test_valid_zero_kept_distinct_from_invalid(self, tmp_path):
        dm = DisparityMap(np.array([[0.0, 0.0]]),
                          np.array([[True, False]]), scale=1)
        p = tmp_path / "d.png"
        save_disparity_png16(dm, p)
        back = load_disparity_png16(p)
        assert back.valid.tolist() == [[True, False]]
        assert back.disp[0, 0] <= 1.0 / 256

    def test_overflow_clamps_to_uint16(self, tmp_path):
        from PIL import Image

        dm = DisparityMap(np.full((2, 2), 300.0), np.ones((2, 2), bool),
                          scale=1)
        p = tmp_path / "d.png"
        save_disparity_png16(dm, p)
        assert np.asarray(Image.open(p)).max() == 65535
