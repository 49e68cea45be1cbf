import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geotransfer.imagemask import (
    AffineTransform,
    BinaryMask,
    EmptyRegionError,
    Image,
    apply_transform,
    boundary_ring,
    complement,
    dilate,
    read_image,
    read_mask,
    resize_mask_to,
    write_image,
    write_mask,
)
from helpers import block_mask
from oracles import block_average, brute_dilate

masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)).map(BinaryMask)


class TestTypes:
    def test_image_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            Image(np.full((2, 2, 3), 1.5))

    def test_image_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            Image(np.zeros((4, 4)))

    def test_image_is_read_only_copy(self):
        arr = np.zeros((2, 2, 3))
        img = Image(arr)
        arr[0, 0, 0] = 1.0
        assert img.pixels[0, 0, 0] == 0.0
        with pytest.raises(ValueError):
            img.pixels[0, 0, 0] = 1.0

    def test_mask_rejects_non_binary(self):
        with pytest.raises(ValueError):
            BinaryMask(np.array([[0, 2]]))

    def test_mask_from_bool(self):
        assert BinaryMask(np.array([[True, False]])).bits.tolist() == [[1, 0]]

    def test_transform_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            AffineTransform(scale=0.0)


class TestDilate:
    def test_empty_stays_empty(self):
        assert dilate(BinaryMask.zeros(20, 20), 5) == BinaryMask.zeros(20, 20)

    def test_radius_zero_is_identity(self, rng):
        m = BinaryMask(rng.random((9, 7)) < 0.3)
        assert dilate(m, 0) == m

    def test_single_pixel_radius_one(self):
        bits = np.zeros((20, 20), dtype=np.uint8)
        bits[10, 10] = 1
        expected = brute_dilate(bits, 1)
        assert expected.sum() == 9 and expected[9:12, 9:12].all()
        assert np.array_equal(dilate(BinaryMask(bits), 1).bits, expected)

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            dilate(BinaryMask.zeros(3, 3), -1)

    @given(masks, st.integers(0, 4))
    @settings(max_examples=60, deadline=None)
    def test_matches_brute_force(self, m, r):
        assert np.array_equal(dilate(m, r).bits, brute_dilate(m.bits, r))

    @given(masks, st.integers(0, 3), st.integers(0, 3))
    @settings(max_examples=60, deadline=None)
    def test_extensive_increasing_and_additive(self, m, a, b):
        da = dilate(m, a)
        assert np.all(da.bits >= m.bits)
        assert np.all(dilate(m, a + 1).bits >= da.bits)
        assert dilate(da, b) == dilate(m, a + b)


class TestComplementAndRing:
    def test_all_ones(self):
        assert complement(BinaryMask.ones(3, 4)) == BinaryMask.zeros(3, 4)

    @given(masks)
    def test_involution(self, m):
        assert complement(complement(m)) == m

    def test_checkerboard(self):
        board = np.indices((6, 6)).sum(axis=0) % 2
        expected = np.array([[1 - board[y, x] for x in range(6)] for y in range(6)])
        assert np.array_equal(complement(BinaryMask(board)).bits, expected)

    def test_perimeter_ring(self):
        m = block_mask(16, 16, 6, 6, 4)
        ring = boundary_ring(m, 1)
        expected = brute_dilate(m.bits, 1) & (1 - m.bits)
        assert expected.sum() == 20
        assert np.array_equal(ring.bits, expected)

    def test_full_mask_has_no_ring(self):
        with pytest.raises(EmptyRegionError):
            boundary_ring(BinaryMask.ones(8, 8), 2)

    def test_empty_mask_has_no_ring(self):
        with pytest.raises(EmptyRegionError):
            boundary_ring(BinaryMask.zeros(8, 8), 2)

    @given(masks, st.integers(1, 3))
    def test_ring_disjoint_from_mask(self, m, r):
        try:
            ring = boundary_ring(m, r)
        except EmptyRegionError:
            return
        assert not np.any(ring.bits & m.bits)


class TestApplyTransform:
    def test_identity_is_bit_exact(self, rng):
        img = Image(rng.random((16, 16, 3)))
        m = BinaryMask(rng.random((16, 16)) < 0.5)
        patch, m2 = apply_transform(img, m, AffineTransform())
        assert m2 == m
        assert np.array_equal(patch.pixels, img.pixels * m.bits[..., None])

    def test_shift_right(self, rng):
        img = Image(rng.random((24, 24, 3)))
        m = block_mask(24, 24, 4, 4, 6)
        patch, m2 = apply_transform(img, m, AffineTransform(dx=8))
        # coordinate map: target (y, x) reads source (y, x - 8)
        expected = np.zeros((24, 24), dtype=np.uint8)
        for y in range(24):
            for x in range(24):
                if 0 <= x - 8 < 24:
                    expected[y, x] = m.bits[y, x - 8]
        assert np.array_equal(m2.bits, expected)
        np.testing.assert_allclose(patch.pixels[4:10, 12:18], img.pixels[4:10, 4:10], atol=1e-12)

    def test_shift_down(self):
        m = block_mask(16, 16, 2, 3, 4)
        _, m2 = apply_transform(Image(np.ones((16, 16, 3))), m, AffineTransform(dy=5))
        assert m2 == block_mask(16, 16, 7, 3, 4)

    def test_scale_two(self):
        m = block_mask(16, 16, 6, 6, 4)
        _, m2 = apply_transform(Image(np.ones((16, 16, 3))), m, AffineTransform(scale=2.0))
        rows = np.flatnonzero(m2.bits.any(axis=1))
        cols = np.flatnonzero(m2.bits.any(axis=0))
        assert abs(len(rows) - 8) <= 1 and abs(len(cols) - 8) <= 1
        assert m2.bits[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].all()

    def test_rotation_quarter_turn(self):
        bits = np.zeros((21, 21), dtype=np.uint8)
        bits[10, 5:16] = 1  # horizontal bar through the centre
        _, m2 = apply_transform(Image(np.ones((21, 21, 3))), BinaryMask(bits), AffineTransform(rotation=90))
        assert m2.bits[5:16, 10].all() and m2.count() == 11

    def test_counter_clockwise_direction(self):
        bits = np.zeros((21, 21), dtype=np.uint8)
        bits[10, 10:16] = 1  # bar pointing right from the centre
        bits[10, 5] = 1
        _, m2 = apply_transform(Image(np.ones((21, 21, 3))), BinaryMask(bits), AffineTransform(rotation=90))
        # the right arm now points up
        assert m2.bits[4:10, 10].sum() >= 5 and m2.bits[11:, 10].sum() <= 1

    def test_off_frame_raises(self):
        m = block_mask(16, 16, 2, 2, 3)
        with pytest.raises(EmptyRegionError):
            apply_transform(Image(np.ones((16, 16, 3))), m, AffineTransform(dx=40))

    def test_off_frame_allowed(self):
        m = block_mask(16, 16, 2, 2, 3)
        patch, m2 = apply_transform(Image(np.ones((16, 16, 3))), m, AffineTransform(dx=40), allow_empty=True)
        assert not m2.any() and not patch.pixels.any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_transform(Image(np.ones((8, 8, 3))), BinaryMask.ones(4, 4), AffineTransform())


class TestResize:
    def test_all_ones(self):
        assert resize_mask_to(BinaryMask.ones(512, 512), 64, 64) == BinaryMask.ones(64, 64)

    @pytest.mark.parametrize("size", [(1, 1), (3, 5), (16, 16), (40, 24)])
    def test_all_zeros(self, size):
        assert resize_mask_to(BinaryMask.zeros(16, 16), *size) == BinaryMask.zeros(*size)

    def test_left_half(self):
        bits = np.zeros((16, 16), dtype=np.uint8)
        bits[:, :8] = 1
        expected = block_average(bits, 4, 4)
        assert expected[:, :2].all() and not expected[:, 2:].any()
        assert np.array_equal(resize_mask_to(BinaryMask(bits), 4, 4).bits, expected)

    def test_ties_go_to_one(self):
        bits = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        assert resize_mask_to(BinaryMask(bits), 1, 1).bits.item() == 1

    @given(arrays(np.uint8, (16, 16), elements=st.integers(0, 1)), st.sampled_from([1, 2, 4, 8, 16]))
    @settings(max_examples=60, deadline=None)
    def test_matches_block_average(self, bits, n):
        assert np.array_equal(resize_mask_to(BinaryMask(bits), n, n).bits, block_average(bits, n, n))

    @given(masks)
    def test_equal_size_identity(self, m):
        assert resize_mask_to(m, *m.shape) == m

    def test_non_integer_ratio_is_binary(self, rng):
        out = resize_mask_to(BinaryMask(rng.random((17, 23)) < 0.5), 5, 7)
        assert set(np.unique(out.bits)) <= {0, 1}


class TestPng:
    def test_image_round_trip(self, tmp_path, rng):
        img = Image(np.round(rng.random((8, 6, 3)) * 255) / 255)
        write_image(img, tmp_path / "a.png")
        back = read_image(tmp_path / "a.png")
        np.testing.assert_allclose(back.pixels, img.pixels, atol=1e-12)

    def test_mask_round_trip_and_threshold(self, tmp_path):
        from PIL import Image as PILImage

        PILImage.fromarray(np.array([[0, 127, 128, 255]], dtype=np.uint8), mode="L").save(tmp_path / "m.png")
        assert read_mask(tmp_path / "m.png").bits.tolist() == [[0, 0, 1, 1]]
        m = BinaryMask(np.array([[1, 0], [0, 1]]))
        write_mask(m, tmp_path / "m2.png")
        assert read_mask(tmp_path / "m2.png") == m
