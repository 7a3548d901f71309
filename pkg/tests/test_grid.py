import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zorder.grid import TokenGrid, coord, downsample_mask, rasterize_box, token_index, tokens_in_box
from zorder.layout import BoundingBox, PixelMask

G8 = TokenGrid(8, 8)


class TestCoord:
    def test_origin(self):
        assert coord(0, TokenGrid(3, 5)) == (0, 0)

    def test_last_token(self):
        grid = TokenGrid(4, 7)
        assert coord(grid.length - 1, grid) == (3, 6)

    def test_example_18_on_8x8(self):
        assert coord(18, G8) == (2, 2)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            coord(64, G8)
        with pytest.raises(IndexError):
            coord(-1, G8)

    @given(st.integers(1, 9), st.integers(1, 9), st.data())
    def test_inverse_of_flattening(self, h, w, data):
        grid = TokenGrid(h, w)
        u = data.draw(st.integers(0, grid.length - 1))
        row, col = coord(u, grid)
        assert token_index(row, col, grid) == u


class TestTokensInBox:
    def test_full_cover(self):
        assert tokens_in_box(BoundingBox(0, 0, 1, 1), G8).tolist() == list(range(64))

    def test_quarter_box_example(self):
        got = tokens_in_box(BoundingBox(0.25, 0.25, 0.5, 0.5), G8)
        assert got.tolist() == [18, 19, 26, 27]

    def test_sliver_covers_nothing(self):
        assert tokens_in_box(BoundingBox(0.01, 0.01, 0.02, 0.02), G8).size == 0

    def test_ascending_order(self):
        got = tokens_in_box(BoundingBox(0.1, 0.1, 0.9, 0.9), G8)
        assert np.all(np.diff(got) > 0)

    @given(
        st.tuples(st.floats(0, 0.45), st.floats(0, 0.45), st.floats(0.5, 1), st.floats(0.5, 1))
    )
    def test_nested_boxes_are_monotone(self, coords):
        x0, y0, x1, y1 = coords
        inner = BoundingBox(x0 + 0.05, y0 + 0.05, x1 - 0.05, y1 - 0.05)
        outer = BoundingBox(x0, y0, x1, y1)
        assert set(tokens_in_box(inner, G8)) <= set(tokens_in_box(outer, G8))


class TestRasterizeBox:
    def test_full_box_all_ones(self):
        assert rasterize_box(BoundingBox(0, 0, 1, 1), G8).count() == 64

    def test_sliver_all_zeros(self):
        assert rasterize_box(BoundingBox(0.01, 0.01, 0.02, 0.02), G8).count() == 0

    def test_quarter_box_bits(self):
        mask = rasterize_box(BoundingBox(0.25, 0.25, 0.5, 0.5), G8)
        assert np.flatnonzero(mask.bits).tolist() == [18, 19, 26, 27]

    @given(
        st.tuples(st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.05, 1), st.floats(0.05, 1))
    )
    def test_popcount_matches_index_list(self, coords):
        x0, y0, dx, dy = coords
        box = BoundingBox(x0, y0, min(x0 + dx, 1.0), min(y0 + dy, 1.0))
        if box.x_min >= box.x_max or box.y_min >= box.y_max:
            return
        assert rasterize_box(box, G8).count() == tokens_in_box(box, G8).size


class TestDownsampleMask:
    def test_all_ones(self):
        mask = PixelMask(32, 32, np.ones((32, 32), dtype=bool))
        assert downsample_mask(mask, G8).count() == 64

    def test_all_zeros(self):
        mask = PixelMask.zeros(32, 32)
        assert downsample_mask(mask, G8).count() == 0

    def test_exact_tie_sets_token(self):
        # 2x2 pixels per token, exactly 2 of 4 set.
        bits = np.zeros((4, 4), dtype=bool)
        bits[0, 0] = bits[0, 1] = True  # token (0, 0) gets 2 of its 4 pixels
        mask = PixelMask(4, 4, bits)
        token = downsample_mask(mask, TokenGrid(2, 2))
        assert token.to_grid()[0, 0]
        assert token.count() == 1

    def test_minority_unset(self):
        bits = np.zeros((4, 4), dtype=bool)
        bits[0, 0] = True  # 1 of 4 pixels
        token = downsample_mask(PixelMask(4, 4, bits), TokenGrid(2, 2))
        assert token.count() == 0

    def test_non_divisible_dimensions(self):
        # 5x5 pixels on a 2x2 grid: cell (0, 0) covers the 3x3 top-left block.
        bits = np.zeros((5, 5), dtype=bool)
        bits[:3, :3] = True
        token = downsample_mask(PixelMask(5, 5, bits), TokenGrid(2, 2))
        assert token.to_grid().tolist() == [[True, False], [False, False]]
