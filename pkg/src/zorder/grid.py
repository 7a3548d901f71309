"""Token grid geometry: pixel space, the h x w token grid, and flat indices.

Token u maps to (row, col) = (u // w, u % w); its center sits at
((col + 0.5) / w, (row + 0.5) / h) in normalized image coordinates. Boxes
rasterize by center inclusion over half-open intervals, so shared box edges
never double-count a token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import BoundingBox, PixelMask

__all__ = [
    "TokenGrid",
    "TokenMask",
    "coord",
    "token_index",
    "tokens_in_box",
    "rasterize_box",
    "downsample_mask",
]


@dataclass(frozen=True)
class TokenGrid:
    h: int
    w: int

    def __post_init__(self) -> None:
        if self.h < 1 or self.w < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.h}x{self.w}")

    @property
    def length(self) -> int:
        return self.h * self.w

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Normalized (x, y) center coordinates of every column and row."""
        return (np.arange(self.w) + 0.5) / self.w, (np.arange(self.h) + 0.5) / self.h


@dataclass(frozen=True, eq=False)
class TokenMask:
    """Binary vector over the flattened token grid."""

    grid: TokenGrid
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool).reshape(-1)
        if bits.size != self.grid.length:
            raise ValueError(f"mask has {bits.size} bits, grid expects {self.grid.length}")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def count(self) -> int:
        return int(self.bits.sum())

    def to_grid(self) -> np.ndarray:
        return self.bits.reshape(self.grid.h, self.grid.w)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenMask):
            return NotImplemented
        return self.grid == other.grid and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.grid, self.bits.tobytes()))


def coord(u: int, grid: TokenGrid) -> tuple[int, int]:
    """Map a flat token index to its (row, col) on the grid."""
    if not 0 <= u < grid.length:
        raise IndexError(f"token index {u} out of range for {grid.h}x{grid.w} grid")
    return u // grid.w, u % grid.w


def token_index(row: int, col: int, grid: TokenGrid) -> int:
    """Row-major inverse of :func:`coord`."""
    if not (0 <= row < grid.h and 0 <= col < grid.w):
        raise IndexError(f"({row}, {col}) out of range for {grid.h}x{grid.w} grid")
    return row * grid.w + col


def tokens_in_box(box: BoundingBox, grid: TokenGrid) -> np.ndarray:
    """Ascending flat indices of tokens whose center lies inside the box.

    Inclusion uses [x_min, x_max) x [y_min, y_max); slivers thinner than one
    token may cover nothing.
    """
    cx, cy = grid.centers()
    cols = np.flatnonzero((cx >= box.x_min) & (cx < box.x_max))
    rows = np.flatnonzero((cy >= box.y_min) & (cy < box.y_max))
    if cols.size == 0 or rows.size == 0:
        return np.empty(0, dtype=np.int64)
    return (rows[:, None] * grid.w + cols[None, :]).reshape(-1).astype(np.int64)


def rasterize_box(box: BoundingBox, grid: TokenGrid) -> TokenMask:
    """Binary token mask with exactly the bits of :func:`tokens_in_box` set."""
    bits = np.zeros(grid.length, dtype=bool)
    bits[tokens_in_box(box, grid)] = True
    return TokenMask(grid, bits)


def downsample_mask(pixel_mask: PixelMask, grid: TokenGrid) -> TokenMask:
    """Majority-downsample a pixel mask to the token grid.

    Each pixel belongs to the token cell its index scales into; a token bit is
    set when more than half of its pixels are set, with exact 50% ties
    resolving to set.
    """
    h_px, w_px = pixel_mask.height, pixel_mask.width
    row_of = (np.arange(h_px) * grid.h) // h_px
    col_of = (np.arange(w_px) * grid.w) // w_px
    cell = row_of[:, None] * grid.w + col_of[None, :]
    set_counts = np.bincount(
        cell.reshape(-1), weights=pixel_mask.bits.reshape(-1).astype(np.float64), minlength=grid.length
    )
    totals = np.bincount(cell.reshape(-1), minlength=grid.length)
    bits = 2 * set_counts >= totals
    bits &= totals > 0
    return TokenMask(grid, bits)
