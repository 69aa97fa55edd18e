"""Non-overlapping window tiling of ``H x W x C`` feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError


@dataclass(frozen=True)
class WindowLayout:
    """Window tiling of an ``H x W`` map by ``h x w`` windows, zero-padded
    on the bottom/right up to the nearest multiples."""

    H: int
    W: int
    h: int
    w: int

    def __post_init__(self) -> None:
        if self.h < 1 or self.w < 1:
            raise ValueError("window extents must be >= 1")

    @property
    def Hp(self) -> int:
        return -(-self.H // self.h) * self.h

    @property
    def Wp(self) -> int:
        return -(-self.W // self.w) * self.w

    @property
    def rows(self) -> int:
        return self.Hp // self.h

    @property
    def cols(self) -> int:
        return self.Wp // self.w

    @property
    def n_windows(self) -> int:
        return self.rows * self.cols

    def window_index(self, y: np.ndarray | int, x: np.ndarray | int):
        """Row-major window index of pixel (y, x)."""
        return (np.asarray(y) // self.h) * self.cols + np.asarray(x) // self.w

    def window_sums(self, a: np.ndarray) -> np.ndarray:
        """Sum of an ``H x W`` map inside each window, in window order."""
        if a.shape != (self.H, self.W):
            raise DimensionError(f"map {a.shape} does not match layout {(self.H, self.W)}")
        padded = np.zeros((self.Hp, self.Wp), dtype=np.float64)
        padded[: self.H, : self.W] = a
        return padded.reshape(self.rows, self.h, self.cols, self.w).sum(axis=(1, 3)).ravel()


@dataclass
class WindowGrid:
    layout: WindowLayout
    blocks: np.ndarray  # (N_W, h, w, C)

    @property
    def n_windows(self) -> int:
        return self.blocks.shape[0]


def window_partition(x: np.ndarray, h: int, w: int) -> WindowGrid:
    H, W, C = x.shape
    lay = WindowLayout(H, W, h, w)
    if (lay.Hp, lay.Wp) != (H, W):
        padded = np.zeros((lay.Hp, lay.Wp, C), dtype=x.dtype)
        padded[:H, :W] = x
        x = padded
    blocks = x.reshape(lay.rows, h, lay.cols, w, C).transpose(0, 2, 1, 3, 4).reshape(-1, h, w, C)
    return WindowGrid(lay, blocks)


def window_unpartition(g: WindowGrid, H: int, W: int) -> np.ndarray:
    lay = g.layout
    n, h, w, C = g.blocks.shape
    if (h, w) != (lay.h, lay.w) or n != lay.n_windows:
        raise DimensionError("window blocks do not match their layout")
    if not (lay.Hp - lay.h < H <= lay.Hp and lay.Wp - lay.w < W <= lay.Wp):
        raise DimensionError(f"grid padded to {(lay.Hp, lay.Wp)} cannot cover {(H, W)}")
    x = g.blocks.reshape(lay.rows, lay.cols, h, w, C).transpose(0, 2, 1, 3, 4).reshape(lay.Hp, lay.Wp, C)
    return np.ascontiguousarray(x[:H, :W])
