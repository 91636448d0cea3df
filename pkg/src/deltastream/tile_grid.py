"""Tile coordinates and the spherical (2D wrapped ring) feature buffer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor_core import DTYPE, write_tensor


class TileCoord(NamedTuple):
    tx: int
    ty: int


@dataclass(frozen=True)
class GridSpec:
    tile_h: int
    tile_w: int
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        if min(self.tile_h, self.tile_w, self.grid_rows, self.grid_cols) < 1:
            raise ValueError(f"invalid grid spec {self}")

    @property
    def height(self) -> int:
        return self.grid_rows * self.tile_h

    @property
    def width(self) -> int:
        return self.grid_cols * self.tile_w

    def scaled(self, tile_h: int, tile_w: int) -> "GridSpec":
        return GridSpec(tile_h, tile_w, self.grid_rows, self.grid_cols)


@dataclass(frozen=True)
class FramePlacement:
    origin: TileCoord
    tiles_h: int
    tiles_w: int

    def coords(self):
        """Global tile coordinates covered, row-major."""
        ox, oy = self.origin
        return [TileCoord(ox + j, oy + i) for i in range(self.tiles_h) for j in range(self.tiles_w)]

    def grown(self, ring: int) -> "FramePlacement":
        ox, oy = self.origin
        return FramePlacement(TileCoord(ox - ring, oy - ring), self.tiles_h + 2 * ring, self.tiles_w + 2 * ring)


def wrap_tile(coord: TileCoord, spec: GridSpec) -> tuple[int, int]:
    """Local (row, col) of a global tile; Python's % is already non-negative."""
    return coord.ty % spec.grid_rows, coord.tx % spec.grid_cols


class SphericalBuffer:
    """Zero-initialised C x (rows*tile_h) x (cols*tile_w) store addressed by
    global tile coordinates that wrap modulo the grid."""

    def __init__(self, spec: GridSpec, channels: int):
        self.spec = spec
        self.channels = channels
        self.storage = np.zeros((channels, spec.height, spec.width), dtype=DTYPE)

    def _index(self, place: FramePlacement):
        s = self.spec
        if place.tiles_h > s.grid_rows or place.tiles_w > s.grid_cols:
            raise ValueError(
                f"placement extent {place.tiles_h}x{place.tiles_w} exceeds grid {s.grid_rows}x{s.grid_cols}"
            )
        rows = (place.origin.ty * s.tile_h + np.arange(place.tiles_h * s.tile_h)) % s.height
        cols = (place.origin.tx * s.tile_w + np.arange(place.tiles_w * s.tile_w)) % s.width
        return rows[:, None], cols[None, :]

    def read_region(self, place: FramePlacement) -> np.ndarray:
        r, c = self._index(place)
        return self.storage[:, r, c]

    def write_region(self, place: FramePlacement, values: np.ndarray):
        r, c = self._index(place)
        self.storage[:, r, c] = values

    def accumulate_region(self, place: FramePlacement, delta: np.ndarray, mask=None):
        """Add ``delta`` onto the placed region, restricted to masked tiles."""
        s = self.spec
        shape = (self.channels, place.tiles_h * s.tile_h, place.tiles_w * s.tile_w)
        if delta.shape != shape:
            raise ValueError(f"delta shape {delta.shape} does not match placement {shape}")
        r, c = self._index(place)
        if mask is None:
            self.storage[:, r, c] += delta
            return
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (place.tiles_h, place.tiles_w):
            raise ValueError(f"mask shape {mask.shape} does not match placement tiles")
        pix = expand_tile_mask(mask, s.tile_h, s.tile_w)
        self.storage[:, r, c] += np.where(pix, delta, DTYPE(0))

    def tile_view(self, local: tuple[int, int]) -> np.ndarray:
        i, j = local
        th, tw = self.spec.tile_h, self.spec.tile_w
        return self.storage[:, i * th:(i + 1) * th, j * tw:(j + 1) * tw]

    def reset_tiles(self, tiles):
        s = self.spec
        for i, j in tiles:
            if not (0 <= i < s.grid_rows and 0 <= j < s.grid_cols):
                raise IndexError(f"local tile ({i}, {j}) outside grid {s.grid_rows}x{s.grid_cols}")
            self.tile_view((i, j))[...] = 0

    def clear(self):
        self.storage[...] = 0

    def dump(self, path, held=None):
        """Write storage as a tensor file and, if ``held`` maps local tile ->
        global coord, a sidecar ``.tiles.txt`` listing."""
        write_tensor(path, self.storage)
        if held is None:
            return
        lines = []
        for i in range(self.spec.grid_rows):
            for j in range(self.spec.grid_cols):
                coord = held.get((i, j))
                lines.append(f"{i} {j} " + ("-" if coord is None else f"{coord.tx} {coord.ty}"))
        with open(f"{path}.tiles.txt", "w") as f:
            f.write("\n".join(lines) + "\n")


def expand_tile_mask(mask: np.ndarray, tile_h: int, tile_w: int) -> np.ndarray:
    return np.repeat(np.repeat(np.asarray(mask, dtype=bool), tile_h, axis=0), tile_w, axis=1)


def reduce_to_tiles(pixels: np.ndarray, tile_h: int, tile_w: int) -> np.ndarray:
    """Per-tile ``any`` of a 2D boolean pixel map."""
    h, w = pixels.shape
    return pixels.reshape(h // tile_h, tile_h, w // tile_w, tile_w).any(axis=(1, 3))


def tile_absmax(t: np.ndarray, tile_h: int, tile_w: int) -> np.ndarray:
    """Max over channels and tile pixels of |t|."""
    c, h, w = t.shape
    return np.abs(t).reshape(c, h // tile_h, tile_h, w // tile_w, tile_w).max(axis=(0, 2, 4))
