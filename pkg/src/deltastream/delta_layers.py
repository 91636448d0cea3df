"""Sparse delta-propagating layers.

A :class:`DeltaPacket` always covers the frame's core tiles plus a ring of
``ring`` tiles on each side. Linear layers operate on the whole rectangle so
that values dilated past the frame border by convolutions survive until the
next stateful layer, which stashes them into its truncated-values buffer at
wrapped coordinates (the ring tiles of the spherical grid).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .tensor_core import DTYPE, ConvParams, ShapeError, conv_raw, dense_avgpool, dense_maxpool
from .tile_grid import (
    FramePlacement,
    GridSpec,
    SphericalBuffer,
    TileCoord,
    expand_tile_mask,
    reduce_to_tiles,
    tile_absmax,
)


@dataclass
class FrameTiles:
    """Per-frame tile classification shared by every layer.

    All boolean maps are indexed over the ring-grown rectangle
    (``core.grown(ring)``) in tile units.
    """

    core: FramePlacement
    ring: int
    grid_rows: int
    grid_cols: int
    unveiled: np.ndarray  # core tiles showing content for the first time
    ring_ok: np.ndarray  # tiles whose slot may receive stashed values (core included)

    @property
    def rect(self) -> FramePlacement:
        return self.core.grown(self.ring)

    @property
    def core_slice(self):
        r = self.ring
        return slice(r, r + self.core.tiles_h), slice(r, r + self.core.tiles_w)

    def core_mask(self) -> np.ndarray:
        m = np.zeros((self.rect.tiles_h, self.rect.tiles_w), dtype=bool)
        m[self.core_slice] = True
        return m

    def core_locals(self):
        """Local (row, col) index arrays of the core tiles."""
        ox, oy = self.core.origin
        rows = (oy + np.arange(self.core.tiles_h)) % self.grid_rows
        cols = (ox + np.arange(self.core.tiles_w)) % self.grid_cols
        return rows[:, None], cols[None, :]

    def ring_tiles(self):
        """(rect index, global coord) of every claimable ring tile."""
        rect = self.rect
        core = self.core_mask()
        out = []
        for i in range(rect.tiles_h):
            for j in range(rect.tiles_w):
                if not core[i, j] and self.ring_ok[i, j]:
                    out.append(((i, j), TileCoord(rect.origin.tx + j, rect.origin.ty + i)))
        return out

    @classmethod
    def static(cls, core: FramePlacement, ring: int, grid_rows: int, grid_cols: int, first: bool = False):
        shape = (core.tiles_h + 2 * ring, core.tiles_w + 2 * ring)
        ft = cls(core, ring, grid_rows, grid_cols, np.zeros(shape, bool), np.ones(shape, bool))
        if first:
            ft.unveiled[ft.core_slice] = True
        return ft


@dataclass
class DeltaPacket:
    delta: np.ndarray  # (C, rect_h * tile, rect_w * tile)
    mask: np.ndarray  # (rect_h, rect_w) bool
    tile: int

    @property
    def channels(self) -> int:
        return self.delta.shape[0]

    def tile_pixels(self, i, j) -> np.ndarray:
        t = self.tile
        return self.delta[:, i * t:(i + 1) * t, j * t:(j + 1) * t]

    def core(self, ft: FrameTiles) -> np.ndarray:
        rs, cs = ft.core_slice
        t = self.tile
        return self.delta[:, rs.start * t:rs.stop * t, cs.start * t:cs.stop * t]

    @classmethod
    def empty(cls, channels: int, ft: FrameTiles, tile: int) -> "DeltaPacket":
        rect = ft.rect
        return cls(
            np.zeros((channels, rect.tiles_h * tile, rect.tiles_w * tile), dtype=DTYPE),
            np.zeros((rect.tiles_h, rect.tiles_w), dtype=bool),
            tile,
        )

    def check_invariant(self) -> bool:
        """Unmasked tiles carry exactly zero delta."""
        nz = tile_absmax(self.delta, self.tile, self.tile) > 0
        return not np.any(nz & ~self.mask)


ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, DTYPE(0)),
    "identity": lambda x: x,
}


class _State:
    def __init__(self, grid: GridSpec):
        self.grid = grid
        self.pending = np.zeros((grid.grid_rows, grid.grid_cols), dtype=bool)

    def _buffers(self):
        raise NotImplementedError

    def reset_tiles(self, tiles):
        for buf in self._buffers():
            buf.reset_tiles(tiles)
        for i, j in tiles:
            self.pending[i, j] = False

    def clear(self):
        for buf in self._buffers():
            buf.clear()
        self.pending[...] = False

    def _stash_ring(self, buf: SphericalBuffer, packet: DeltaPacket, ft: FrameTiles):
        for (i, j), coord in ft.ring_tiles():
            if not packet.mask[i, j]:
                continue
            buf.accumulate_region(FramePlacement(coord, 1, 1), packet.tile_pixels(i, j))
            self.pending[coord.ty % self.grid.grid_rows, coord.tx % self.grid.grid_cols] = True


class TruncationState(_State):
    """Accumulated and truncated values in front of an activation.

    ``accumulated + truncated`` always equals the total input mass received,
    including stashed dilated values and implicitly applied biases.
    """

    def __init__(self, grid: GridSpec, channels: int, threshold: float = 0.0, kind: str = "relu"):
        super().__init__(grid)
        if threshold < 0:
            raise ValueError("threshold must be >= 0")
        self.channels = channels
        self.threshold = float(threshold)
        self.kind = kind
        self.act = ACTIVATIONS[kind]
        self.accumulated = SphericalBuffer(grid, channels)
        self.truncated = SphericalBuffer(grid, channels)

    def _buffers(self):
        return (self.accumulated, self.truncated)

    def add_bias(self, coords, bias):
        """Implicit bias: pre-load fresh tiles of the truncated buffer."""
        b = np.asarray(bias, dtype=DTYPE)[:, None, None]
        for c in coords:
            local = (c.ty % self.grid.grid_rows, c.tx % self.grid.grid_cols)
            self.truncated.tile_view(local)[...] += b
            self.pending[local] = True

    def process(self, packet: DeltaPacket, ft: FrameTiles) -> DeltaPacket:
        if packet.channels != self.channels:
            raise ShapeError(f"packet has {packet.channels} channels, state expects {self.channels}")
        if packet.tile != self.grid.tile_h:
            raise ShapeError("packet tile size does not match the state's grid")
        self._stash_ring(self.truncated, packet, ft)

        rs, cs = ft.core_slice
        lr, lc = ft.core_locals()
        consider = packet.mask[rs, cs] | ft.unveiled[rs, cs] | self.pending[lr, lc]
        acc = self.accumulated.read_region(ft.core)
        cand = self.truncated.read_region(ft.core) + packet.core(ft)
        fire = self.decide(cand, consider, ft.unveiled[rs, cs])
        out, acc, trunc = self.commit(acc, cand, fire)
        self.accumulated.write_region(ft.core, acc)
        self.truncated.write_region(ft.core, trunc)
        self.pending[lr, lc] &= ~consider

        res = DeltaPacket.empty(self.channels, ft, packet.tile)
        res.core(ft)[...] = out
        res.mask[rs, cs] = fire
        return res

    def decide(self, cand, consider, forced):
        t = self.grid.tile_h
        amax = tile_absmax(cand, t, t)
        return consider & (amax > 0) & ((amax >= self.threshold) | forced)

    def commit(self, acc, cand, fire):
        # unconsidered tiles carry zero delta, so cand == truncated there
        t = self.grid.tile_h
        firep = expand_tile_mask(fire, t, t)
        new_acc = np.where(firep, acc + cand, acc)
        out = np.where(firep, self.act(new_acc) - self.act(acc), DTYPE(0))
        trunc = np.where(firep, DTYPE(0), cand)
        return out.astype(DTYPE), new_acc.astype(DTYPE), trunc.astype(DTYPE)

    def densify(self, place: FramePlacement) -> np.ndarray:
        return self.accumulated.read_region(place) + self.truncated.read_region(place)


class MaxPoolState(_State):
    """Accumulated input plus the previous output of every pooled pixel."""

    def __init__(self, grid_in: GridSpec, channels: int, k: int):
        if grid_in.tile_h % k:
            raise ValueError("max-pool window must divide the tile size")
        super().__init__(grid_in)
        self.k = k
        self.channels = channels
        self.grid_out = grid_in.scaled(grid_in.tile_h // k, grid_in.tile_w // k)
        self.accumulated = SphericalBuffer(grid_in, channels)
        self.prev_out = SphericalBuffer(self.grid_out, channels)

    def _buffers(self):
        return (self.accumulated, self.prev_out)

    def process(self, packet: DeltaPacket, ft: FrameTiles) -> DeltaPacket:
        if packet.channels != self.channels:
            raise ShapeError("packet channels do not match max-pool state")
        self._stash_ring(self.accumulated, packet, ft)
        rs, cs = ft.core_slice
        lr, lc = ft.core_locals()
        consider = packet.mask[rs, cs] | ft.unveiled[rs, cs] | self.pending[lr, lc]

        acc = self.accumulated.read_region(ft.core) + packet.core(ft)
        self.accumulated.write_region(ft.core, acc)
        new_out = dense_maxpool(acc, self.k, self.k)
        prev = self.prev_out.read_region(ft.core)
        tout = self.grid_out.tile_h
        cp = expand_tile_mask(consider, tout, tout)
        out = np.where(cp, new_out - prev, DTYPE(0)).astype(DTYPE)
        self.prev_out.write_region(ft.core, np.where(cp, new_out, prev))
        self.pending[lr, lc] &= ~consider

        res = DeltaPacket.empty(self.channels, ft, tout)
        res.core(ft)[...] = out
        res.mask[rs, cs] = consider & (tile_absmax(out, tout, tout) > 0)
        return res


def padded_conv_grown(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Convolution padded so that every output touched by the kernel is
    produced: a (H, W) input yields (H + k - 1, W + k - 1) at stride 1."""
    pad = params.kernel_h - 1
    return conv_raw(x, params.weights, params.stride, pad)


def conv_influence(mask: np.ndarray, tile_in: int, k: int, stride: int) -> np.ndarray:
    """Output pixels whose receptive field touches a masked input tile."""
    pix = expand_tile_mask(mask, tile_in, tile_in)
    if k > 1:
        pix = maximum_filter(pix, size=k, mode="constant", cval=False)
    return pix[::stride, ::stride]


def conv_output_mask(mask: np.ndarray, tile_in: int, k: int, stride: int) -> np.ndarray:
    """Output tiles whose receptive field touches a masked input tile."""
    t = tile_in // stride
    return reduce_to_tiles(conv_influence(mask, tile_in, k, stride), t, t)


def padded_delta_conv(packet: DeltaPacket, params: ConvParams, ft: FrameTiles, padded: bool = True):
    """Convolve a delta packet over the ring-grown rectangle.

    Returns the output packet and the number of output pixels processed.
    Bias is never applied here.
    """
    if packet.channels != params.in_channels:
        raise ShapeError(f"packet has {packet.channels} channels, conv expects {params.in_channels}")
    s = params.stride
    if packet.tile % s:
        raise ShapeError(f"stride {s} does not divide tile size {packet.tile}")
    if params.padding != params.kernel_h // 2:
        raise ShapeError("delta convolution requires 'same' padding")
    tile_out = packet.tile // s
    out = DeltaPacket.empty(params.out_channels, ft, tile_out)
    if not packet.mask.any():
        return out, 0
    influence = conv_influence(packet.mask, packet.tile, params.kernel_h, s)
    mask = reduce_to_tiles(influence, tile_out, tile_out)
    core = ft.core_mask()
    if not padded:
        mask &= core
    delta = conv_raw(packet.delta, params.weights, s, params.padding)
    out.delta[...] = np.where(expand_tile_mask(mask, tile_out, tile_out), delta, DTYPE(0))
    out.mask = mask
    # whole tiles inside the frame, only the produced border pixels outside it
    in_core = int((mask & core).sum()) * tile_out * tile_out
    border = int((influence & ~expand_tile_mask(core, tile_out, tile_out)).sum()) if padded else 0
    return out, in_core + border


def delta_batchnorm_affine(packet: DeltaPacket, scale) -> DeltaPacket:
    scale = np.asarray(scale, dtype=DTYPE).reshape(-1, 1, 1)
    return DeltaPacket((packet.delta * scale).astype(DTYPE), packet.mask.copy(), packet.tile)


def delta_avgpool(packet: DeltaPacket, k: int) -> DeltaPacket:
    if packet.tile % k:
        raise ShapeError("avg-pool window must divide the tile size")
    return DeltaPacket(dense_avgpool(packet.delta, k, k), packet.mask.copy(), packet.tile // k)


def delta_upsample_nearest(packet: DeltaPacket, factor: int) -> DeltaPacket:
    d = np.repeat(np.repeat(packet.delta, factor, axis=1), factor, axis=2)
    return DeltaPacket(d, packet.mask.copy(), packet.tile * factor)


def delta_add(a: DeltaPacket, b: DeltaPacket) -> DeltaPacket:
    if a.delta.shape != b.delta.shape or a.tile != b.tile:
        raise ShapeError("delta_add needs packets with identical placement and shape")
    return DeltaPacket(a.delta + b.delta, a.mask | b.mask, a.tile)
