"""Tile ledger and per-frame allocation of spherical-buffer tiles.

Each local tile slot remembers which global tile it holds and whether that
tile has shown frame content or only received stashed border values. Wrap
evictions restrict growth back towards the evicted side; claiming a tile in
a restricted region forces a full reset of every buffer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .delta_layers import DeltaPacket, FrameTiles, TruncationState
from .tensor_core import DTYPE
from .tile_grid import FramePlacement, TileCoord, expand_tile_mask

log = logging.getLogger(__name__)

CONTENT = "content"
RING = "ring"


@dataclass
class TileLedger:
    grid_rows: int
    grid_cols: int
    held: dict = field(default_factory=dict)  # local (row, col) -> (TileCoord, CONTENT | RING)
    # restricted regions: tx <= left, tx >= right, ty <= up, ty >= down
    left: float = -math.inf
    right: float = math.inf
    up: float = -math.inf
    down: float = math.inf

    def local(self, c: TileCoord) -> tuple[int, int]:
        return c.ty % self.grid_rows, c.tx % self.grid_cols

    def is_restricted(self, c: TileCoord) -> bool:
        return c.tx <= self.left or c.tx >= self.right or c.ty <= self.up or c.ty >= self.down

    def restrict(self, evicted: TileCoord, by: TileCoord):
        if by.tx > evicted.tx:
            self.left = max(self.left, evicted.tx)
        elif by.tx < evicted.tx:
            self.right = min(self.right, evicted.tx)
        if by.ty > evicted.ty:
            self.up = max(self.up, evicted.ty)
        elif by.ty < evicted.ty:
            self.down = min(self.down, evicted.ty)

    def clear(self):
        self.held.clear()
        self.left = self.up = -math.inf
        self.right = self.down = math.inf

    def restrictions(self) -> dict:
        return {k: getattr(self, k) for k in ("left", "right", "up", "down") if math.isfinite(getattr(self, k))}


@dataclass
class FramePlan:
    placement: FramePlacement
    ring: int
    fresh_tiles: list = field(default_factory=list)  # local tiles to zero
    claims: dict = field(default_factory=dict)  # local -> (coord, kind) after this frame
    unveiled: list = field(default_factory=list)  # core coords showing content for the first time
    ring_coords: list = field(default_factory=list)  # ring coords that may receive stashes
    evicted: list = field(default_factory=list)  # (evicted coord, claimed coord)
    needs_full_reset: bool = False

    def frame_tiles(self, grid_rows: int, grid_cols: int) -> FrameTiles:
        ft = FrameTiles.static(self.placement, self.ring, grid_rows, grid_cols)
        rect = ft.rect
        ft.ring_ok[...] = False
        ft.ring_ok[ft.core_slice] = True
        for c in self.ring_coords:
            ft.ring_ok[c.ty - rect.origin.ty, c.tx - rect.origin.tx] = True
        for c in self.unveiled:
            ft.unveiled[c.ty - rect.origin.ty, c.tx - rect.origin.tx] = True
        return ft


def _ring_coords(place: FramePlacement, ring: int):
    core = set(place.coords())
    return [c for c in place.grown(ring).coords() if c not in core]


def plan_frame(ledger: TileLedger, placement: FramePlacement, ring: int = 1) -> FramePlan:
    """Classify every tile the frame needs as held, fresh or restricted.

    Pure: the ledger is not modified (see :meth:`BufferManager.commit`).
    """
    if placement.tiles_h > ledger.grid_rows or placement.tiles_w > ledger.grid_cols:
        raise ValueError(
            f"frame of {placement.tiles_h}x{placement.tiles_w} tiles exceeds grid "
            f"{ledger.grid_rows}x{ledger.grid_cols}"
        )
    plan = FramePlan(placement, ring)
    core = placement.coords()
    used = {ledger.local(c) for c in core}
    ring_coords = []
    for c in _ring_coords(placement, ring):
        loc = ledger.local(c)
        if loc not in used:  # slots owned by this frame's content win
            used.add(loc)
            ring_coords.append(c)

    for c in core + ring_coords:
        entry = ledger.held.get(ledger.local(c))
        if (entry is None or entry[0] != c) and ledger.is_restricted(c):
            plan.needs_full_reset = True
            break
    held = {} if plan.needs_full_reset else ledger.held

    for c in core:
        loc = ledger.local(c)
        entry = held.get(loc)
        if entry is not None and entry[0] == c:
            if entry[1] == RING:
                plan.unveiled.append(c)
        else:
            if entry is not None:
                plan.evicted.append((entry[0], c))
            plan.fresh_tiles.append(loc)
            plan.unveiled.append(c)
        plan.claims[loc] = (c, CONTENT)
    for c in ring_coords:
        loc = ledger.local(c)
        entry = held.get(loc)
        if entry is not None and entry[0] == c:
            plan.claims[loc] = entry
        else:
            if entry is not None:
                plan.evicted.append((entry[0], c))
            plan.fresh_tiles.append(loc)
            plan.claims[loc] = (c, RING)
        plan.ring_coords.append(c)
    return plan


class BufferManager:
    """Owns the ledger and applies plans to every layer state."""

    def __init__(self, grid_rows: int, grid_cols: int, ring: int = 1):
        self.ledger = TileLedger(grid_rows, grid_cols)
        self.ring = ring
        self.frame_index = 0
        self.resets = 0
        self.events: list[dict] = []

    def plan(self, placement: FramePlacement) -> FramePlan:
        return plan_frame(self.ledger, placement, self.ring)

    def apply_plan(self, plan: FramePlan, states) -> None:
        """Zero fresh tiles (or everything on a full reset) and commit the ledger."""
        if plan.needs_full_reset:
            for s in states:
                s.clear()
            self.ledger.clear()
            self.resets += 1
            log.info("frame %d: full buffer reset", self.frame_index)
        elif plan.fresh_tiles:
            for s in states:
                s.reset_tiles(plan.fresh_tiles)
        self.commit(plan)

    def commit(self, plan: FramePlan):
        for old, new in plan.evicted:
            self.ledger.restrict(old, new)
        self.ledger.held.update(plan.claims)

    def log_event(self, plan: FramePlan, cropped: int = 0) -> dict:
        ev = {
            "frame": self.frame_index,
            "origin": [plan.placement.origin.tx, plan.placement.origin.ty],
            "fresh": len(plan.fresh_tiles),
            "unveiled": len(plan.unveiled),
            "evicted": len(plan.evicted),
            "reset": plan.needs_full_reset,
            "cropped_pixels": cropped,
        }
        self.events.append(ev)
        log.debug("frame %(frame)d origin=%(origin)s fresh=%(fresh)d evicted=%(evicted)d reset=%(reset)s", ev)
        self.frame_index += 1
        return ev


def inject_bias(plan: FramePlan, bias, state: TruncationState | None = None,
                packet: DeltaPacket | None = None, ft: FrameTiles | None = None) -> None:
    """Add a layer bias onto tiles unveiled this frame.

    With ``state`` the bias pre-loads the following activation's truncated
    buffer (implicit variant); with ``packet`` it is added to the delta
    leaving the layer (explicit variant).
    """
    if bias is None or not plan.unveiled:
        return
    if state is not None:
        state.add_bias(plan.unveiled, bias)
        return
    rect = ft.rect
    sel = np.zeros_like(packet.mask)
    for c in plan.unveiled:
        sel[c.ty - rect.origin.ty, c.tx - rect.origin.tx] = True
    pix = expand_tile_mask(sel, packet.tile, packet.tile)
    b = np.asarray(bias, dtype=DTYPE)[:, None, None]
    packet.delta += np.where(pix, b, DTYPE(0))
    packet.mask |= sel
