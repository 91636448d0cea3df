"""Frame alignment onto the tile grid and input-side update gating."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

from .tensor_core import DTYPE, as_tensor
from .tile_grid import FramePlacement, TileCoord, reduce_to_tiles

_SNAP = 1e-6


class SingularHomography(ValueError):
    pass


def check_homography(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(h)) <= 1e-9:
        raise SingularHomography("homography is singular")
    return h / h[2, 2]


def translation(dx: float, dy: float) -> np.ndarray:
    return np.array([[1, 0, dx], [0, 1, dy], [0, 0, 1]], dtype=np.float64)


def integer_translation(h) -> tuple[int, int] | None:
    """(dx, dy) if ``h`` is an integer pixel translation, else None."""
    h = check_homography(h)
    if not np.allclose(h[:2, :2], np.eye(2), atol=1e-9) or not np.allclose(h[2, :2], 0, atol=1e-12):
        return None
    dx, dy = h[0, 2], h[1, 2]
    if abs(dx - round(dx)) > _SNAP or abs(dy - round(dy)) > _SNAP:
        return None
    return int(round(dx)), int(round(dy))


def _snap(v):
    r = np.round(v)
    return np.where(np.abs(v - r) < _SNAP, r, v)


def warp(frame: np.ndarray, h, out_shape=None, origin=(0, 0)):
    """Inverse-map ``frame`` through homography ``h`` (frame -> reference).

    Output pixel (r, c) sits at reference coordinate (origin + (c, r)) and
    bilinearly samples the source. Returns the warped tensor and a boolean
    footprint of pixels that landed inside the source.
    """
    frame = as_tensor(frame)
    hinv = np.linalg.inv(check_homography(h))
    out_h, out_w = out_shape or frame.shape[1:]
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    xs += origin[0]
    ys += origin[1]
    pts = hinv @ np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    sx = _snap(pts[0] / pts[2]).reshape(out_h, out_w)
    sy = _snap(pts[1] / pts[2]).reshape(out_h, out_w)

    _, src_h, src_w = frame.shape
    valid = (sx >= 0) & (sx <= src_w - 1) & (sy >= 0) & (sy <= src_h - 1)
    x0 = np.clip(np.floor(sx), 0, src_w - 1).astype(int)
    y0 = np.clip(np.floor(sy), 0, src_h - 1).astype(int)
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = np.clip(sx - x0, 0, 1).astype(DTYPE)
    fy = np.clip(sy - y0, 0, 1).astype(DTYPE)

    top = frame[:, y0, x0] * (1 - fx) + frame[:, y0, x1] * fx
    bot = frame[:, y1, x0] * (1 - fx) + frame[:, y1, x1] * fx
    # exact copy on lattice points, where fy == 0 makes bot irrelevant
    out = np.where(fy == 0, top, top * (1 - fy) + bot * fy)
    out = np.where(valid, out, DTYPE(0)).astype(DTYPE)
    return out, valid


@dataclass
class AlignedFrame:
    image: np.ndarray
    placement: FramePlacement
    valid: np.ndarray
    tile: int
    cropped: int = 0


def snap_to_grid(warped: np.ndarray, offset, tile: int, valid=None) -> AlignedFrame:
    """Embed an image whose top-left sits at pixel ``offset`` = (x, y) into the
    smallest tile-aligned canvas covering it; margins are zero."""
    if tile < 1:
        raise ValueError("tile must be >= 1")
    warped = as_tensor(warped)
    c, h, w = warped.shape
    ox, oy = offset
    tx0, ty0 = math.floor(ox / tile), math.floor(oy / tile)
    tx1, ty1 = math.ceil((ox + w) / tile), math.ceil((oy + h) / tile)
    canvas = np.zeros((c, (ty1 - ty0) * tile, (tx1 - tx0) * tile), dtype=DTYPE)
    mask = np.zeros(canvas.shape[1:], dtype=bool)
    left, top = ox - tx0 * tile, oy - ty0 * tile
    canvas[:, top:top + h, left:left + w] = warped
    mask[top:top + h, left:left + w] = True if valid is None else valid
    return AlignedFrame(canvas, FramePlacement(TileCoord(tx0, ty0), ty1 - ty0, tx1 - tx0), mask, tile)


def align_frame(frame: np.ndarray, h, tile: int, max_tiles=None) -> AlignedFrame:
    """Warp into reference coordinates and snap onto the tile grid.

    If the aligned canvas exceeds ``max_tiles`` = (rows, cols) it is cropped
    symmetrically; the number of dropped footprint pixels is recorded.
    """
    frame = as_tensor(frame)
    h = check_homography(h)
    shift = integer_translation(h)
    if shift is not None:
        aligned = snap_to_grid(frame, shift, tile)
    else:
        _, fh, fw = frame.shape
        corners = h @ np.array([[0, fw - 1, 0, fw - 1], [0, 0, fh - 1, fh - 1], [1, 1, 1, 1]], dtype=np.float64)
        xs, ys = corners[0] / corners[2], corners[1] / corners[2]
        tx0, ty0 = math.floor(xs.min() / tile), math.floor(ys.min() / tile)
        tx1, ty1 = math.floor(xs.max() / tile) + 1, math.floor(ys.max() / tile) + 1
        shape = ((ty1 - ty0) * tile, (tx1 - tx0) * tile)
        img, valid = warp(frame, h, shape, (tx0 * tile, ty0 * tile))
        aligned = AlignedFrame(img, FramePlacement(TileCoord(tx0, ty0), ty1 - ty0, tx1 - tx0), valid, tile)
    if max_tiles is not None:
        aligned = crop_to_tiles(aligned, *max_tiles)
    return aligned


def crop_to_tiles(aligned: AlignedFrame, rows: int, cols: int) -> AlignedFrame:
    p, t = aligned.placement, aligned.tile
    if p.tiles_h <= rows and p.tiles_w <= cols:
        return aligned
    dr = max(0, p.tiles_h - rows)
    dc = max(0, p.tiles_w - cols)
    r0, c0 = dr // 2, dc // 2
    nh, nw = p.tiles_h - dr, p.tiles_w - dc
    img = aligned.image[:, r0 * t:(r0 + nh) * t, c0 * t:(c0 + nw) * t]
    valid = aligned.valid[r0 * t:(r0 + nh) * t, c0 * t:(c0 + nw) * t]
    dropped = int(aligned.valid.sum() - valid.sum())
    place = FramePlacement(TileCoord(p.origin.tx + c0, p.origin.ty + r0), nh, nw)
    return AlignedFrame(np.ascontiguousarray(img), place, np.ascontiguousarray(valid), t, aligned.cropped + dropped)


def compute_input_delta(aligned: AlignedFrame, accumulated: np.ndarray) -> np.ndarray:
    """Current aligned input minus what the network has already absorbed.

    Tiles without a single valid pixel contribute no delta.
    """
    delta = aligned.image - accumulated
    t = aligned.tile
    live = reduce_to_tiles(aligned.valid, t, t)
    livep = np.repeat(np.repeat(live, t, axis=0), t, axis=1)
    return np.where(livep, delta, DTYPE(0)).astype(DTYPE)


ROI_KERNELS = (10, 20, 40)


def roi_factor(prev_mask: np.ndarray, kernels=ROI_KERNELS) -> np.ndarray:
    m = np.clip(np.asarray(prev_mask, dtype=np.float64), 0, 1)
    dil = [maximum_filter(m, size=k, mode="constant", cval=0.0) for k in kernels]
    return (0.4 + 0.6 * np.mean(dil, axis=0)).astype(DTYPE)


def roi_scale(delta: np.ndarray, prev_mask: np.ndarray, kernels=ROI_KERNELS) -> np.ndarray:
    """Delta weighted by 0.4 + 0.6*m, m the mean of three max-pool dilations
    of the previous ROI mask. Used for masking decisions only."""
    return (as_tensor(delta) * roi_factor(prev_mask, kernels)[None]).astype(DTYPE)


def significance(delta: np.ndarray) -> np.ndarray:
    return np.abs(delta).max(axis=0)


def suppress_noise_pixels(delta: np.ndarray, threshold: float, window: int = 3, min_support: int = 2) -> np.ndarray:
    """Super-threshold pixels with at least ``min_support`` super-threshold
    pixels (itself included) in their window."""
    s = (significance(delta) > threshold).astype(np.float64)
    a = uniform_filter(s, size=window, mode="constant", cval=0.0)
    return (s > 0) & (a > (min_support - 0.5) / window**2)


def suppress_noise(delta: np.ndarray, threshold: float, tile: int, window: int = 3, min_support: int = 2) -> np.ndarray:
    """Per-tile update mask after removing isolated updates."""
    return reduce_to_tiles(suppress_noise_pixels(delta, threshold, window, min_support), tile, tile)


def mask_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    return maximum_filter(mask, size=2 * radius + 1, mode="constant", cval=False)


def update_pixels(delta, threshold, roi_mask=None, noise_suppression=False, dilation=0,
                  noise_window=3, noise_support=2) -> np.ndarray:
    """Input-stage pixel update map: ROI weighting, thresholding, optional
    noise suppression, then dilation."""
    gated = delta if roi_mask is None else roi_scale(delta, roi_mask)
    if noise_suppression:
        pix = suppress_noise_pixels(gated, threshold, noise_window, noise_support)
    else:
        sig = significance(gated)
        pix = (sig >= threshold) & (sig > 0)
    return mask_dilate(pix, dilation)


def load_homographies(path) -> list[np.ndarray]:
    out = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) != 9:
                raise ValueError(f"{path}:{n}: expected 9 values, got {len(vals)}")
            out.append(check_homography([float(v) for v in vals]))
    return out


def save_homographies(path, hs):
    with open(path, "w") as f:
        for h in hs:
            f.write(" ".join(repr(float(v)) for v in np.asarray(h, dtype=np.float64).ravel()) + "\n")
