"""Oracles, random networks and synthetic sequences used by the CLI and tests."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .alignment import AlignedFrame, align_frame, translation
from .network import Layer, NetworkSpec, run_dense, validate
from .tensor_core import DTYPE, ConvParams
from .tile_grid import expand_tile_mask


class FusedCanvas:
    """Dense reference for moving cameras.

    Aligned frames are pasted onto an unbounded canvas (later frames win).
    Dense inference runs over the canvas with every layer's output zeroed
    outside the tiles seen so far, and is compared on the current frame.
    """

    def __init__(self, spec: NetworkSpec, tile: int):
        self.spec = spec
        self.tile = tile
        self.graph = validate(spec, tile)
        self.tiles: dict = {}  # global TileCoord -> (C, tile, tile) pixels

    def reset(self):
        self.tiles.clear()

    def add(self, aligned: AlignedFrame):
        t = self.tile
        p = aligned.placement
        for i in range(p.tiles_h):
            for j in range(p.tiles_w):
                key = (p.origin.tx + j, p.origin.ty + i)
                self.tiles[key] = aligned.image[:, i * t:(i + 1) * t, j * t:(j + 1) * t].copy()

    def output(self, aligned: AlignedFrame) -> np.ndarray:
        """Oracle output over ``aligned``'s placement (call after :meth:`add`)."""
        t = self.tile
        xs = [k[0] for k in self.tiles]
        ys = [k[1] for k in self.tiles]
        x0, y0 = min(xs), min(ys)
        nw, nh = max(xs) - x0 + 1, max(ys) - y0 + 1
        c = self.spec.in_channels
        canvas = np.zeros((c, nh * t, nw * t), dtype=DTYPE)
        seen = np.zeros((nh, nw), dtype=bool)
        for (tx, ty), px in self.tiles.items():
            i, j = ty - y0, tx - x0
            canvas[:, i * t:(i + 1) * t, j * t:(j + 1) * t] = px
            seen[i, j] = True

        def mask(name, y):
            lt = self.graph.tile(name, t)
            return np.where(expand_tile_mask(seen, lt, lt), y, DTYPE(0)).astype(DTYPE)

        out = run_dense(self.spec, canvas, post=mask)
        lt = self.graph.tile(self.graph.output, t)
        p = aligned.placement
        r0, c0 = (p.origin.ty - y0) * lt, (p.origin.tx - x0) * lt
        return out[:, r0:r0 + p.tiles_h * lt, c0:c0 + p.tiles_w * lt]


def _conv(rng, name, src, cin, cout, k=3, stride=1, bias=True):
    w = (rng.standard_normal((cout, cin, k, k)) / np.sqrt(cin * k * k)).astype(DTYPE)
    b = (0.1 * rng.standard_normal(cout)).astype(DTYPE) if bias else None
    return Layer(name, "conv", [src], conv=ConvParams(w, b, stride=stride))


def random_network(rng: np.random.Generator, max_depth: int = 8, max_channels: int = 16,
                   in_channels: int = 3, kinds=None) -> NetworkSpec:
    """A random valid DAG built from conv/relu/maxpool/avgpool/upsample/
    batchnorm/add, with at most ``max_depth`` conv layers and one net
    downsampling step of 2 at most (so tiles of 8 pixels or more work)."""
    kinds = kinds or ("conv3", "conv1", "relu", "maxpool", "avgpool", "upsample", "batchnorm", "add", "strided")
    layers = []
    cur, ch, scale = "input", in_channels, 1.0
    history = [(cur, ch, scale)]
    convs = 0
    n = 0
    while convs < rng.integers(2, max_depth + 1):
        n += 1
        kind = kinds[rng.integers(len(kinds))]
        name = f"l{n}"
        if kind in ("conv3", "conv1", "strided"):
            k = 1 if kind == "conv1" else 3
            stride = 1
            if kind == "strided":
                if scale < 1:
                    continue
                stride = 2
            cout = int(rng.integers(1, max_channels + 1))
            layers.append(_conv(rng, name, cur, ch, cout, k, stride, bias=bool(rng.integers(2))))
            ch, scale, convs = cout, scale / stride, convs + 1
        elif kind == "relu":
            thr = None
            layers.append(Layer(name, "relu", [cur], threshold=thr, truncate=bool(rng.integers(4))))
        elif kind in ("maxpool", "avgpool"):
            if scale < 1:
                continue
            layers.append(Layer(name, kind, [cur], k=2))
            scale /= 2
        elif kind == "upsample":
            if scale >= 1:
                continue
            layers.append(Layer(name, "upsample", [cur], factor=2))
            scale *= 2
        elif kind == "batchnorm":
            layers.append(Layer(name, "batchnorm", [cur],
                                scale=(0.5 + rng.random(ch)).astype(DTYPE),
                                shift=(0.2 * rng.standard_normal(ch)).astype(DTYPE)))
        elif kind == "add":
            same = [h for h in history[:-1] if h[1] == ch and h[2] == scale]
            if not same:
                continue
            other = same[rng.integers(len(same))][0]
            layers.append(Layer(name, "add", [cur, other]))
        cur = name
        history.append((cur, ch, scale))
    if scale < 1:
        n += 1
        layers.append(Layer(f"l{n}", "upsample", [cur], factor=2))
        cur = f"l{n}"
    layers.append(Layer("out", "output", [cur]))
    return NetworkSpec(layers, in_channels)


def demo_network(rng: np.random.Generator, channels: int = 6, in_channels: int = 3) -> NetworkSpec:
    """Six conv-ish layers mixing 3x3/1x1 convs, relu, maxpool, upsample and
    a skip add."""
    c = channels
    layers = [
        _conv(rng, "c1", "input", in_channels, c, 3),
        Layer("r1", "relu", ["c1"]),
        _conv(rng, "c2", "r1", c, c, 1),
        Layer("r2", "relu", ["c2"], truncate=False),
        Layer("p1", "maxpool", ["r2"], k=2),
        _conv(rng, "c3", "p1", c, c, 3),
        Layer("r3", "relu", ["c3"]),
        Layer("u1", "upsample", ["r3"], factor=2),
        Layer("a1", "add", ["u1", "r1"]),
        _conv(rng, "c4", "a1", c, c, 3),
        _conv(rng, "c5", "c4", c, c, 1),
        Layer("r5", "relu", ["c5"]),
        _conv(rng, "c6", "r5", c, 2, 3),
        Layer("out", "output", ["c6"]),
    ]
    return NetworkSpec(layers, in_channels)


def textured_scene(rng: np.random.Generator, height: int, width: int, channels: int = 3) -> np.ndarray:
    """Smooth-ish random texture in [0, 1]."""
    coarse = rng.random((channels, height // 8 + 2, width // 8 + 2))
    img = np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)[:, :height, :width]
    img = 0.7 * img + 0.3 * rng.random((channels, height, width))
    return img.astype(DTYPE)


def pan_sequence(scene: np.ndarray, frame_h: int, frame_w: int, steps, start=(0, 0)):
    """Crops of a static scene; ``steps`` are (dx, dy) camera moves in pixels.

    Returns frames and homographies mapping each frame to the first frame's
    coordinates.
    """
    x, y = start
    frames, hs = [], []
    for k in range(len(steps) + 1):
        if k:
            x += steps[k - 1][0]
            y += steps[k - 1][1]
        frames.append(scene[:, y:y + frame_h, x:x + frame_w].copy())
        hs.append(translation(x - start[0], y - start[1]))
    return frames, hs


def synth(kind: str, n_frames: int = 8, height: int = 96, width: int = 128, pan: int = 0,
          amplitude: float = 0.05, seed: int = 42, channels: int = 3):
    """Deterministic synthetic sequences.

    * ``pan`` - static textured scene, camera pans ``pan`` px/frame to the right
    * ``zoomless-static`` - identical frames, identity homographies
    * ``noise-field`` - static scene plus uniform noise of ``amplitude``
    * ``moving-object`` - static camera (or ``pan``) with a moving bright square
    """
    rng = np.random.default_rng(seed)
    scene_w = width + abs(pan) * n_frames
    scene = textured_scene(rng, height, scene_w, channels)
    steps = [(pan, 0)] * (n_frames - 1)
    if kind in ("pan", "moving-object", "noise-field", "zoomless-static"):
        frames, hs = pan_sequence(scene, height, width, steps if kind != "zoomless-static" else [(0, 0)] * (n_frames - 1))
    else:
        raise ValueError(f"unknown synthetic sequence kind {kind!r}")
    if kind == "noise-field":
        frames = [frames[0]] + [
            np.clip(f + rng.uniform(-amplitude, amplitude, f.shape), 0, 1).astype(DTYPE) for f in frames[1:]
        ]
    elif kind == "moving-object":
        size = max(4, height // 6)
        for k, f in enumerate(frames):
            oy = height // 3
            ox = (8 + 6 * k) % max(1, width - size)
            f[:, oy:oy + size, ox:ox + size] = 1.0
    return frames, hs


def aligned_sequence(frames, hs, tile):
    return [align_frame(f, h, tile) for f, h in zip(frames, hs)]


REPORT_SCHEMA = 1


@dataclass
class FrameStats:
    frame: int
    update_rate: float
    conv_flops: int
    dense_flops: int
    flop_ratio: float
    fresh: int
    unveiled: int
    evicted: int
    reset: bool
    cropped_pixels: int
    max_abs_diff: float | None = None


@dataclass
class RunReport:
    """Per-frame statistics of one sequence and their means."""

    frames: list = field(default_factory=list)
    mode: str = "run"
    tile: int = 32
    grid: tuple | None = None

    def add(self, index: int, result, diff: float | None = None):
        ev = result.event
        self.frames.append(FrameStats(
            frame=index,
            update_rate=float(result.update_rate),
            conv_flops=int(result.flops.total),
            dense_flops=int(result.flops.dense_total),
            flop_ratio=float(result.flops.ratio),
            fresh=int(ev["fresh"]),
            unveiled=int(ev["unveiled"]),
            evicted=int(ev["evicted"]),
            reset=bool(ev["reset"]),
            cropped_pixels=int(ev["cropped_pixels"]),
            max_abs_diff=None if diff is None else float(diff),
        ))

    @property
    def max_diff(self) -> float | None:
        diffs = [f.max_abs_diff for f in self.frames if f.max_abs_diff is not None]
        return max(diffs) if diffs else None

    def aggregate(self) -> dict:
        n = len(self.frames)
        if not n:
            return {"frames": 0}
        mean = lambda key: float(np.mean([getattr(f, key) for f in self.frames]))  # noqa: E731
        agg = {
            "frames": n,
            "update_rate": mean("update_rate"),
            "conv_flops": mean("conv_flops"),
            "flop_ratio": mean("flop_ratio"),
            "fresh": mean("fresh"),
            "evicted": mean("evicted"),
            "resets": int(sum(f.reset for f in self.frames)),
        }
        if self.max_diff is not None:
            agg["max_abs_diff"] = self.max_diff
        return agg

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "mode": self.mode,
            "tile": self.tile,
            "grid": list(self.grid) if self.grid else None,
            "frames": [asdict(f) for f in self.frames],
            "aggregate": self.aggregate(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def run_sequence(engine, frames, hs=None, compare=None, roi_masks=None) -> tuple[RunReport, list]:
    """Run ``engine`` over a sequence, optionally diffing against an oracle.

    ``compare`` is None, ``"dense"`` (dense inference on each aligned frame)
    or ``"fused-canvas"``.
    """
    hs = hs or [np.eye(3)] * len(frames)
    report = RunReport(mode=compare or "run", tile=engine.config.tile)
    canvas = FusedCanvas(engine.spec, engine.config.tile) if compare == "fused-canvas" else None
    results = []
    for i, (f, h) in enumerate(zip(frames, hs)):
        roi = None if roi_masks is None else roi_masks[i]
        r = engine.run_frame(f, h, roi)
        diff = None
        if compare == "dense":
            diff = float(np.abs(run_dense(engine.spec, r.aligned.image) - r.output).max())
        elif compare == "fused-canvas":
            if r.event["reset"]:
                canvas.reset()
            canvas.add(r.aligned)
            diff = float(np.abs(canvas.output(r.aligned) - r.output).max())
        elif compare is not None:
            raise ValueError(f"unknown comparison mode {compare!r}")
        report.add(i, r, diff)
        results.append(r)
    report.grid = engine.grid_dims
    return report, results
