"""Command-line front end.

Exit codes: 0 success, 1 comparison exceeded ``--tolerance``, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .alignment import (
    SingularHomography,
    integer_translation,
    load_homographies,
    save_homographies,
)
from .imageio import list_frames, read_frame, read_pnm, write_pnm
from .network import DeltaEngine, EngineConfig, GraphError, load_network, validate
from .tensor_core import ShapeError, count_conv_flops, write_tensor
from .tile_grid import expand_tile_mask

log = logging.getLogger("deltastream")

EXIT_OK, EXIT_TOLERANCE, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def parse_grid(text: str | None):
    if text is None:
        return None
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise InputError(f"--grid expects ROWSxCOLS, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise InputError("--grid dimensions must be positive")
    return rows, cols


def parse_thresholds(text: str | None):
    """Returns (default, per-layer dict).

    Accepts a single number (all truncation points), a comma list of
    ``name=value`` pairs with an optional bare default, or a path to a JSON
    object / ``name value`` lines file.
    """
    if text is None:
        return None, {}
    path = Path(text)
    if path.is_file():
        body = path.read_text()
        try:
            data = json.loads(body)
            pairs = [f"{k}={v}" for k, v in data.items()]
        except json.JSONDecodeError:
            pairs = [" ".join(l.split("#", 1)[0].split()).replace(" ", "=") for l in body.splitlines()]
    else:
        pairs = text.split(",")
    default, per = None, {}
    for p in pairs:
        p = p.strip()
        if not p:
            continue
        try:
            if "=" in p:
                k, v = p.split("=", 1)
                per[k.strip()] = float(v)
            else:
                default = float(p)
        except ValueError:
            raise InputError(f"bad threshold entry {p!r}") from None
    if any(v < 0 for v in per.values()) or (default is not None and default < 0):
        raise InputError("thresholds must be >= 0")
    return default, per


def build_config(args) -> EngineConfig:
    default, per = parse_thresholds(args.thresholds)
    kw = dict(tile=args.tile_size, grid=parse_grid(args.grid),
              noise_suppression=args.noise_suppression == "on", mask_dilation=args.mask_dilation)
    if default is not None:
        kw["input_threshold"] = default
        kw["default_threshold"] = default
    if "input" in per:
        kw["input_threshold"] = per["input"]
    kw["thresholds"] = per
    try:
        return EngineConfig(**kw)
    except ValueError as e:
        raise InputError(str(e)) from None


def load_inputs(args):
    if not args.net or not args.weights:
        raise InputError("--net and --weights are required")
    spec = load_network(args.net, args.weights)
    if not args.frames:
        raise InputError("--frames is required")
    paths = list_frames(args.frames)
    frames = [read_frame(p) for p in paths]
    if args.homographies:
        hs = load_homographies(args.homographies)
        if len(hs) != len(frames):
            raise InputError(f"{len(hs)} homographies for {len(frames)} frames")
    else:
        hs = [np.eye(3)] * len(frames)
    roi = None
    if args.roi_mask:
        m = read_pnm(args.roi_mask)[0] > 0.5
        roi = [m] * len(frames)
    return spec, paths, frames, hs, roi


def write_outputs(out_dir: Path, report, results, engine, debug: bool):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "outputs").mkdir(exist_ok=True)
    (out_dir / "masks").mkdir(exist_ok=True)
    t = engine.config.tile
    for i, r in enumerate(results):
        write_tensor(out_dir / "outputs" / f"frame_{i:04d}.dflx", r.output)
        write_pnm(out_dir / "masks" / f"frame_{i:04d}.pgm", expand_tile_mask(r.input_mask, t, t).astype(np.float32))
    if debug:
        d = out_dir / "debug"
        d.mkdir(exist_ok=True)
        held = {k: v[0] for k, v in engine.manager.ledger.held.items()}
        for name, st in engine.states.items():
            for buf in ("accumulated", "truncated", "prev_out"):
                if hasattr(st, buf):
                    getattr(st, buf).dump(d / f"{name}.{buf}.dflx", held)
    (out_dir / "report.json").write_text(report.to_json() + "\n")


def cmd_run(args, compare=None) -> int:
    spec, _, frames, hs, roi = load_inputs(args)
    config = build_config(args)
    if compare == "fused-canvas":
        for i, h in enumerate(hs):
            if integer_translation(h) is None:
                raise InputError(f"fused-canvas comparison needs integer translations; homography {i} is not")
    engine = DeltaEngine(spec, config)
    report, results = harness.run_sequence(engine, frames, hs, compare, roi)
    if args.out_dir:
        write_outputs(Path(args.out_dir), report, results, engine, args.debug)
    print(json.dumps(report.aggregate(), sort_keys=True))
    if compare is not None and report.max_diff is not None and report.max_diff > args.tolerance:
        log.error("max abs diff %.3g exceeds tolerance %.3g", report.max_diff, args.tolerance)
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.num_frames < 1 or args.height < 1 or args.width < 1:
        raise InputError("frame count and size must be positive")
    frames, hs = harness.synth(args.kind, n_frames=args.num_frames, height=args.height, width=args.width,
                               pan=args.pan, amplitude=args.amplitude, seed=args.seed, channels=args.channels)
    out = Path(args.out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_pnm(out / "frames" / f"frame_{i:04d}.{'ppm' if f.shape[0] == 3 else 'pgm'}", f)
    save_homographies(out / "homographies.txt", hs)
    print(f"wrote {len(frames)} frames to {out / 'frames'}")
    return EXIT_OK


def cmd_flops(args) -> int:
    """Dense conv FLOPs per layer for the first frame's size."""
    if not args.net or not args.weights:
        raise InputError("--net and --weights are required")
    spec = load_network(args.net, args.weights)
    if args.frames:
        _, h, w = read_frame(list_frames(args.frames)[0]).shape
    else:
        h, w = args.height, args.width
    g = validate(spec, args.tile_size)
    per = {}
    for n in g.order:
        l = g.layers[n]
        if l.kind == "conv":
            s = g.in_scale(n) / l.conv.stride
            oh, ow = int(h * s), int(w * s)
            per[n] = count_conv_flops(l.conv, oh, ow, oh * ow)
    print(json.dumps({"height": h, "width": w, "per_layer": per, "total": sum(per.values())}, indent=2))
    return EXIT_OK


def _common(p):
    p.add_argument("--net", help="network description (JSON)")
    p.add_argument("--weights", help="weight manifest (JSON)")
    p.add_argument("--frames", help="directory of PPM/PGM/.dflx frames, read in sorted order")
    p.add_argument("--homographies", help="text file, one row-major 3x3 homography per line")
    p.add_argument("--tile-size", type=int, default=32)
    p.add_argument("--grid", help="buffer grid as ROWSxCOLS (default: frame tiles + ring + slack)")
    p.add_argument("--thresholds", help="number, name=value comma list, or file")
    p.add_argument("--roi-mask", help="PGM mask (white = region of interest)")
    p.add_argument("--noise-suppression", choices=("on", "off"), default="off")
    p.add_argument("--mask-dilation", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir")
    p.add_argument("--debug", action="store_true", help="also dump every layer buffer")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deltastream", description="Sparse delta CNN inference on video.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a sequence and report update rates and FLOPs")
    _common(p)
    p.add_argument("--compare-dense", action="store_true", help="diff every frame against dense inference")

    p = sub.add_parser("compare", help="diff against an oracle; exit 1 if over --tolerance")
    _common(p)
    p.add_argument("--mode", choices=("dense", "fused-canvas"), default="dense")

    p = sub.add_parser("synth", help="write a synthetic frame sequence and homographies")
    p.add_argument("--kind", choices=("pan", "zoomless-static", "noise-field", "moving-object"), default="pan")
    p.add_argument("--num-frames", type=int, default=8)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.add_argument("--pan", type=int, default=0, help="camera pan in pixels per frame")
    p.add_argument("--amplitude", type=float, default=0.05, help="noise-field amplitude")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("flops", help="dense conv FLOPs per layer")
    _common(p)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args, "dense" if args.compare_dense else None)
        if args.command == "compare":
            return cmd_run(args, args.mode)
        if args.command == "synth":
            return cmd_synth(args)
        return cmd_flops(args)
    except (InputError, GraphError, ShapeError, SingularHomography, OSError, ValueError, KeyError) as e:
        log.error("%s", e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
