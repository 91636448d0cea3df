"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor_core import DTYPE, read_tensor


def _tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset of the raster."""
    toks, i = [], 0
    while len(toks) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PNM header")
        toks.append(data[i:j])
        i = j
    return toks, i + 1  # exactly one whitespace byte before the raster


def read_pnm(path) -> np.ndarray:
    """Load P5/P6 as a CHW float32 tensor normalised to [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _tokens(data, 4)
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise ValueError(f"{path}: unsupported PNM type {magic!r} (need P5 or P6)")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PNM is supported")
    n = w * h * channels
    raster = np.frombuffer(data, dtype=np.uint8, count=n, offset=off)
    return (raster.reshape(h, w, channels).transpose(2, 0, 1) / DTYPE(maxval)).astype(DTYPE)


def write_pnm(path, t: np.ndarray):
    """Write a 1- or 3-channel tensor in [0, 1] as P5/P6."""
    t = np.asarray(t)
    if t.ndim == 2:
        t = t[None]
    c, h, w = t.shape
    if c not in (1, 3):
        raise ValueError("PNM needs 1 or 3 channels")
    raster = np.clip(np.round(t * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(b"P5" if c == 1 else b"P6")
        f.write(f"\n{w} {h}\n255\n".encode())
        f.write(raster.tobytes())


def read_frame(path) -> np.ndarray:
    path = Path(path)
    if path.suffix in (".ppm", ".pgm", ".pnm"):
        return read_pnm(path)
    return read_tensor(path)


def list_frames(directory) -> list[Path]:
    d = Path(directory)
    files = sorted(p for p in d.iterdir() if p.suffix in (".ppm", ".pgm", ".pnm", ".dflx"))
    if not files:
        raise FileNotFoundError(f"no frames (*.ppm, *.pgm, *.dflx) in {d}")
    return files
