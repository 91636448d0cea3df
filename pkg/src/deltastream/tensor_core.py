"""Dense CHW tensors, dense reference layers and FLOP accounting.

Feature maps are plain ``numpy`` arrays of shape ``(C, H, W)`` and dtype
float32. The dense layers here are the correctness oracle for the sparse
delta path.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
TENSOR_MAGIC = b"DFLX"
TENSOR_VERSION = 1


class ShapeError(ValueError):
    pass


def as_tensor(data) -> np.ndarray:
    """Coerce to a contiguous float32 CHW array, validating the shape."""
    t = np.ascontiguousarray(data, dtype=DTYPE)
    if t.ndim != 3 or min(t.shape) < 1:
        raise ShapeError(f"expected a non-empty (C, H, W) tensor, got shape {t.shape}")
    return t


@dataclass
class ConvParams:
    weights: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=DTYPE)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be O-I-Kh-Kw, got shape {self.weights.shape}")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE).reshape(-1)
            if self.bias.shape[0] != self.out_channels:
                raise ShapeError("bias length must equal out_channels")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ValueError("only odd kernel sizes are supported")
        if self.padding is None:
            self.padding = self.kernel_h // 2

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]


def conv_raw(x: np.ndarray, weights: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation without bias.

    Summation runs in a fixed order (einsum without BLAS) so results are
    bit-identical however the caller splits the work.
    """
    kh, kw = weights.shape[2:]
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_h = (x.shape[1] - kh) // stride + 1
    out_w = (x.shape[2] - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("convolution output would be empty")
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :out_h, :out_w]
    out = np.zeros((weights.shape[0], out_h, out_w), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("oc,chw->ohw", weights[:, :, i, j], win[:, :, :, i, j])
    return out


def dense_conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[0] != params.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, conv expects {params.in_channels}")
    out = conv_raw(x, params.weights, params.stride, params.padding)
    if params.bias is not None:
        out += params.bias[:, None, None]
    return out


def dense_relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(as_tensor(x), DTYPE(0))


def _pool_windows(x, k, stride):
    out_h = (x.shape[1] - k) // stride + 1
    out_w = (x.shape[2] - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("pooling output would be empty")
    return sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :out_h, :out_w]


def dense_maxpool(x: np.ndarray, k: int, stride: int | None = None) -> np.ndarray:
    x = as_tensor(x)
    return np.ascontiguousarray(_pool_windows(x, k, stride or k).max(axis=(3, 4)))


def dense_avgpool(x: np.ndarray, k: int, stride: int | None = None) -> np.ndarray:
    x = as_tensor(x)
    w = _pool_windows(x, k, stride or k)
    # fixed summation order, then a single division
    s = np.zeros(w.shape[:3], dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            s += w[..., i, j]
    return s / DTYPE(k * k)


def dense_upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    x = as_tensor(x)
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def dense_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shape {a.shape} and {b.shape}")
    return a + b


def dense_batchnorm(x: np.ndarray, scale, shift) -> np.ndarray:
    """Inference-mode batchnorm with folded statistics: ``scale * x + shift``."""
    x = as_tensor(x)
    scale = np.asarray(scale, dtype=DTYPE).reshape(-1)
    shift = np.asarray(shift, dtype=DTYPE).reshape(-1)
    if scale.shape[0] != x.shape[0] or shift.shape[0] != x.shape[0]:
        raise ShapeError("batchnorm parameters must have one entry per channel")
    return x * scale[:, None, None] + shift[:, None, None]


def count_conv_flops(params: ConvParams, out_h: int, out_w: int, processed_pixels: int) -> int:
    """One multiply-add counts as two FLOPs; bias is not counted."""
    if processed_pixels > out_h * out_w:
        raise ValueError("processed_pixels exceeds the output size")
    return 2 * params.kernel_h * params.kernel_w * params.in_channels * params.out_channels * int(processed_pixels)


@dataclass
class FlopReport:
    per_layer: dict[str, int] = field(default_factory=dict)
    dense_per_layer: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, flops: int, dense_flops: int):
        self.per_layer[name] = self.per_layer.get(name, 0) + int(flops)
        self.dense_per_layer[name] = self.dense_per_layer.get(name, 0) + int(dense_flops)

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())

    @property
    def dense_total(self) -> int:
        return sum(self.dense_per_layer.values())

    @property
    def ratio(self) -> float:
        return self.total / self.dense_total if self.dense_total else 0.0

    def to_dict(self) -> dict:
        return {
            "per_layer": dict(self.per_layer),
            "total": self.total,
            "dense_total": self.dense_total,
            "ratio": self.ratio,
        }


def write_tensor(path, t: np.ndarray):
    t = as_tensor(t)
    c, h, w = t.shape
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC + struct.pack("<IIII", TENSOR_VERSION, c, h, w))
        f.write(t.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor file (bad magic)")
    version, c, h, w = struct.unpack("<IIII", data[4:20])
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported tensor file version {version}")
    n = c * h * w
    if len(data) != 20 + 4 * n:
        raise ValueError(f"{path}: expected {n} floats, file holds {(len(data) - 20) // 4}")
    return np.frombuffer(data, dtype="<f4", offset=20).astype(DTYPE).reshape(c, h, w)
