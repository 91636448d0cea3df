"""Network description, validation, and the dense and delta executors."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import alignment
from .buffer_manager import BufferManager, inject_bias
from .delta_layers import (
    DeltaPacket,
    MaxPoolState,
    TruncationState,
    delta_add,
    delta_avgpool,
    delta_batchnorm_affine,
    delta_upsample_nearest,
    padded_delta_conv,
)
from .tensor_core import (
    DTYPE,
    ConvParams,
    FlopReport,
    ShapeError,
    as_tensor,
    count_conv_flops,
    dense_add,
    dense_avgpool,
    dense_batchnorm,
    dense_conv2d,
    dense_maxpool,
    dense_relu,
    dense_upsample_nearest,
    read_tensor,
    write_tensor,
)
from .tile_grid import GridSpec, reduce_to_tiles, tile_absmax

log = logging.getLogger(__name__)

KINDS = {"input", "conv", "relu", "maxpool", "avgpool", "upsample", "batchnorm", "add", "output"}
STATEFUL = {"input", "relu", "maxpool", "output"}
NET_SCHEMA = "deltastream-net/1"
WEIGHTS_SCHEMA = "deltastream-weights/1"


class GraphError(ValueError):
    pass


@dataclass
class Layer:
    name: str
    kind: str
    inputs: list = field(default_factory=list)
    conv: ConvParams | None = None
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None
    k: int = 2
    factor: int = 2
    threshold: float | None = None
    truncate: bool = True

    @property
    def bias(self):
        if self.kind == "conv":
            return self.conv.bias
        if self.kind == "batchnorm":
            return self.shift
        return None


@dataclass
class NetworkSpec:
    layers: list
    in_channels: int

    def __post_init__(self):
        if not any(layer.kind == "input" for layer in self.layers):
            self.layers.insert(0, Layer("input", "input"))

    def by_name(self) -> dict:
        return {layer.name: layer for layer in self.layers}


@dataclass
class EngineConfig:
    tile: int = 32
    grid: tuple | None = None  # (rows, cols); default frame tiles + 2 * ring + 1
    input_threshold: float = 0.15
    default_threshold: float = 0.02
    thresholds: dict = field(default_factory=dict)
    mask_dilation: int = 10
    noise_suppression: bool = False
    noise_window: int = 3
    noise_support: int = 2
    padded_convs: bool = True

    def __post_init__(self):
        if self.tile < 1:
            raise ValueError("tile must be >= 1")
        if self.input_threshold < 0 or self.default_threshold < 0 or any(v < 0 for v in self.thresholds.values()):
            raise ValueError("thresholds must be >= 0")

    @classmethod
    def exact(cls, **kw) -> "EngineConfig":
        """All thresholds and dilation zero: output must equal dense inference."""
        kw.setdefault("input_threshold", 0.0)
        kw.setdefault("default_threshold", 0.0)
        kw.setdefault("mask_dilation", 0)
        return cls(**kw)


@dataclass
class Graph:
    order: list
    layers: dict
    consumers: dict
    channels: dict
    scale: dict  # node -> Fraction, output resolution relative to input
    margin: dict  # node -> pixels of dilated output beyond the frame
    pre_state: set  # convs that need a truncation point on their input
    output: str

    def tile(self, name: str, input_tile: int) -> int:
        return int(input_tile * self.scale[name])

    def ring(self, input_tile: int) -> int:
        return max((math.ceil(m / self.tile(n, input_tile)) for n, m in self.margin.items()), default=0)

    def in_scale(self, name: str) -> Fraction:
        layer = self.layers[name]
        return self.scale[layer.inputs[0]] if layer.inputs else Fraction(1)


def _conv_margin(m: int, k: int, s: int) -> int:
    p = k // 2
    return max((m + k - 1 - p) // s, (s - 1 + p + m) // s)


def validate(spec: NetworkSpec, input_tile: int = 32, padded: bool = True) -> Graph:
    """Topologically order the graph and derive per-layer resolution, channels
    and border margins. Rejects cycles, dangling edges and layers reached at
    inconsistent resolutions."""
    layers = {}
    for layer in spec.layers:
        if layer.kind not in KINDS:
            raise GraphError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
        if layer.name in layers:
            raise GraphError(f"duplicate layer name {layer.name!r}")
        layers[layer.name] = layer
    inputs = [n for n, l in layers.items() if l.kind == "input"]
    outputs = [n for n, l in layers.items() if l.kind == "output"]
    if len(inputs) != 1 or len(outputs) != 1:
        raise GraphError("network needs exactly one input and one output layer")

    consumers = {n: [] for n in layers}
    for l in layers.values():
        want = {"input": 0, "add": 2}.get(l.kind, 1)
        if len(l.inputs) != want:
            raise GraphError(f"layer {l.name!r} ({l.kind}) needs {want} input(s), has {len(l.inputs)}")
        for src in l.inputs:
            if src not in layers:
                raise GraphError(f"layer {l.name!r}: dangling edge from {src!r}")
            consumers[src].append(l.name)

    # Kahn, stable in declaration order
    indeg = {n: len(l.inputs) for n, l in layers.items()}
    ready = [n for n in layers if indeg[n] == 0]
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for c in consumers[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(order) != len(layers):
        raise GraphError("network graph has a cycle")

    channels, scale, margin, pre = {}, {}, {}, set()
    for n in order:
        l = layers[n]
        src = l.inputs
        if l.kind == "input":
            channels[n], scale[n], margin[n] = spec.in_channels, Fraction(1), 0
            continue
        cin, sin, min_ = channels[src[0]], scale[src[0]], margin[src[0]]
        if l.kind == "conv":
            p = l.conv
            if p.in_channels != cin:
                raise GraphError(f"conv {n!r} expects {p.in_channels} channels, gets {cin}")
            if p.kernel_h != p.kernel_w:
                raise GraphError(f"conv {n!r}: only square kernels are supported")
            if p.padding != p.kernel_h // 2:
                raise GraphError(f"conv {n!r}: padding must be kernel // 2")
            if p.kernel_h > 1 and min_ > 0:
                pre.add(n)
                min_ = 0
            channels[n], scale[n] = p.out_channels, sin / p.stride
            margin[n] = _conv_margin(min_, p.kernel_h, p.stride) if padded else 0
        elif l.kind in ("maxpool", "avgpool"):
            channels[n], scale[n] = cin, sin / l.k
            margin[n] = 0 if l.kind == "maxpool" else math.ceil(min_ / l.k)
        elif l.kind == "upsample":
            channels[n], scale[n], margin[n] = cin, sin * l.factor, min_ * l.factor
        elif l.kind == "batchnorm":
            if l.scale is None or len(l.scale) != cin or l.shift is None or len(l.shift) != cin:
                raise GraphError(f"batchnorm {n!r} needs per-channel scale and shift")
            channels[n], scale[n], margin[n] = cin, sin, min_
        elif l.kind == "add":
            a, b = src
            if channels[a] != channels[b] or scale[a] != scale[b]:
                raise GraphError(
                    f"add {n!r} joins inputs of different shape/stride "
                    f"({channels[a]}ch @1/{1 / scale[a]} vs {channels[b]}ch @1/{1 / scale[b]})"
                )
            channels[n], scale[n], margin[n] = cin, sin, max(margin[a], margin[b])
        else:  # relu, output
            channels[n], scale[n], margin[n] = cin, sin, 0
        t = input_tile * scale[n]
        if t.denominator != 1 or t < 1:
            raise GraphError(
                f"layer {n!r}: tile size {input_tile} is not divisible by the cumulative stride "
                f"(would be {float(t):g} pixels)"
            )
    return Graph(order, layers, consumers, channels, scale, margin, pre, outputs[0])


def run_dense(spec: NetworkSpec, frame: np.ndarray, overrides=None, post=None, taps=None) -> np.ndarray:
    """Plain dense execution.

    ``overrides`` maps layer name -> tensor to use as that layer's output;
    ``post(name, tensor)`` may transform each layer's output; ``taps`` (a
    dict) receives every layer's output.
    """
    graph = validate(spec, 1 << 20)
    outs = {}
    for n in graph.order:
        l = graph.layers[n]
        x = [outs[s] for s in l.inputs]
        if overrides and n in overrides:
            y = as_tensor(overrides[n])
        elif l.kind == "input":
            y = as_tensor(frame)
            if y.shape[0] != spec.in_channels:
                raise ShapeError(f"frame has {y.shape[0]} channels, network expects {spec.in_channels}")
        elif l.kind == "conv":
            y = dense_conv2d(x[0], l.conv)
        elif l.kind == "relu":
            y = dense_relu(x[0])
        elif l.kind == "maxpool":
            y = dense_maxpool(x[0], l.k, l.k)
        elif l.kind == "avgpool":
            y = dense_avgpool(x[0], l.k, l.k)
        elif l.kind == "upsample":
            y = dense_upsample_nearest(x[0], l.factor)
        elif l.kind == "batchnorm":
            y = dense_batchnorm(x[0], l.scale, l.shift)
        elif l.kind == "add":
            y = dense_add(x[0], x[1])
        else:
            y = x[0]
        if post is not None:
            y = post(n, y)
        outs[n] = y
        if taps is not None:
            taps[n] = y
    return outs[graph.output]


@dataclass
class FrameResult:
    output: np.ndarray
    flops: FlopReport
    event: dict
    update_rate: float
    aligned: alignment.AlignedFrame
    input_mask: np.ndarray


class DeltaEngine:
    """Processes a video stream one frame at a time, propagating only deltas."""

    def __init__(self, spec: NetworkSpec, config: EngineConfig | None = None):
        self.spec = spec
        self.config = config or EngineConfig()
        self.graph = validate(spec, self.config.tile, self.config.padded_convs)
        self.ring = self.graph.ring(self.config.tile)
        self.states: dict = {}
        self.manager: BufferManager | None = None
        self._implicit = {}
        for n in self.graph.order:
            l = self.graph.layers[n]
            cons = self.graph.consumers[n]
            if l.bias is not None and len(cons) == 1 and self.graph.layers[cons[0]].kind in ("relu", "output"):
                self._implicit[n] = cons[0]

    def threshold(self, name: str) -> float:
        l = self.graph.layers[name]
        if l.kind == "output" or not l.truncate:
            return 0.0
        if name in self.config.thresholds:
            return self.config.thresholds[name]
        if l.kind == "input":
            return self.config.input_threshold
        return l.threshold if l.threshold is not None else self.config.default_threshold

    def _build(self, tiles_h: int, tiles_w: int):
        if self.config.grid is not None:
            rows, cols = self.config.grid
        else:
            # ring on both sides plus one tile for sub-tile misalignment
            pad = 2 * max(self.ring, 1) + 1
            rows, cols = tiles_h + pad, tiles_w + pad
        self.manager = BufferManager(rows, cols, self.ring)
        T = self.config.tile
        g = self.graph
        for n in g.order:
            l = g.layers[n]
            if l.kind in ("input", "relu", "output"):
                t = g.tile(n, T)
                kind = "relu" if l.kind == "relu" else "identity"
                self.states[n] = TruncationState(GridSpec(t, t, rows, cols), g.channels[n], self.threshold(n), kind)
            elif l.kind == "maxpool":
                t = g.tile(l.inputs[0], T)
                self.states[n] = MaxPoolState(GridSpec(t, t, rows, cols), g.channels[n], l.k)
            elif n in g.pre_state:
                t = g.tile(l.inputs[0], T)
                src = l.inputs[0]
                self.states[n + ".in"] = TruncationState(GridSpec(t, t, rows, cols), g.channels[src], 0.0, "identity")

    @property
    def grid_dims(self):
        m = self.manager
        return (m.ledger.grid_rows, m.ledger.grid_cols) if m else None

    def run_frame(self, frame: np.ndarray, h=None, roi_mask=None) -> FrameResult:
        cfg, g = self.config, self.graph
        h = np.eye(3) if h is None else h
        aligned = alignment.align_frame(frame, h, cfg.tile)
        if self.manager is None:
            self._build(aligned.placement.tiles_h, aligned.placement.tiles_w)
        aligned = alignment.crop_to_tiles(aligned, *self.grid_dims)
        if aligned.cropped:
            log.warning("aligned frame exceeds buffer, cropped %d pixels", aligned.cropped)

        plan = self.manager.plan(aligned.placement)
        self.manager.apply_plan(plan, self.states.values())
        event = self.manager.log_event(plan, aligned.cropped)
        ft = plan.frame_tiles(*self.grid_dims)

        for n, consumer in self._implicit.items():
            inject_bias(plan, g.layers[n].bias, state=self.states[consumer])

        packets = {}
        if roi_mask is not None:
            roi_mask = self._align_mask(roi_mask, h, aligned)
        packets["input"], input_mask = self._input_stage(aligned, ft, roi_mask)
        flops = FlopReport()
        for n in g.order:
            l = g.layers[n]
            if l.kind == "input":
                continue
            src = [packets[s] for s in l.inputs]
            if l.kind == "conv":
                x = src[0]
                if n in g.pre_state:
                    x = self.states[n + ".in"].process(x, ft)
                y, processed = padded_delta_conv(x, l.conv, ft, cfg.padded_convs)
                tout = y.tile
                core = aligned.placement
                rect_h, rect_w = ft.rect.tiles_h * tout, ft.rect.tiles_w * tout
                core_h, core_w = core.tiles_h * tout, core.tiles_w * tout
                flops.add(n, count_conv_flops(l.conv, rect_h, rect_w, processed),
                          count_conv_flops(l.conv, core_h, core_w, core_h * core_w))
            elif l.kind in ("relu", "output", "maxpool"):
                y = self.states[n].process(src[0], ft)
            elif l.kind == "avgpool":
                y = delta_avgpool(src[0], l.k)
            elif l.kind == "upsample":
                y = delta_upsample_nearest(src[0], l.factor)
            elif l.kind == "batchnorm":
                y = delta_batchnorm_affine(src[0], l.scale)
            else:
                y = delta_add(src[0], src[1])
            if l.bias is not None and n not in self._implicit:
                inject_bias(plan, l.bias, packet=y, ft=ft)
            packets[n] = y

        out = self.states[g.output].densify(aligned.placement)
        rate = float(input_mask.mean())
        return FrameResult(out, flops, event, rate, aligned, input_mask)

    def _align_mask(self, mask, h, aligned):
        """Bring a frame-resolution ROI mask onto the aligned canvas."""
        m = np.asarray(mask, dtype=DTYPE)
        if m.shape == aligned.image.shape[1:]:
            return m
        am = alignment.align_frame(m[None], h, self.config.tile)
        T, p, q = self.config.tile, aligned.placement, am.placement
        out = np.zeros(aligned.image.shape[1:], dtype=DTYPE)
        r0, c0 = (p.origin.ty - q.origin.ty) * T, (p.origin.tx - q.origin.tx) * T
        src = am.image[0, max(r0, 0):r0 + out.shape[0], max(c0, 0):c0 + out.shape[1]]
        out[max(-r0, 0):max(-r0, 0) + src.shape[0], max(-c0, 0):max(-c0, 0) + src.shape[1]] = src
        return out

    def _input_stage(self, aligned, ft, roi_mask):
        cfg = self.config
        st = self.states["input"]
        T = cfg.tile
        core = aligned.placement
        acc = st.accumulated.read_region(core)
        cand = alignment.compute_input_delta(aligned, acc)
        pix = alignment.update_pixels(
            cand, st.threshold, roi_mask, cfg.noise_suppression, cfg.mask_dilation,
            cfg.noise_window, cfg.noise_support,
        )
        rs, cs = ft.core_slice
        live = reduce_to_tiles(aligned.valid, T, T)
        fire = (reduce_to_tiles(pix, T, T) | ft.unveiled[rs, cs]) & live & (tile_absmax(cand, T, T) > 0)
        out, acc, trunc = st.commit(acc, cand, fire)
        st.accumulated.write_region(core, acc)
        st.truncated.write_region(core, trunc)
        pkt = DeltaPacket.empty(st.channels, ft, T)
        pkt.core(ft)[...] = out
        pkt.mask[rs, cs] = fire
        return pkt, fire

    def run_dense_frame(self, frame: np.ndarray, h=None) -> np.ndarray:
        """Dense reference for the aligned version of ``frame``."""
        h = np.eye(3) if h is None else h
        aligned = alignment.align_frame(frame, h, self.config.tile)
        return run_dense(self.spec, aligned.image)


# -- serialisation ---------------------------------------------------------

def _store(tensors: dict, key: str, arr: np.ndarray):
    tensors[key] = np.asarray(arr, dtype=DTYPE)
    return key


def save_network(spec: NetworkSpec, directory, net_name="net.json", manifest_name="weights.json"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors, layers = {}, []
    for l in spec.layers:
        if l.kind == "input":
            continue
        e = {"name": l.name, "kind": l.kind}
        if l.kind == "add":
            e["inputs"] = list(l.inputs)
        else:
            e["input"] = l.inputs[0]
        if l.kind == "conv":
            e.update(kernel=l.conv.kernel_h, stride=l.conv.stride, out_channels=l.conv.out_channels,
                     weight=_store(tensors, f"{l.name}.weight", l.conv.weights))
            if l.conv.bias is not None:
                e["bias"] = _store(tensors, f"{l.name}.bias", l.conv.bias)
        elif l.kind == "batchnorm":
            e["scale"] = _store(tensors, f"{l.name}.scale", l.scale)
            e["shift"] = _store(tensors, f"{l.name}.shift", l.shift)
        elif l.kind in ("maxpool", "avgpool"):
            e["k"] = l.k
        elif l.kind == "upsample":
            e["factor"] = l.factor
        elif l.kind == "relu":
            e["truncate"] = l.truncate
            if l.threshold is not None:
                e["threshold"] = l.threshold
        layers.append(e)
    manifest = {"schema": WEIGHTS_SCHEMA, "tensors": {}}
    for key, arr in tensors.items():
        fname = f"{key}.dflx"
        write_tensor(d / fname, arr.reshape(1, 1, -1))
        manifest["tensors"][key] = {"file": fname, "shape": list(arr.shape)}
    (d / net_name).write_text(json.dumps({"schema": NET_SCHEMA, "input": {"channels": spec.in_channels},
                                          "layers": layers}, indent=2))
    (d / manifest_name).write_text(json.dumps(manifest, indent=2))
    return d / net_name, d / manifest_name


def load_weights(manifest_path) -> dict:
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    if m.get("schema") != WEIGHTS_SCHEMA:
        raise GraphError(f"{manifest_path}: expected schema {WEIGHTS_SCHEMA!r}")
    out = {}
    for key, e in m["tensors"].items():
        arr = read_tensor(manifest_path.parent / e["file"])
        shape = tuple(e["shape"])
        if arr.size != int(np.prod(shape)):
            raise GraphError(f"{manifest_path}: tensor {key!r} holds {arr.size} values, manifest says {shape}")
        out[key] = arr.reshape(shape)
    return out


def load_network(net_path, manifest_path) -> NetworkSpec:
    net_path = Path(net_path)
    cfg = json.loads(net_path.read_text())
    if cfg.get("schema") != NET_SCHEMA:
        raise GraphError(f"{net_path}: expected schema {NET_SCHEMA!r}")
    w = load_weights(manifest_path)

    def tensor(key):
        if key not in w:
            raise GraphError(f"{net_path}: weight {key!r} missing from manifest")
        return w[key]

    layers = [Layer("input", "input")]
    for e in cfg["layers"]:
        kind = e["kind"]
        inputs = e["inputs"] if "inputs" in e else [e["input"]]
        l = Layer(e["name"], kind, list(inputs))
        if kind == "conv":
            l.conv = ConvParams(tensor(e["weight"]), tensor(e["bias"]) if "bias" in e else None,
                                stride=e.get("stride", 1))
        elif kind == "batchnorm":
            l.scale, l.shift = tensor(e["scale"]), tensor(e["shift"])
        elif kind in ("maxpool", "avgpool"):
            l.k = e.get("k", 2)
        elif kind == "upsample":
            l.factor = e.get("factor", 2)
        elif kind == "relu":
            l.truncate = e.get("truncate", True)
            l.threshold = e.get("threshold")
        layers.append(l)
    return NetworkSpec(layers, cfg["input"]["channels"])
