"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerical code; the loops are written
for obviousness, not speed.
"""

import struct

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    """Cross-correlation with zero padding, six nested loops."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0 if b is None else float(b[o])
                for c in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            y = i * stride + di - padding
                            xx = j * stride + dj - padding
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += x[c, y, xx] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def maxpool_loops(x, k):
    c, h, w = x.shape
    out = np.zeros((c, h // k, w // k))
    for ch in range(c):
        for i in range(h // k):
            for j in range(w // k):
                out[ch, i, j] = max(x[ch, i * k + a, j * k + bb] for a in range(k) for bb in range(k))
    return out


def toy_net_loops(x, params):
    """conv3x3 + bias -> relu -> conv1x1 + bias."""
    w1, b1, w2, b2 = params
    y = conv2d_loops(x, w1, b1, 1, 1)
    y = np.maximum(y, 0.0)
    return conv2d_loops(y, w2, b2, 1, 0)


def toy_net_params(seed=42):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32)
    w1 = rng.normal(0, 0.5, (4, 3, 3, 3)).astype(np.float32)
    b1 = rng.normal(0, 0.1, 4).astype(np.float32)
    w2 = rng.normal(0, 0.5, (2, 4, 1, 1)).astype(np.float32)
    b2 = rng.normal(0, 0.1, 2).astype(np.float32)
    return x, (w1, b1, w2, b2)


def write_dflx(path, t):
    t = np.asarray(t, dtype="<f4")
    c, h, w = t.shape
    with open(path, "wb") as f:
        f.write(b"DFLX" + struct.pack("<IIII", 1, c, h, w) + t.tobytes())


def read_dflx(path):
    with open(path, "rb") as f:
        data = f.read()
    assert data[:4] == b"DFLX"
    _, c, h, w = struct.unpack("<IIII", data[4:20])
    return np.frombuffer(data[20:], dtype="<f4").reshape(c, h, w)


class DictSphere:
    """Spherical buffer reference: a dict from global tile to pixels, plus an
    explicit slot table so collisions evict exactly like modulo storage."""

    def __init__(self, rows, cols, tile, channels):
        self.rows, self.cols, self.tile, self.channels = rows, cols, tile, channels
        self.slots = {}  # (ty % rows, tx % cols) -> (tx, ty)
        self.tiles = {}  # (tx, ty) -> array

    def _get(self, tx, ty):
        slot = (ty % self.rows, tx % self.cols)
        owner = self.slots.get(slot)
        if owner is None:
            return np.zeros((self.channels, self.tile, self.tile), np.float32)
        # storage is shared: a congruent tile sees the current owner's pixels
        return self.tiles[owner]

    def _set(self, tx, ty, px):
        slot = (ty % self.rows, tx % self.cols)
        owner = self.slots.get(slot)
        if owner is not None and owner != (tx, ty):
            del self.tiles[owner]
        self.slots[slot] = (tx, ty)
        self.tiles[(tx, ty)] = px.astype(np.float32).copy()

    def read(self, ox, oy, th, tw):
        t = self.tile
        out = np.zeros((self.channels, th * t, tw * t), np.float32)
        for i in range(th):
            for j in range(tw):
                out[:, i * t:(i + 1) * t, j * t:(j + 1) * t] = self._get(ox + j, oy + i)
        return out

    def write(self, ox, oy, data):
        t = self.tile
        for i in range(data.shape[1] // t):
            for j in range(data.shape[2] // t):
                self._set(ox + j, oy + i, data[:, i * t:(i + 1) * t, j * t:(j + 1) * t])

    def accumulate(self, ox, oy, data, mask=None):
        t = self.tile
        for i in range(data.shape[1] // t):
            for j in range(data.shape[2] // t):
                if mask is not None and not mask[i, j]:
                    continue
                cur = self._get(ox + j, oy + i)
                self._set(ox + j, oy + i, cur + data[:, i * t:(i + 1) * t, j * t:(j + 1) * t])

    def reset(self, local):
        owner = self.slots.pop(local, None)
        if owner is not None:
            del self.tiles[owner]


class LedgerSim:
    """Brute-force allocation model: an unbounded map of live global tiles
    plus the full history of evictions. A tile that is not live lies in a
    restricted region if some eviction happened on its far side relative to
    the tile that caused it."""

    def __init__(self, rows, cols, ring):
        self.rows, self.cols, self.ring = rows, cols, ring
        self.live = {}  # (tx, ty) -> "content" | "ring"
        self.evictions = []  # ((tx, ty) evicted, (tx, ty) evictor)

    def slot(self, c):
        return (c[1] % self.rows, c[0] % self.cols)

    def restricted(self, c):
        for (ex, ey), (bx, by) in self.evictions:
            if (bx > ex and c[0] <= ex) or (bx < ex and c[0] >= ex):
                return True
            if (by > ey and c[1] <= ey) or (by < ey and c[1] >= ey):
                return True
        return False

    def step(self, ox, oy, th, tw):
        core = [(ox + j, oy + i) for i in range(th) for j in range(tw)]
        taken = {self.slot(c) for c in core}
        ring = []
        r = self.ring
        for i in range(-r, th + r):
            for j in range(-r, tw + r):
                c = (ox + j, oy + i)
                if 0 <= i < th and 0 <= j < tw:
                    continue
                if self.slot(c) not in taken:
                    taken.add(self.slot(c))
                    ring.append(c)
        reset = any(c not in self.live and self.restricted(c) for c in core + ring)
        if reset:
            self.live.clear()
            self.evictions.clear()
        fresh, evicted = set(), 0
        for c, kind in [(c, "content") for c in core] + [(c, "ring") for c in ring]:
            if c in self.live:
                if kind == "content":
                    self.live[c] = kind
                continue
            for v in [v for v in self.live if self.slot(v) == self.slot(c)]:
                del self.live[v]
                self.evictions.append((v, c))
                evicted += 1
            self.live[c] = kind
            fresh.add(self.slot(c))
        return reset, fresh, evicted
