"""Lightweight two-frame coarse-to-fine flow network.

A siamese feature pyramid feeds, at every level, a warp + correlation cost
volume into one flow decoder shared by all levels.  A per-level 1x1
alignment convolution maps each level's input to the decoder's fixed input
width.  Decoder layers only see the outputs of the two layers before them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .flowcore import warp
from .tensor import ContractError, Tensor

CKPT_MAGIC = b"ARFW"
CKPT_VERSION = 1
LEAK = 0.1


class CheckpointError(ValueError):
    """A checkpoint file is malformed; ``offset`` is where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class NetConfig:
    levels: int = 4
    encoder_widths: tuple[int, ...] = (16, 32, 32, 32)
    decoder_widths: tuple[int, ...] = (96, 64, 32, 16, 2)
    align_width: int = 32
    radius: int = 4
    in_channels: int = 3
    shared_decoder: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.encoder_widths) != self.levels:
            raise ContractError("one encoder width per pyramid level is required")
        if len(self.decoder_widths) < 2 or self.decoder_widths[-1] != 2:
            raise ContractError("decoder must have at least 2 layers and end in 2 channels")
        if self.radius < 0 or self.levels < 1:
            raise ContractError("radius must be >= 0 and levels >= 1")


@dataclass
class PyramidFeatures:
    """Feature grids, finest level first (level 1 has half the input extent)."""

    levels: list[Tensor] = field(default_factory=list)

    @property
    def widths(self) -> list[int]:
        return [x.shape[-1] for x in self.levels]


class FlowNetwork:
    """Parameters and architecture of the flow network.

    ``params`` maps names to leaf tensors; with a shared decoder every level
    refers to the same ``decoder.*`` tensors.
    """

    def __init__(self, cfg: NetConfig | None = None, seed: int = 0):
        self.cfg = cfg or NetConfig()
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        dtype = np.dtype(self.cfg.dtype)
        c = self.cfg
        prev = c.in_channels
        for lvl, width in enumerate(c.encoder_widths, start=1):
            self._conv(rng, f"enc.l{lvl}.down", 4, prev, width, dtype)
            self._conv(rng, f"enc.l{lvl}.conv", 3, width, width, dtype)
            prev = width
        cost = (2 * c.radius + 1) ** 2
        for lvl, width in enumerate(c.encoder_widths, start=1):
            self._conv(rng, f"align.l{lvl}", 1, width + 2 + cost, c.align_width, dtype)
        prefixes = ["decoder"] if c.shared_decoder else [f"decoder.l{lvl}" for lvl in range(1, c.levels + 1)]
        for prefix in prefixes:
            for k, (cin, cout) in enumerate(self.decoder_layer_shapes()):
                last = k == len(c.decoder_widths) - 1
                self._conv(rng, f"{prefix}.{k}", 3, cin, cout, dtype, gain=0.1 if last else 1.0)

    def _conv(self, rng, name, k, cin, cout, dtype, gain=1.0):
        std = gain * np.sqrt(2.0 / ((1 + LEAK ** 2) * k * k * cin))
        self.params[f"{name}.w"] = Tensor((rng.standard_normal((k, k, cin, cout)) * std).astype(dtype),
                                          requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def decoder_layer_shapes(self) -> list[tuple[int, int]]:
        widths = self.cfg.decoder_widths
        shapes = []
        prev2, prev1 = 0, self.cfg.align_width
        for w in widths:
            shapes.append((prev2 + prev1, w))
            prev2, prev1 = prev1, w
        return shapes

    def decoder_prefix(self, level: int) -> str:
        return "decoder" if self.cfg.shared_decoder else f"decoder.l{level}"

    def num_parameters(self) -> int:
        return int(sum(p.values.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ContractError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.values = np.asarray(state[k], dtype=p.dtype).copy()

    def copy(self) -> "FlowNetwork":
        other = FlowNetwork.__new__(FlowNetwork)
        other.cfg = self.cfg
        other.params = {k: Tensor(v.values.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return other


def _conv(net: FlowNetwork, name: str, x: Tensor, stride: int = 1, act: bool = True) -> Tensor:
    w = net.params[f"{name}.w"]
    pad = (w.shape[0] - 1) // 2 if stride == 1 else 1
    y = T.conv2d(x, w, net.params[f"{name}.b"], stride=stride, padding=pad)
    return T.leaky_relu(y, LEAK) if act else y


def encode_pyramid(net: FlowNetwork, img) -> PyramidFeatures:
    """Siamese encoder: the same parameters apply to every image in the batch."""
    x = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=net.cfg.dtype))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    div = 2 ** net.cfg.levels
    if x.shape[1] % div or x.shape[2] % div:
        raise ContractError(f"extent {x.shape[1:3]} is not a multiple of {div}")
    feats = PyramidFeatures()
    for lvl in range(1, net.cfg.levels + 1):
        x = _conv(net, f"enc.l{lvl}.down", x, stride=2)
        x = _conv(net, f"enc.l{lvl}.conv", x)
        feats.levels.append(x)
    return feats


def correlate(f1: Tensor, f2: Tensor, radius: int) -> Tensor:
    """Channel-normalised correlation over a (2r+1)^2 window; zero outside f2."""
    return T.correlate(f1, f2, radius)


def decode_level(net: FlowNetwork, level: int, x1: Tensor, up_flow: Tensor, cost: Tensor) -> Tensor:
    """Residual flow update at one pyramid level; returns the level's flow."""
    a = _conv(net, f"align.l{level}", T.concat([x1, up_flow, cost], axis=-1))
    prefix = net.decoder_prefix(level)
    n_layers = len(net.cfg.decoder_widths)
    prev2, prev1 = None, a
    for k in range(n_layers):
        inp = prev1 if prev2 is None else T.concat([prev2, prev1], axis=-1)
        out = _conv(net, f"{prefix}.{k}", inp, act=k < n_layers - 1)
        prev2, prev1 = prev1, out
    return up_flow + prev1


def _pad_to(arr: np.ndarray, div: int) -> tuple[np.ndarray, int, int]:
    h, w = arr.shape[1:3]
    ph, pw = (-h) % div, (-w) % div
    if ph or pw:
        arr = np.pad(arr, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    return arr, h, w


def _prepare(net: FlowNetwork, i1, i2):
    dtype = np.dtype(net.cfg.dtype)
    a = np.asarray(i1, dtype=dtype)
    b = np.asarray(i2, dtype=dtype)
    if a.shape != b.shape:
        raise ContractError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    div = 2 ** net.cfg.levels
    a, h, w = _pad_to(a, div)
    b, _, _ = _pad_to(b, div)
    return a, b, h, w


def _decode(net: FlowNetwork, first: list[Tensor], second: list[Tensor], h: int, w: int) -> list[Tensor]:
    dtype = np.dtype(net.cfg.dtype)
    flows: list[Tensor] = []
    flow = None
    for lvl in range(net.cfg.levels, 0, -1):
        x1, x2 = first[lvl - 1], second[lvl - 1]
        if flow is None:
            up = Tensor(np.zeros(x1.shape[:3] + (2,), dtype=dtype))
            x2w = x2
        else:
            up = T.upsample2x(flow) * 2.0
            x2w, _ = warp(x2, up)
        cost = T.leaky_relu(correlate(x1, x2w, net.cfg.radius), LEAK)
        flow = decode_level(net, lvl, x1, up, cost)
        flows.append(flow)
    full = T.upsample2x(flow) * 2.0
    if full.shape[1] != h or full.shape[2] != w:
        full = full[:, :h, :w]
    flows.append(full)
    return flows


def predict(net: FlowNetwork, i1, i2) -> list[Tensor]:
    """Flows from coarse to fine; the last entry is upsampled to the input extent.

    Level flows are in pixels of that level's resolution.  Inputs are
    (H, W, C) or batched (N, H, W, C) arrays in [0, 1]; extents that are not
    a multiple of ``2 ** levels`` are edge-padded and the output cropped.
    """
    a, b, h, w = _prepare(net, i1, i2)
    n = a.shape[0]
    feats = encode_pyramid(net, Tensor(np.concatenate([a, b], axis=0)))
    return _decode(net, [x[:n] for x in feats.levels], [x[n:] for x in feats.levels], h, w)


def predict_bidirectional(net: FlowNetwork, i1, i2) -> list[Tensor]:
    """Forward and backward flows in one pass, stacked as a batch of 2N.

    Same values as ``predict(net, [i1; i2], [i2; i1])`` but every frame is
    encoded only once.
    """
    a, b, h, w = _prepare(net, i1, i2)
    n = a.shape[0]
    feats = encode_pyramid(net, Tensor(np.concatenate([a, b], axis=0)))
    swapped = [T.concat([x[n:], x[:n]], axis=0) for x in feats.levels]
    return _decode(net, feats.levels, swapped, h, w)


def predict_flow(net: FlowNetwork, i1, i2) -> np.ndarray:
    """Finest flow as a plain array, same batching as the inputs."""
    flow = predict(net, i1, i2)[-1].values.astype(np.float64)
    return flow[0] if np.ndim(i1) == 3 else flow


def save_checkpoint(net: FlowNetwork, path) -> None:
    c = net.cfg
    out = bytearray(CKPT_MAGIC)
    header = [CKPT_VERSION, c.levels, len(c.encoder_widths), *c.encoder_widths,
              len(c.decoder_widths), *c.decoder_widths, c.align_width, c.radius, c.in_channels,
              int(c.shared_decoder), len(net.params)]
    out += struct.pack(f"<{len(header)}I", *header)
    for name, p in net.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape)
        out += np.ascontiguousarray(p.values, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32s(self, what: str, count: int) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count, what))

    def u32(self, what: str) -> int:
        return self.u32s(what, 1)[0]


def load_checkpoint(path, dtype: str = "float32") -> FlowNetwork:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError("bad magic", 0)
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    levels = r.u32("levels")
    enc = r.u32s("encoder widths", r.u32("encoder count"))
    dec = r.u32s("decoder widths", r.u32("decoder count"))
    align, radius, in_ch, shared, n_params = r.u32s("config", 5)
    try:
        cfg = NetConfig(levels=levels, encoder_widths=enc, decoder_widths=dec, align_width=align, radius=radius,
                        in_channels=in_ch, shared_decoder=bool(shared), dtype=dtype)
    except ContractError as exc:
        raise CheckpointError(f"inconsistent header: {exc}", r.pos) from exc
    net = FlowNetwork(cfg)
    state = {}
    for _ in range(n_params):
        start = r.pos
        name = r.take(r.u32("name length"), "name").decode("utf-8", errors="replace")
        ndim = r.u32("rank")
        shape = r.u32s("shape", ndim)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * count, f"values of {name}"), dtype="<f4").reshape(shape)
        if name not in net.params or net.params[name].shape != shape:
            raise CheckpointError(f"unexpected parameter block {name} {shape}", start)
        state[name] = arr
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after parameter blocks", r.pos)
    missing = set(net.params) - set(state)
    if missing:
        raise CheckpointError(f"missing parameters {sorted(missing)}", r.pos)
    net.load_state(state)
    return net
