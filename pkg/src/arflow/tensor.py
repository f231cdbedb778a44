"""Dense arrays with tape-based reverse-mode differentiation.

Operations on :class:`Tensor` values are recorded on the innermost active
:class:`Graph` whenever one of their inputs requires a gradient.  Outside a
graph nothing is recorded, which is how inference runs.

Layout convention for image-like tensors is NHWC.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count(1)
_local = threading.local()
_default_dtype = np.dtype(np.float64)


class ContractError(ValueError):
    """An operation was called with arguments that break its contract."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported precision {dtype}")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


class Tensor:
    """A dense array, optionally tracked for differentiation."""

    __slots__ = ("values", "grad", "requires_grad", "id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(values, Tensor):
            values = values.values
        if dtype is None:
            arr = np.asarray(values)
            dtype = arr.dtype if arr.dtype.kind == "f" else _default_dtype
        self.values = np.asarray(values, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __abs__(self):
        return absolute(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)


@dataclass
class _Node:
    out: int
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Ordered record of the primitive operations of one computation.

    Use as a context manager; a graph is confined to the thread that
    entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        for t in inputs:
            if t.requires_grad and t.id not in self._produced:
                self.leaves.setdefault(t.id, t)
        self.nodes.append(_Node(out.id, inputs, vjp))
        self._produced.add(out.id)

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._produced or node_id in self.leaves

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()


def current_graph() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every leaf of ``graph``.

    Leaves are the tensors requiring gradients that entered the graph
    without being produced by it (parameters, test inputs).  Their ``grad``
    attribute is filled in as well.
    """
    if loss.values.ndim != 0:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.id not in graph:
        raise LookupError(f"tensor {loss.id} was not recorded in this graph")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.values)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            acc = grads.get(t.id)
            grads[t.id] = gi if acc is None else acc + gi
    result = {}
    for tid, leaf in graph.leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(leaf.values)
        leaf.grad = g
        result[tid] = g
    return result


# --------------------------------------------------------------------------
# helpers


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _default_dtype))


def _make(values: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    if needs:
        graph = current_graph()
        if graph is not None:
            graph.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ContractError(f"incompatible shapes {a.shape} and {b.shape}") from exc


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    av, bv = a.values, b.values

    def vjp(g):
        ga = _unbroadcast(g * bv, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(av * bv, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    av, bv = a.values, b.values
    out = av / bv

    def vjp(g):
        ga = _unbroadcast(g / bv, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


def absolute(x: Tensor) -> Tensor:
    # np.sign is 0 at exactly 0: subgradient 0 there.
    xv = x.values
    return _make(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def power(x: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("power supports scalar exponents only")
    p = float(exponent)
    xv = x.values
    out = xv ** p

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * xv ** (p - 1.0)
        d = np.where(xv == 0, 0.0, d).astype(xv.dtype, copy=False)
        return (g * d,)

    return _make(out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _make(out, (x,), lambda g: (g * out,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    xv = x.values
    factor = np.where(xv > 0, xv.dtype.type(1), xv.dtype.type(slope))
    return _make(xv * factor, (x,), lambda g: (g * factor,))


def stop_gradient(t: Tensor) -> Tensor:
    """Same values, cut from the graph: contributes nothing upstream.

    A leaf passed through here is still registered with the active graph,
    so backward() reports its (zero) gradient.
    """
    graph = current_graph()
    if graph is not None and t.requires_grad and t.id not in graph:
        graph.leaves[t.id] = t
    return Tensor(t.values, requires_grad=False)


def scale_gradient(t: Tensor, factor: float) -> Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``factor``."""
    return _make(t.values.copy(), (t,), lambda g: (g * factor,))


# --------------------------------------------------------------------------
# shape and reductions


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.values, axis=axis, keepdims=keepdims), (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.values.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return reduce_sum(x, axis, keepdims) * (1.0 / max(count, 1))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise ContractError(str(exc)) from exc
    return _make(out, (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        z = np.zeros(shape, dtype=dtype)
        z[index] = g
        return (z,)

    return _make(x.values[index], (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    if not tensors:
        raise ContractError("concat of nothing")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ContractError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.values for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a matrix ``b`` of shape (k, m)."""
    a, b = _pair(a, b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), vjp)


# --------------------------------------------------------------------------
# image operations (NHWC)


def _check_nhwc(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ContractError(f"{what} expects an NHWC tensor, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; ``kernel`` has shape (kh, kw, c_in, c_out)."""
    _check_nhwc(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != x.shape[3]:
        raise ContractError(f"kernel {kernel.shape} does not fit input {x.shape}")
    if bias is not None and bias.shape != (kernel.shape[3],):
        raise ContractError(f"bias {bias.shape} does not fit kernel {kernel.shape}")
    n, h, w, ci = x.shape
    kh, kw, _, co = kernel.shape
    s, p = stride, padding
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ContractError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x.values, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.values
    # im2col with (kh, kw, ci) column order so the kernel reshapes directly.
    cols = np.empty((n, ho, wo, kh, kw, ci), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
    cols = cols.reshape(n * ho * wo, kh * kw * ci)
    wm = kernel.values.reshape(kh * kw * ci, co)
    out = cols @ wm
    if bias is not None:
        out += bias.values
    out = out.reshape(n, ho, wo, co)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def vjp(g):
        g2 = g.reshape(-1, co)
        gx = gk = gb = None
        if x.requires_grad:
            dcols = (g2 @ wm.T).reshape(n, ho, wo, kh, kw, ci)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, p:p + h, p:p + w, :] if p else dxp
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(out, inputs, vjp)


def _axis_apply(arr: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    out = np.tensordot(m, arr, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply fixed linear maps along H (``rows``) and W (``cols``) of an NHWC tensor."""
    _check_nhwc(x, "separable")
    if rows.shape[1] != x.shape[1] or cols.shape[1] != x.shape[2]:
        raise ContractError(f"maps {rows.shape}, {cols.shape} do not fit {x.shape}")
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = _axis_apply(_axis_apply(x.values, rows, 1), cols, 2)
    return _make(out, (x,), lambda g: (_axis_apply(_axis_apply(g, rows.T, 1), cols.T, 2),))


@lru_cache(maxsize=None)
def upsample_matrix(n: int) -> np.ndarray:
    """Bilinear 2x interpolation matrix (half-pixel centres, edge clamped)."""
    m = np.zeros((2 * n, n))
    for i in range(n):
        m[2 * i, i] += 0.75
        m[2 * i, max(i - 1, 0)] += 0.25
        m[2 * i + 1, i] += 0.75
        m[2 * i + 1, min(i + 1, n - 1)] += 0.25
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def pad_matrix(n: int, pad: int, mode: str) -> np.ndarray:
    m = np.zeros((n + 2 * pad, n))
    for r in range(n + 2 * pad):
        i = r - pad
        if 0 <= i < n:
            m[r, i] = 1.0
        elif mode == "reflect":
            j = -i if i < 0 else 2 * (n - 1) - i
            if not 0 <= j < n:
                raise ContractError(f"reflect pad {pad} too wide for extent {n}")
            m[r, j] = 1.0
        elif mode == "edge":
            m[r, min(max(i, 0), n - 1)] = 1.0
        elif mode != "constant":
            raise ContractError(f"unknown pad mode {mode!r}")
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def box_matrix(n: int, k: int) -> np.ndarray:
    """Mean over a centred window of ``k`` samples, reflect padded to keep extent ``n``."""
    pad = k // 2
    band = np.zeros((n, n + 2 * pad))
    for i in range(n):
        band[i, i:i + k] = 1.0 / k
    m = band @ pad_matrix(n, pad, "reflect")
    m.setflags(write=False)
    return m


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of an NHWC tensor."""
    _check_nhwc(x, "upsample2x")
    return separable(x, upsample_matrix(x.shape[1]), upsample_matrix(x.shape[2]))


def pad2d(x: Tensor, pad: int, mode: str = "reflect") -> Tensor:
    _check_nhwc(x, "pad2d")
    return separable(x, pad_matrix(x.shape[1], pad, mode), pad_matrix(x.shape[2], pad, mode))


def box_filter(x: Tensor, k: int) -> Tensor:
    """Local mean over k x k windows with reflect padding; keeps the extent."""
    _check_nhwc(x, "box_filter")
    return separable(x, box_matrix(x.shape[1], k), box_matrix(x.shape[2], k))


def grid_sample(img: Tensor, coords: Tensor) -> Tensor:
    """Bilinear lookup of ``img`` at absolute pixel ``coords`` (x, y).

    Coordinates are clamped to the image rectangle; the clamped part of a
    coordinate receives no gradient.
    """
    _check_nhwc(img, "grid_sample")
    if coords.ndim != 4 or coords.shape[-1] != 2 or coords.shape[0] != img.shape[0]:
        raise ContractError(f"coords {coords.shape} do not fit image {img.shape}")
    n, h, w, c = img.shape
    if h < 2 or w < 2:
        raise ContractError("grid_sample needs an image at least 2x2")
    dtype = img.dtype
    cx = coords.values[..., 0].astype(dtype, copy=False)
    cy = coords.values[..., 1].astype(dtype, copy=False)
    bad = ~(np.isfinite(cx) & np.isfinite(cy))
    x = np.clip(np.where(bad, 0, cx), 0, w - 1)
    y = np.clip(np.where(bad, 0, cy), 0, h - 1)
    x0 = np.minimum(np.floor(x), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(y), h - 2).astype(np.intp)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    base = (np.arange(n) * h * w).reshape(n, 1, 1)
    i00 = base + y0 * w + x0
    i01, i10, i11 = i00 + 1, i00 + w, i00 + w + 1
    flat = img.values.reshape(n * h * w, c)
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    # two-sided weights so that integer coordinates reproduce pixels exactly
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    out = top * (1 - wy) + bot * wy
    if bad.any():
        out[bad] = np.nan

    def vjp(g):
        gi = gc = None
        if img.requires_grad:
            gy = wy * g
            gt = g - gy
            vals = np.stack([gt - wx * gt, wx * gt, gy - wx * gy, wx * gy]).reshape(4, -1, c)
            idx = np.stack([i00, i01, i10, i11]).reshape(4, -1, 1) * c + np.arange(c)
            acc = np.bincount(idx.ravel(), weights=vals.ravel(), minlength=flat.size)
            gi = acc.astype(img.dtype, copy=False).reshape(img.shape)
        if coords.requires_grad:
            dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * g
            dy = (bot - top) * g
            dx = dx.sum(-1) * ((cx >= 0) & (cx <= w - 1))
            dy = dy.sum(-1) * ((cy >= 0) & (cy <= h - 1))
            gc = np.stack([dx, dy], axis=-1).astype(coords.dtype, copy=False)
        return gi, gc

    return _make(out, (img, coords), vjp)


def correlate(f1: Tensor, f2: Tensor, radius: int) -> Tensor:
    """Cost volume: channel-mean products of f1(p) and f2(p + o), |o|_inf <= radius.

    Output channel ``(dy + r) * (2r + 1) + (dx + r)`` holds offset (dx, dy);
    offsets falling outside f2 score 0.
    """
    _check_nhwc(f1, "correlate")
    if f1.shape != f2.shape:
        raise ContractError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    n, h, w, c = f1.shape
    r = radius
    k = 2 * r + 1
    a = f1.values
    bp = np.pad(f2.values, ((0, 0), (r, r), (r, r), (0, 0)))
    scale = 1.0 / c
    out = np.empty((n, h, w, k * k), dtype=a.dtype)
    for dy in range(k):
        for dx in range(k):
            out[..., dy * k + dx] = np.einsum("nhwc,nhwc->nhw", a, bp[:, dy:dy + h, dx:dx + w, :]) * scale

    def vjp(g):
        ga = np.zeros_like(a) if f1.requires_grad else None
        gbp = np.zeros_like(bp) if f2.requires_grad else None
        gs = np.ascontiguousarray(np.moveaxis(g * scale, -1, 0))[..., None]
        tmp = np.empty_like(a)
        for dy in range(k):
            for dx in range(k):
                gk = gs[dy * k + dx]
                if ga is not None:
                    np.multiply(gk, bp[:, dy:dy + h, dx:dx + w, :], out=tmp)
                    ga += tmp
                if gbp is not None:
                    np.multiply(gk, a, out=tmp)
                    gbp[:, dy:dy + h, dx:dx + w, :] += tmp
        gb = gbp[:, r:r + h, r:r + w, :] if gbp is not None else None
        return ga, gb

    return _make(out, (f1, f2), vjp)
