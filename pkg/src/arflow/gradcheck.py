"""Central finite-difference checks for the differentiable operations."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import flowcore, tensor as T
from .tensor import Graph, Tensor, backward

FD_STEP = 1e-5
FD_RTOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    seconds: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm of the difference relative to the larger of the two norms."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(fn: Callable[[], float], arr: np.ndarray, entries: np.ndarray | None = None,
                     step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``arr`` (modified in place and restored).

    Only the flat ``entries`` are perturbed when given; others are left at 0.
    """
    flat = arr.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        plus = fn()
        flat[i] = orig - step
        minus = fn()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * step)
    return out.reshape(arr.shape)


def check_function(fn: Callable[..., Tensor], inputs: Sequence[Tensor], max_entries: int | None = None,
                   rng: np.random.Generator | None = None, step: float = FD_STEP) -> float:
    """Largest relative error between backward() and finite differences over ``inputs``.

    ``fn`` must return a scalar Tensor.  With ``max_entries`` only that many
    random entries per input are compared.
    """
    rng = rng or np.random.default_rng(0)
    with Graph() as g:
        loss = fn(*inputs)
    grads = backward(g, loss)

    def value() -> float:
        return float(fn(*inputs).values)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        entries = None
        if max_entries is not None and t.values.size > max_entries:
            entries = rng.choice(t.values.size, size=max_entries, replace=False)
        numeric = numeric_gradient(value, t.values, entries, step)
        analytic = grads[t.id]
        if entries is not None:
            analytic = analytic.reshape(-1)[entries]
            numeric = numeric.reshape(-1)[entries]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _suite_primitives(rng) -> list[tuple[str, Callable[[], float]]]:
    cases = []

    def case(name, fn, *inputs, max_entries=None):
        cases.append((name, lambda: check_function(fn, inputs, max_entries, rng)))

    x = _param(rng, 2, 8, 8, 4)
    proj = {}

    # sum(out * r) with a fixed random r per case exercises every output entry
    def projected(key, out):
        if key not in proj:
            proj[key] = rng.standard_normal(out.shape)
        return (out * proj[key]).sum()

    case("add", lambda a, b: projected("add", a + b), _param(rng, 2, 8, 8, 4), _param(rng, 2, 8, 8, 4))
    case("mul", lambda a, b: projected("mul", a * b), _param(rng, 2, 8, 8, 4), _param(rng, 1, 1, 1, 4))
    case("div", lambda a, b: projected("div", a / b), _param(rng, 2, 8, 8, 4),
         Tensor(rng.uniform(1.0, 2.0, (2, 8, 8, 4)), requires_grad=True))
    case("abs", lambda a: projected("abs", abs(a)), _param(rng, 2, 8, 8, 4))
    case("pow", lambda a: projected("pow", a ** 0.4),
         Tensor(rng.uniform(0.1, 2.0, (2, 8, 8, 4)), requires_grad=True))
    case("exp", lambda a: projected("exp", a.exp()), _param(rng, 2, 8, 8, 4, scale=0.5))
    case("sum_mean", lambda a: projected("sm", a.sum(axis=-1)) + a.mean(), x)
    case("leaky_relu", lambda a: projected("lrelu", T.leaky_relu(a, 0.1)), _param(rng, 2, 8, 8, 4))
    case("concat", lambda a, b: projected("cat", T.concat([a, b], axis=-1)),
         _param(rng, 2, 8, 8, 3), _param(rng, 2, 8, 8, 2))
    case("slice", lambda a: projected("slice", a[:, 1:, :-1]), _param(rng, 2, 8, 8, 4))
    case("conv2d", lambda a, k, b: projected("conv", T.conv2d(a, k, b, stride=1, padding=1)),
         _param(rng, 2, 8, 8, 4), _param(rng, 3, 3, 4, 3), _param(rng, 3))
    case("conv2d_stride2", lambda a, k: projected("conv2", T.conv2d(a, k, stride=2, padding=1)),
         _param(rng, 2, 8, 8, 4), _param(rng, 4, 4, 4, 3))
    case("upsample2x", lambda a: projected("up", T.upsample2x(a)), _param(rng, 2, 4, 4, 4))
    case("box_filter", lambda a: projected("box", T.box_filter(a, 7)), _param(rng, 2, 8, 8, 4))
    case("matmul", lambda a, m: projected("mm", a @ m), _param(rng, 2, 8, 8, 2), _param(rng, 2, 2))
    case("correlate", lambda a, b: projected("corr", T.correlate(a, b, 2)),
         _param(rng, 2, 8, 8, 4), _param(rng, 2, 8, 8, 4))
    coords = Tensor(rng.uniform(-1.5, 8.5, (2, 8, 8, 2)), requires_grad=True)
    case("grid_sample", lambda a, c: projected("gs", T.grid_sample(a, c)), _param(rng, 2, 8, 8, 3), coords)
    return cases


def _suite_losses(rng) -> list[tuple[str, Callable[[], float]]]:
    cases = []
    img1 = rng.uniform(0.1, 0.9, (2, 8, 8, 3))
    img2 = Tensor(rng.uniform(0.1, 0.9, (2, 8, 8, 3)), requires_grad=True)
    flow = Tensor(rng.uniform(-2.3, 2.3, (2, 8, 8, 2)), requires_grad=True)
    occ = (rng.uniform(size=(2, 8, 8)) < 0.2).astype(np.uint8)

    def warp_fn(target, fl):
        warped, _ = flowcore.warp(target, fl)
        return (warped * np.linspace(-1, 1, warped.values.size).reshape(warped.shape)).sum()

    def photo_fn(target, fl):
        warped, _ = flowcore.warp(target, fl)
        return flowcore.photometric_loss(img1, warped, occ)

    ref = Tensor(rng.uniform(-2, 2, (2, 8, 8, 2)))

    cases.append(("warp", lambda: check_function(warp_fn, (img2, flow))))
    cases.append(("photometric_loss", lambda: check_function(photo_fn, (img2, flow))))
    cases.append(("smoothness_loss", lambda: check_function(
        lambda fl: flowcore.smoothness_loss(fl, img1), (flow,))))
    cases.append(("charbonnier_consistency", lambda: check_function(
        lambda fl: flowcore.charbonnier_consistency(ref, fl, occ), (flow,))))
    return cases


def _suite_network(rng) -> list[tuple[str, Callable[[], float]]]:
    from .network import FlowNetwork, NetConfig, predict

    cfg = NetConfig(levels=2, encoder_widths=(3, 4), decoder_widths=(4, 4, 3, 3, 2), align_width=3,
                    radius=1, in_channels=2, dtype="float64")
    net = FlowNetwork(cfg, seed=int(rng.integers(1 << 31)))
    # Near-zero flows put warp sample points on the integer grid, where
    # bilinear sampling has a kink; offset the output to a smooth point.
    net.params["decoder.4.b"].values = rng.uniform(0.2, 0.4, 2)
    i1 = rng.uniform(0, 1, (1, 8, 8, 2))
    i2 = rng.uniform(0, 1, (1, 8, 8, 2))
    weights = np.random.default_rng(7).standard_normal((1, 8, 8, 2))

    def loss(*params):
        return (predict(net, i1, i2)[-1] * weights).sum()

    params = tuple(net.params.values())
    return [("network_2level", lambda: check_function(loss, params, max_entries=6, rng=rng))]


def run_suites(seed: int = 0, rtol: float = FD_RTOL) -> list[CheckResult]:
    """Run every finite-difference suite at 64-bit precision."""
    rng = np.random.default_rng(seed)
    results = []
    for name, run in _suite_primitives(rng) + _suite_losses(rng) + _suite_network(rng):
        t0 = time.perf_counter()
        err = run()
        results.append(CheckResult(name, err, err < rtol, time.perf_counter() - t0))
    return results
