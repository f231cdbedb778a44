"""Two-forward training step, Adam, and the fit loop.

One step predicts bidirectional flow on the original frames (photometric and
smoothness terms with forward-backward occlusion scoping).  With a nonzero
augmentation weight it then transforms frames, the detached forward flow and
the occlusion map, predicts again on the transformed pair, and penalises the
disagreement.  Everything is backpropagated once.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .flowcore import (PhotometricConfig, charbonnier_consistency, occlusion_forward_backward,
                       photometric_loss, smoothness_loss, warp)
from .network import FlowNetwork, predict, predict_bidirectional
from .tensor import Graph, Tensor, backward
from .transform import (AppearanceRanges, Augmentation, OcclusionRanges, SpatialRanges, TransformRanges,
                        augment_pair, sample_augmentation, transform_flow, transform_occlusion)

METRICS_HEADER = ("step", "L_ph", "L_sm", "L_aug", "L_all", "val_aepe")
MODES = ("regularize", "direct")


class ConfigError(ValueError):
    """Training configuration is invalid or cannot be parsed."""


class TrainingDivergedError(RuntimeError):
    """Too many consecutive steps produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    smooth_weight: float = 60.0  # lambda_1
    aug_weight: float = 0.01  # lambda_2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 4
    pretrain_steps: int = 500
    steps: int = 1500
    pretrain: bool = False
    mode: str = "regularize"
    spatial: bool = True
    appearance: bool = True
    occlusion: bool = True
    flip: bool = True
    time_swap: bool = True
    edge_weight: float = 10.0
    smooth_flow_scale: float = 16000.0  # flow units for the smoothness term
    l1_weight: float = 0.15
    ssim_weight: float = 0.85
    ssim_window: int = 7
    rotation_deg: float = 15.0
    translation: float = 0.1
    zoom_max: float = 1.5
    brightness: float = 0.2
    noise_sigma: float = 0.02
    blur_sigma: float = 1.0
    crop_fraction: float = 0.85
    max_mask: int = 3
    fb_occlusion: bool = True
    occlusion_warmup: int = 250  # steps without forward-backward masking
    max_occluded: float = 0.5  # per-sample masked fraction above which the mask is dropped
    val_every: int = 100
    divergence_limit: int = 5

    def __post_init__(self):
        if self.smooth_weight < 0 or self.aug_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("need lr > 0 and betas in [0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.pretrain_steps < 0:
            raise ConfigError("batch size must be >= 1 and step counts >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.crop_fraction <= 1 or self.zoom_max < 1:
            raise ConfigError("crop fraction must be in (0, 1] and zoom_max >= 1")
        if self.occlusion_warmup < 0:
            raise ConfigError("occlusion_warmup must be >= 0")
        if not 0 <= self.max_occluded <= 1:
            raise ConfigError("max_occluded must be in [0, 1]")
        if self.val_every < 1 or self.divergence_limit < 1:
            raise ConfigError("val_every and divergence_limit must be >= 1")
        if self.pretrain:
            object.__setattr__(self, "aug_weight", 0.0)

    @property
    def photometric(self) -> PhotometricConfig:
        return PhotometricConfig(self.l1_weight, self.ssim_weight, self.ssim_window)

    def transform_ranges(self) -> TransformRanges:
        return TransformRanges(
            spatial=SpatialRanges(self.rotation_deg, self.translation, (1.0, self.zoom_max)),
            appearance=AppearanceRanges(brightness=self.brightness, noise_sigma=self.noise_sigma,
                                        blur_sigma=self.blur_sigma),
            occlusion=OcclusionRanges(crop_fraction=self.crop_fraction, max_mask=self.max_mask),
            use_spatial=self.spatial, use_appearance=self.appearance, use_occlusion=self.occlusion)

    def augmenting(self) -> bool:
        return self.mode == "regularize" and self.aug_weight > 0 or self.mode == "direct"

    def any_transform(self) -> bool:
        return self.spatial or self.appearance or self.occlusion


@dataclass
class StepReport:
    L_ph: float
    L_sm: float
    L_aug: float
    L_all: float
    scope_ph: float  # fraction of pixels inside the photometric scope
    scope_aug: float  # fraction inside the consistency scope
    transforms: list[dict[str, object]] = field(default_factory=list)
    finite: bool = True
    seconds: float = 0.0


@dataclass
class LossTerms:
    """Scalar loss tensors of one step plus what is needed to report them."""

    ph: Tensor
    sm: Tensor
    aug: Tensor
    total: Tensor
    scope_ph: float
    scope_aug: float
    transforms: list[dict[str, object]]
    forward_flow: Tensor | None = None
    aug_reference: Tensor | None = None


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def _photometric_pair(net: FlowNetwork, i1: np.ndarray, i2: np.ndarray, cfg: TrainConfig):
    """Bidirectional photometric and smoothness terms on one frame pair batch."""
    n = i1.shape[0]
    flows = predict_bidirectional(net, i1, i2)[-1]
    fwd, bwd = flows[:n], flows[n:]
    if cfg.fb_occlusion:
        occ12 = occlusion_forward_backward(fwd.values, bwd.values)
        occ21 = occlusion_forward_backward(bwd.values, fwd.values)
        # a mask covering most of a sample reflects unconverged flow rather than
        # occlusion; keeping it starves those pixels of signal and the mask grows
        for occ in (occ12, occ21):
            occ[occ.mean(axis=(1, 2)) > cfg.max_occluded] = 0
    else:
        occ12 = occ21 = np.zeros(fwd.shape[:3], dtype=np.uint8)
    ref1 = i1.astype(flows.dtype, copy=False)
    ref2 = i2.astype(flows.dtype, copy=False)
    w2, _ = warp(ref2, fwd)
    w1, _ = warp(ref1, bwd)
    ph = (photometric_loss(ref1, w2, occ12, cfg.photometric) + photometric_loss(ref2, w1, occ21, cfg.photometric)) * 0.5
    s = 1.0 / cfg.smooth_flow_scale
    sm = (smoothness_loss(fwd * s, ref1, cfg.edge_weight) + smoothness_loss(bwd * s, ref2, cfg.edge_weight)) * 0.5
    scope = 1.0 - 0.5 * (occ12.mean() + occ21.mean())
    return fwd, occ12, ph, sm, float(scope)


def _draw_augmentations(n: int, extent, channels: int, cfg: TrainConfig, rng: np.random.Generator,
                        multiple: int) -> list[Augmentation]:
    ranges = cfg.transform_ranges()
    return [sample_augmentation(rng, ranges, extent, channels, multiple) for _ in range(n)]


def compute_losses(net: FlowNetwork, i1: np.ndarray, i2: np.ndarray, cfg: TrainConfig,
                   rng: np.random.Generator, _detach: str = "stop") -> LossTerms:
    """Build the loss graph of one step; must run inside an active Graph.

    ``_detach`` selects how the transformed reference flow is cut from the
    graph: ``"stop"`` (stop_gradient) or ``"zero"`` (kept in the graph with
    its gradient scaled by 0).  Both must give identical parameter gradients.
    """
    dtype = np.dtype(net.cfg.dtype)
    n, h, w, c = i1.shape
    multiple = 2 ** net.cfg.levels
    if cfg.mode == "direct" and cfg.any_transform():
        augs = _draw_augmentations(n, (h, w), c, cfg, rng, multiple)
        pairs = [augment_pair(i1[k], i2[k], a, rng) for k, a in enumerate(augs)]
        a1 = np.stack([p[0] for p in pairs])
        a2 = np.stack([p[1] for p in pairs])
        _, _, ph, sm, scope = _photometric_pair(net, a1, a2, cfg)
        total = ph + sm * cfg.smooth_weight
        return LossTerms(ph, sm, _zero(dtype), total, scope, 0.0, [a.as_dict() for a in augs])

    fwd, occ12, ph, sm, scope = _photometric_pair(net, i1, i2, cfg)
    total = ph + sm * cfg.smooth_weight
    if cfg.mode == "direct" or cfg.aug_weight == 0 or not cfg.any_transform():
        return LossTerms(ph, sm, _zero(dtype), total, scope, 0.0, [], fwd)

    augs = _draw_augmentations(n, (h, w), c, cfg, rng, multiple)
    if _detach == "stop":
        ref = T.stop_gradient(fwd)
    elif _detach == "zero":
        ref = T.scale_gradient(fwd, 0.0)
    else:
        raise ValueError(f"unknown detach mode {_detach!r}")
    t1, t2, refs, scopes = [], [], [], []
    for k, aug in enumerate(augs):
        a, b, _ = augment_pair(i1[k], i2[k], aug, rng)
        t1.append(a)
        t2.append(b)
        u_bar = transform_flow(ref[k], aug.transform, aug.extent)
        _, old = transform_occlusion(occ12[k], u_bar.values, aug.transform, aug.extent)
        refs.append(u_bar.reshape((1,) + u_bar.shape))
        scopes.append(old)
    u_ref = T.concat(refs, axis=0)
    u_star = predict(net, np.stack(t1), np.stack(t2))[-1]
    scope_aug = np.stack(scopes)
    aug_loss = charbonnier_consistency(u_ref, u_star, scope_aug)
    total = total + aug_loss * cfg.aug_weight
    return LossTerms(ph, sm, aug_loss, total, scope, float(1.0 - scope_aug.mean()),
                     [a.as_dict() for a in augs], fwd, u_ref)


class Adam:
    """Adam with bias correction over a named parameter dictionary."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.values = (p.values - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def parameter_gradients(net: FlowNetwork, graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    grads = backward(graph, loss)
    return {k: grads[p.id] for k, p in net.params.items() if p.id in grads}


def regular_augment(i1: np.ndarray, i2: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """Per-sample horizontal flip and time-order swap applied directly to the data."""
    i1, i2 = i1.copy(), i2.copy()
    for k in range(i1.shape[0]):
        if cfg.flip and rng.random() < 0.5:
            i1[k], i2[k] = i1[k, :, ::-1], i2[k, :, ::-1]
        if cfg.time_swap and rng.random() < 0.5:
            i1[k], i2[k] = i2[k].copy(), i1[k].copy()
    return i1, i2


def train_step(net: FlowNetwork, batch: tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
               rng: np.random.Generator, optimizer: Adam | None = None) -> StepReport:
    """One full step: losses, a single backward pass and one Adam update.

    A non-finite loss or gradient skips the update and is flagged in the
    report.  Without an ``optimizer`` a fresh one is used, which only makes
    sense for one-off steps.
    """
    t0 = time.perf_counter()
    i1, i2 = (np.asarray(x, dtype=np.float64) for x in batch)
    if i1.ndim == 3:
        i1, i2 = i1[None], i2[None]
    if i1.shape[0] == 0 or i1.shape != i2.shape:
        raise ConfigError(f"batch must be non-empty with matching frames, got {i1.shape} / {i2.shape}")
    optimizer = optimizer or Adam(net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    with Graph() as g:
        terms = compute_losses(net, i1, i2, cfg, rng)
    values = [float(x.values) for x in (terms.ph, terms.sm, terms.aug, terms.total)]
    finite = all(math.isfinite(v) for v in values)
    if finite:
        grads = parameter_gradients(net, g, terms.total)
        finite = all(np.all(np.isfinite(x)) for x in grads.values())
        if finite:
            optimizer.step(grads)
    return StepReport(*values, terms.scope_ph, terms.scope_aug, terms.transforms, finite,
                      time.perf_counter() - t0)


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    net: FlowNetwork
    rows: list[dict[str, float | None]]
    initial_val_aepe: float | None
    final_val_aepe: float | None
    seconds: float

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.rows)


def metrics_to_csv(rows: Sequence[dict[str, float | None]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in rows:
        writer.writerow(["" if r.get(k) is None else (r[k] if k == "step" else f"{r[k]:.6g}")
                         for k in METRICS_HEADER])
    return buf.getvalue()


def read_metrics(path) -> list[dict[str, float | None]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ConfigError(f"{path}: unexpected metrics header {reader.fieldnames}")
        for rec in reader:
            rows.append({k: (int(v) if k == "step" else float(v)) if v != "" else None for k, v in rec.items()})
    return rows


def fit(net: FlowNetwork, frames: tuple[np.ndarray, np.ndarray], cfg: TrainConfig, seed: int = 0,
        validate: Callable[[FlowNetwork], float] | None = None,
        on_row: Callable[[dict[str, float | None]], None] | None = None) -> FitResult:
    """Pretraining (no consistency term) followed by the main steps.

    ``frames`` holds (N, H, W, C) first and second frames.  Batches and
    augmentations come from separate streams derived from ``seed``, so two
    runs that differ only in loss settings see the same batches.  The
    validation callable, if given, runs before training, every
    ``cfg.val_every`` steps and after the last step.
    """
    t0 = time.perf_counter()
    f1, f2 = (np.asarray(x, dtype=np.float64) for x in frames)
    if f1.shape[0] == 0:
        raise ConfigError("training set is empty")
    data_seq, aug_seq, reg_seq = np.random.SeedSequence(seed).spawn(3)
    data_rng = np.random.default_rng(data_seq)
    aug_rng = np.random.default_rng(aug_seq)
    reg_rng = np.random.default_rng(reg_seq)
    optimizer = Adam(net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    pre_cfg = replace(cfg, aug_weight=0.0, mode="regularize")
    total = cfg.pretrain_steps + cfg.steps
    initial = validate(net) if validate and total > 0 else None
    rows: list[dict[str, float | None]] = []
    last_val = initial
    streak = 0
    for step in range(1, total + 1):
        step_cfg = pre_cfg if step <= cfg.pretrain_steps else cfg
        if step <= cfg.occlusion_warmup:
            step_cfg = replace(step_cfg, fb_occlusion=False)
        idx = data_rng.choice(f1.shape[0], size=min(cfg.batch_size, f1.shape[0]), replace=False)
        a, b = regular_augment(f1[idx], f2[idx], cfg, reg_rng)
        rep = train_step(net, (a, b), step_cfg, aug_rng, optimizer)
        streak = 0 if rep.finite else streak + 1
        if streak > cfg.divergence_limit:
            raise TrainingDivergedError(f"{streak} consecutive non-finite steps (last at step {step})")
        row: dict[str, float | None] = {"step": step, "L_ph": rep.L_ph, "L_sm": rep.L_sm, "L_aug": rep.L_aug,
                                        "L_all": rep.L_all, "val_aepe": None}
        if validate and (step % cfg.val_every == 0 or step == total):
            last_val = row["val_aepe"] = validate(net)
        rows.append(row)
        if on_row:
            on_row(row)
    return FitResult(net, rows, initial, last_val, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# flat key = value configuration


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, kind: type, key: str):
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is str:
            return value
        if isinstance(kind, tuple):
            return tuple(kind[1](v) for v in value.replace(",", " ").split())
    except ValueError:
        pass
    name = "list" if isinstance(kind, tuple) else kind.__name__
    raise ConfigError(f"{key}: cannot read {value!r} as {name}")


_KINDS = {"float": float, "int": int, "bool": bool, "str": str}


def field_kinds(cls) -> dict[str, object]:
    out = {}
    for f in fields(cls):
        if not f.init:
            continue
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if t.startswith("tuple"):
            out[f.name] = ("tuple", float if "float" in t else int)
        else:
            out[f.name] = _KINDS.get(t, str)
    return out


def build_dataclass(cls, values: dict[str, str]):
    """Instantiate ``cls`` from the keys in ``values`` that name its fields."""
    kinds = field_kinds(cls)
    kwargs = {k: _coerce(v, kinds[k], k) for k, v in values.items() if k in kinds}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_text(*objs) -> str:
    lines = []
    for obj in objs:
        for f in fields(obj):
            if not f.init:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def write_config(path, *objs) -> None:
    Path(path).write_text(config_to_text(*objs))
