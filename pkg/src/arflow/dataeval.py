"""Synthetic scenes with analytic ground truth, flow files, metrics and renders."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter, map_coordinates

from .flowcore import out_of_bounds, pixel_grid

FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"
SPEED_BINS = (10.0, 40.0)
FL_ABS, FL_REL = 3.0, 0.05


class ConfigError(ValueError):
    """A scene or run specification is invalid."""


class FloFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UndefinedMetricError(ValueError):
    """The metric's pixel mask is empty."""


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    channels: int = 3
    foreground: tuple[int, int] = (1, 3)
    bg_translation: float = 3.0
    bg_rotation_deg: float = 2.0
    bg_zoom: tuple[float, float] = (0.97, 1.03)
    fg_translation: int = 5
    fg_size: tuple[int, int] = (10, 24)
    texture_sigma: float = 2.5

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigError("scene extents must be at least 16")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        lo, hi = self.foreground
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad foreground count range {self.foreground}")
        if self.fg_size[0] < 1 or self.fg_size[1] < self.fg_size[0]:
            raise ConfigError(f"bad foreground size range {self.fg_size}")
        if self.fg_size[1] >= min(self.height, self.width):
            raise ConfigError("foreground layers must be smaller than the frame")
        if self.bg_zoom[0] <= 0 or self.bg_zoom[1] < self.bg_zoom[0]:
            raise ConfigError(f"bad zoom range {self.bg_zoom}")
        if min(self.bg_translation, self.bg_rotation_deg, self.fg_translation, self.texture_sigma) < 0:
            raise ConfigError("ranges must be non-negative")


@dataclass(frozen=True)
class Layer:
    """Axis-aligned textured rectangle covering integer pixels [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int
    tx: float
    ty: float
    texture: np.ndarray = field(repr=False, compare=False)

    def covers(self, x: np.ndarray, y: np.ndarray, shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
        xr = np.rint(x - shift[0])
        yr = np.rint(y - shift[1])
        return (xr >= self.x0) & (xr < self.x1) & (yr >= self.y0) & (yr < self.y1)


@dataclass
class SyntheticScene:
    frame1: np.ndarray
    frame2: np.ndarray
    flow: np.ndarray
    occlusion: np.ndarray
    background_motion: np.ndarray  # 2x3, frame-1 point -> frame-2 point
    layers: list[Layer]
    seed: int | None = None

    def layer_at(self, points: np.ndarray) -> np.ndarray:
        """Top layer index at frame-1 points (0 = background, k = k-th foreground)."""
        x, y = points[..., 0], points[..., 1]
        out = np.zeros(x.shape, dtype=np.intp)
        for k, layer in enumerate(self.layers, start=1):
            out[layer.covers(x, y)] = k
        return out

    def flow_at(self, points: np.ndarray, layer: np.ndarray | None = None) -> np.ndarray:
        """Analytic flow at arbitrary frame-1 points, taken from ``layer`` (default: top layer)."""
        layer = self.layer_at(points) if layer is None else layer
        m = self.background_motion
        out = points @ m[:, :2].T + m[:, 2] - points
        for k, lay in enumerate(self.layers, start=1):
            sel = layer == k
            out[sel] = (lay.tx, lay.ty)
        return out

    def descriptor(self) -> dict[str, object]:
        return {
            "background_motion": self.background_motion.round(6).tolist(),
            "foreground": [(l.x0, l.y0, l.x1, l.y1, l.tx, l.ty) for l in self.layers],
            "seed": self.seed,
        }


def _texture(rng: np.random.Generator, shape: tuple[int, int], channels: int, sigma: float) -> np.ndarray:
    noise = rng.standard_normal(shape + (channels,))
    if sigma > 0:
        noise = gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    lo = noise.min(axis=(0, 1), keepdims=True)
    hi = noise.max(axis=(0, 1), keepdims=True)
    return 0.1 + 0.8 * (noise - lo) / np.maximum(hi - lo, 1e-12)


def _sample_texture(tex: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    chans = [map_coordinates(tex[..., c], [y, x], order=3, mode="nearest") for c in range(tex.shape[-1])]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def _render(h: int, w: int, bg_tex, margin, bg_inv: np.ndarray, layers: list[Layer], second: bool):
    grid = pixel_grid(h, w)
    x, y = grid[..., 0], grid[..., 1]
    src = grid @ bg_inv[:, :2].T + bg_inv[:, 2] if second else grid
    img = _sample_texture(bg_tex, src[..., 0] + margin, src[..., 1] + margin)
    label = np.zeros((h, w), dtype=np.intp)
    for k, lay in enumerate(layers, start=1):
        shift = (lay.tx, lay.ty) if second else (0.0, 0.0)
        cov = lay.covers(x, y, shift)
        if not cov.any():
            continue
        lx = x[cov] - shift[0] - lay.x0
        ly = y[cov] - shift[1] - lay.y0
        img[cov] = _sample_texture(lay.texture, lx, ly)
        label[cov] = k
    return img, label


def _occlusion(flow: np.ndarray, label1: np.ndarray, label2: np.ndarray) -> np.ndarray:
    """Occluded where the target leaves the frame or any bilinear neighbour with
    nonzero weight belongs to another layer in frame 2."""
    h, w = label1.shape
    q = flow + pixel_grid(h, w)
    occ = out_of_bounds(q, h, w).astype(bool)
    qx = np.clip(q[..., 0], 0, w - 1)
    qy = np.clip(q[..., 1], 0, h - 1)
    x0 = np.floor(qx).astype(np.intp)
    y0 = np.floor(qy).astype(np.intp)
    fx, fy = qx - x0, qy - y0
    for dx, dy, weight in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                           (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = np.minimum(x0 + dx, w - 1)
        yi = np.minimum(y0 + dy, h - 1)
        occ |= (weight > 0) & (label2[yi, xi] != label1)
    return occ.astype(np.uint8)


def generate_scene(spec: SceneSpec, rng: np.random.Generator, *, background: np.ndarray | None = None,
                   foreground: Sequence[tuple[int, int, int, int, float, float]] | None = None,
                   seed: int | None = None) -> SyntheticScene:
    """Textured background under a global affine motion plus translating rectangles.

    ``background`` (2x3 motion matrix) and ``foreground`` (x0, y0, x1, y1, tx, ty
    tuples) override the random draws, which is how hand-built test scenes
    are made.
    """
    spec.validate()
    h, w = spec.height, spec.width
    if background is None:
        th = np.radians(rng.uniform(-spec.bg_rotation_deg, spec.bg_rotation_deg))
        s = rng.uniform(*spec.bg_zoom)
        a = s * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        c = np.array([(w - 1) / 2, (h - 1) / 2])
        t = rng.uniform(-spec.bg_translation, spec.bg_translation, 2)
        background = np.hstack([a, (c + t - a @ c)[:, None]])
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (2, 3) or abs(np.linalg.det(background[:, :2])) < 1e-3:
        raise ConfigError("background motion must be an invertible 2x3 affine matrix")
    a_inv = np.linalg.inv(background[:, :2])
    bg_inv = np.hstack([a_inv, (-a_inv @ background[:, 2])[:, None]])

    if foreground is None:
        foreground = []
        for _ in range(int(rng.integers(spec.foreground[0], spec.foreground[1] + 1))):
            fw, fh = rng.integers(spec.fg_size[0], spec.fg_size[1] + 1, 2)
            x0 = int(rng.integers(0, w - fw + 1))
            y0 = int(rng.integers(0, h - fh + 1))
            tx, ty = rng.integers(-spec.fg_translation, spec.fg_translation + 1, 2)
            foreground.append((x0, y0, x0 + int(fw), y0 + int(fh), float(tx), float(ty)))
    layers = []
    for x0, y0, x1, y1, tx, ty in foreground:
        if x1 <= x0 or y1 <= y0:
            raise ConfigError(f"empty foreground rectangle {(x0, y0, x1, y1)}")
        tex = _texture(rng, (y1 - y0 + 4, x1 - x0 + 4), spec.channels, spec.texture_sigma)
        layers.append(Layer(int(x0), int(y0), int(x1), int(y1), float(tx), float(ty), tex))

    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    reach = np.abs(corners @ bg_inv[:, :2].T + bg_inv[:, 2] - corners).max()
    margin = int(np.ceil(reach)) + 4
    bg_tex = _texture(rng, (h + 2 * margin, w + 2 * margin), spec.channels, spec.texture_sigma)

    frame1, label1 = _render(h, w, bg_tex, margin, bg_inv, layers, second=False)
    frame2, label2 = _render(h, w, bg_tex, margin, bg_inv, layers, second=True)
    scene = SyntheticScene(frame1, frame2, np.zeros((h, w, 2)), np.zeros((h, w), np.uint8),
                           background, layers, seed)
    scene.flow = scene.flow_at(pixel_grid(h, w), label1)
    scene.occlusion = _occlusion(scene.flow, label1, label2)
    return scene


def make_scenes(count: int, spec: SceneSpec, seed: int) -> list[SyntheticScene]:
    rng = np.random.default_rng(seed)
    return [generate_scene(spec, rng, seed=seed) for _ in range(count)]


def static_scene(spec: SceneSpec, rng: np.random.Generator) -> SyntheticScene:
    return generate_scene(spec, rng, background=np.array([[1.0, 0, 0], [0, 1.0, 0]]), foreground=[])


# --------------------------------------------------------------------------
# metrics


def _mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask).astype(bool)
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} does not match flow extent {shape}")
    return m


def endpoint_error(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"extents differ: {pred.shape} vs {gt.shape}")
    return np.sqrt(np.sum((pred - gt) ** 2, axis=-1))


def aepe(pred, gt, mask=None) -> float:
    """Average end-point error over ``mask`` (all pixels when omitted)."""
    epe = endpoint_error(pred, gt)
    m = _mask(mask, epe.shape)
    if not m.any():
        raise UndefinedMetricError("AEPE over an empty mask")
    return float(epe[m].mean())


def fl_rate(pred, gt, mask=None) -> float:
    """Fraction of pixels with error > 3 px and > 5% of the true magnitude."""
    epe = endpoint_error(pred, gt)
    m = _mask(mask, epe.shape)
    if not m.any():
        raise UndefinedMetricError("Fl over an empty mask")
    mag = np.sqrt(np.sum(np.asarray(gt, dtype=np.float64) ** 2, axis=-1))
    bad = (epe > FL_ABS) & (epe > FL_REL * mag)
    return float(bad[m].mean())


def speed_bins(gt: np.ndarray) -> dict[str, np.ndarray]:
    """Left-closed speed bins by ground-truth magnitude: [0, 10), [10, 40), [40, inf)."""
    mag = np.sqrt(np.sum(np.asarray(gt, dtype=np.float64) ** 2, axis=-1))
    lo, hi = SPEED_BINS
    return {"s0-10": mag < lo, "s10-40": (mag >= lo) & (mag < hi), "s40+": mag >= hi}


REPORT_FIELDS = ("ALL", "NOC", "OCC", "s0-10", "s10-40", "s40+", "Fl")


@dataclass
class EvalReport:
    """AEPE per region (None when the region is empty) and the Fl rate over all pixels."""

    values: dict[str, float | None]
    pixels: dict[str, int]

    def __getitem__(self, key: str) -> float | None:
        return self.values[key]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value", "pixels"])
        for k in REPORT_FIELDS:
            v = self.values.get(k)
            writer.writerow([k, "" if v is None else f"{v:.6f}", self.pixels.get(k, "")])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def table(self) -> str:
        header = "".join(f"{k:>9}" for k in REPORT_FIELDS)
        cells = "".join(f"{'-':>9}" if self.values.get(k) is None else f"{self.values[k]:>9.4f}"
                        for k in REPORT_FIELDS)
        return header + "\n" + cells


def report_from_predictions(preds: Iterable[np.ndarray], scenes: Sequence[SyntheticScene]) -> EvalReport:
    epes, occs, gts, preds_all = [], [], [], []
    for pred, sc in zip(preds, scenes):
        epes.append(endpoint_error(pred, sc.flow).ravel())
        occs.append(sc.occlusion.ravel().astype(bool))
        gts.append(sc.flow.reshape(-1, 2))
        preds_all.append(np.asarray(pred).reshape(-1, 2))
    if not epes:
        raise ValueError("no scenes to evaluate")
    epe, occ = np.concatenate(epes), np.concatenate(occs)
    gt, pred = np.concatenate(gts), np.concatenate(preds_all)
    regions = {"ALL": np.ones_like(occ), "NOC": ~occ, "OCC": occ}
    regions.update(speed_bins(gt))
    values: dict[str, float | None] = {}
    pixels = {}
    for name, m in regions.items():
        pixels[name] = int(m.sum())
        values[name] = float(epe[m].mean()) if m.any() else None
    try:
        values["Fl"] = fl_rate(pred, gt)
    except UndefinedMetricError:
        values["Fl"] = None
    pixels["Fl"] = pixels["ALL"]
    return EvalReport(values, pixels)


def evaluate(net, scenes: Sequence[SyntheticScene], batch_size: int = 8) -> EvalReport:
    """Evaluate a FlowNetwork, or any ``predictor(i1, i2) -> flow`` callable, on scenes."""
    if not scenes:
        raise ValueError("no scenes to evaluate")
    from .network import FlowNetwork, predict_flow

    if isinstance(net, FlowNetwork):
        def predictor(a, b):
            return predict_flow(net, a, b)
    else:
        predictor = net
    preds = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        shapes = {sc.frame1.shape for sc in chunk}
        if len(shapes) == 1:
            out = predictor(np.stack([sc.frame1 for sc in chunk]), np.stack([sc.frame2 for sc in chunk]))
            preds.extend(np.asarray(out))
        else:
            preds.extend(np.asarray(predictor(sc.frame1, sc.frame2)) for sc in chunk)
    return report_from_predictions(preds, scenes)


# --------------------------------------------------------------------------
# files and renders


def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    data = struct.pack("<fii", FLO_MAGIC, w, h) + np.ascontiguousarray(flow, dtype="<f4").tobytes()
    Path(path).write_bytes(data)


def read_flo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FloFormatError("truncated header", len(data))
    if data[:4] != FLO_TAG:
        raise FloFormatError(f"bad magic {data[:4]!r}", 0)
    w, h = struct.unpack("<ii", data[4:12])
    if w < 0 or h < 0:
        raise FloFormatError(f"negative extent {w}x{h}", 4)
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FloFormatError(f"payload truncated, expected {need} bytes", len(data))
    if len(data) > need:
        raise FloFormatError("trailing bytes after payload", need)
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def flow_to_color(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """HSV colour wheel: hue is direction (0 = +x), saturation is relative magnitude.

    Zero flow is white; magnitudes at or above ``max_magnitude`` are fully
    saturated.  Returns an (H, W, 3) float image in [0, 1].
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    scale = max_magnitude if max_magnitude > 0 else 1.0
    hue = np.mod(np.arctan2(v, u) / (2 * np.pi), 1.0)
    sat = np.clip(mag / scale, 0.0, 1.0)
    return hsv_to_rgb(np.stack([hue, sat, np.ones_like(hue)], axis=-1))


def save_png(path, img: np.ndarray) -> None:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def load_png(path) -> np.ndarray:
    arr = np.asarray(PILImage.open(path), dtype=np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr[..., :3]


def scene_to_dict(scene: SyntheticScene) -> dict[str, object]:
    return scene.descriptor()


def spec_to_dict(spec: SceneSpec) -> dict[str, object]:
    return asdict(spec)
