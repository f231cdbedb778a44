"""Augmentations for the consistency pass: spatial, appearance and occlusion.

A spatial transform ``tau`` maps pixel coordinates of the *transformed* view
to coordinates in the original view, so a transformed image is
``I'(p) = I(tau(p))``.  Flow and occlusion maps are carried into the new view
consistently with that convention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .flowcore import out_of_bounds, pixel_grid
from .tensor import ContractError, Tensor, grid_sample, matmul

MIN_ABS_DET = 1e-3


class SamplingError(RuntimeError):
    """No valid transform was found within the retry budget."""


@dataclass(frozen=True)
class SpatialTransform:
    """Affine coordinate map ``tau(p) = A p + b`` stored as a 2x3 matrix."""

    matrix: np.ndarray
    kind: str = "affine"
    inverse: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ContractError(f"affine parameters must be 2x3, got {m.shape}")
        a = m[:, :2]
        if abs(np.linalg.det(a)) <= MIN_ABS_DET:
            raise ContractError("transform is (nearly) singular")
        a_inv = np.linalg.inv(a)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "inverse", np.hstack([a_inv, -a_inv @ m[:, 2:]]))

    @classmethod
    def identity(cls) -> "SpatialTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "SpatialTransform":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]))

    @classmethod
    def from_params(cls, angle_deg: float, tx: float, ty: float, zoom: float,
                    extent: tuple[int, int]) -> "SpatialTransform":
        """Rotation and zoom-in about the image centre, then translation.

        ``zoom > 1`` shrinks the sampling grid (the view is magnified).
        """
        h, w = extent
        c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        th = math.radians(angle_deg)
        a = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]) / zoom
        b = c + np.array([tx, ty]) - a @ c
        return cls(np.hstack([a, b[:, None]]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Apply to an array of (x, y) points in the last axis."""
        return points @ self.linear.T + self.matrix[:, 2]

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        return points @ self.inverse[:, :2].T + self.inverse[:, 2]

    def compose(self, other: "SpatialTransform") -> "SpatialTransform":
        """``self o other``: apply ``other`` first."""
        a = self.linear @ other.linear
        b = self.linear @ other.matrix[:, 2] + self.matrix[:, 2]
        return SpatialTransform(np.hstack([a, b[:, None]]))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, SpatialTransform.identity().matrix))

    def as_dict(self) -> dict[str, float]:
        keys = ("a11", "a12", "b1", "a21", "a22", "b2")
        return {k: float(v) for k, v in zip(keys, self.matrix.ravel())}


@dataclass(frozen=True)
class SpatialRanges:
    rotation_deg: float = 15.0
    translation: float = 0.1
    zoom: tuple[float, float] = (1.0, 1.5)

    def __post_init__(self):
        if self.zoom[0] <= 0 or self.zoom[1] < self.zoom[0]:
            raise ContractError(f"bad zoom range {self.zoom}")


def maps_inside(t: SpatialTransform, out_extent: tuple[int, int], src_extent: tuple[int, int],
                tol: float = 1e-9) -> bool:
    """Whether every output pixel maps into the source rectangle (corner test; affine)."""
    ho, wo = out_extent
    h, w = src_extent
    corners = np.array([[0, 0], [wo - 1, 0], [0, ho - 1], [wo - 1, ho - 1]], dtype=np.float64)
    q = t(corners)
    return bool(np.all(q >= -tol) and np.all(q[:, 0] <= w - 1 + tol) and np.all(q[:, 1] <= h - 1 + tol))


def sample_spatial(rng: np.random.Generator, ranges: SpatialRanges, extent: tuple[int, int],
                   out_extent: tuple[int, int] | None = None, max_tries: int = 50) -> SpatialTransform:
    """Draw transforms until one keeps every sampled coordinate inside the image."""
    out_extent = out_extent or extent
    h, w = extent
    for _ in range(max_tries):
        angle = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)
        tx = rng.uniform(-ranges.translation, ranges.translation) * w
        ty = rng.uniform(-ranges.translation, ranges.translation) * h
        zoom = rng.uniform(*ranges.zoom)
        t = SpatialTransform.from_params(angle, tx, ty, zoom, extent)
        if maps_inside(t, out_extent, extent):
            return t
    raise SamplingError(f"no valid spatial transform in {max_tries} draws")


def _coords(t: SpatialTransform, n: int, out_extent: tuple[int, int], dtype) -> np.ndarray:
    ho, wo = out_extent
    grid = t(pixel_grid(ho, wo))
    return np.broadcast_to(grid.astype(dtype), (n, ho, wo, 2))


def _resample(field_, t: SpatialTransform, extent):
    is_tensor = isinstance(field_, Tensor)
    x = field_ if is_tensor else Tensor(np.asarray(field_))
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    extent = extent or x.shape[1:3]
    out = grid_sample(x, Tensor(_coords(t, x.shape[0], extent, x.dtype)))
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out if is_tensor else out.values


def transform_image(img, t: SpatialTransform, extent: tuple[int, int] | None = None):
    """Bilinear resampling ``I'(p) = I(tau(p))`` on an output grid of ``extent``."""
    return _resample(img, t, extent)


def transform_flow(flow, t: SpatialTransform, extent: tuple[int, int] | None = None):
    """Carry a flow field into the transformed view.

    With ``sigma = tau^-1`` (original view -> new view) the intermediate field is
    ``U~(q) = sigma(q + U(q)) - sigma(q)``, sampled bilinearly at ``tau(p)``.
    For an affine ``tau`` the first step reduces to ``A^-1 U(q)``.  Works on
    arrays and, differentiably, on Tensors.
    """
    a_inv_t = t.inverse[:, :2].T
    if isinstance(flow, Tensor):
        inter = matmul(flow, Tensor(a_inv_t.astype(flow.dtype)))
    else:
        inter = np.asarray(flow) @ a_inv_t
    return _resample(inter, t, extent)


def transform_occlusion(occ, transformed_flow, t: SpatialTransform, extent: tuple[int, int] | None = None):
    """Occlusion in the new view: ``(combined, old_in_new_view)``.

    ``old_in_new_view`` is the original map sampled with nearest neighbour
    at ``tau(p)``; pixels whose transformed flow leaves the new view are newly
    occluded, and ``combined`` is the union.
    """
    occ = np.asarray(occ)
    flow = np.asarray(transformed_flow.values if isinstance(transformed_flow, Tensor) else transformed_flow)
    squeeze = occ.ndim == 2
    if squeeze:
        occ, flow = occ[None], flow[None]
    n, h, w = occ.shape
    ho, wo = extent or (h, w)
    if flow.shape[1:3] != (ho, wo):
        raise ContractError(f"flow extent {flow.shape[1:3]} != target extent {(ho, wo)}")
    src = t(pixel_grid(ho, wo))
    xi = np.clip(np.rint(src[..., 0]).astype(np.intp), 0, w - 1)
    yi = np.clip(np.rint(src[..., 1]).astype(np.intp), 0, h - 1)
    old = occ[:, yi, xi].astype(np.uint8)
    new = out_of_bounds(flow + pixel_grid(ho, wo), ho, wo)
    combined = (old | new).astype(np.uint8)
    if squeeze:
        return combined[0], old[0]
    return combined, old


# --------------------------------------------------------------------------
# appearance


@dataclass(frozen=True)
class AppearanceParams:
    brightness: float = 0.0
    contrast: float = 1.0
    color: tuple[float, ...] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0

    def __post_init__(self):
        if self.contrast <= 0 or any(c <= 0 for c in self.color):
            raise ContractError("contrast and colour factors must be positive")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ContractError("sigmas must be non-negative")


@dataclass(frozen=True)
class AppearanceRanges:
    brightness: float = 0.2
    contrast: tuple[float, float] = (0.8, 1.2)
    color: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 0.02
    blur_sigma: float = 1.0


def sample_appearance(rng: np.random.Generator, ranges: AppearanceRanges, channels: int = 3) -> AppearanceParams:
    return AppearanceParams(
        brightness=float(rng.uniform(-ranges.brightness, ranges.brightness)),
        contrast=float(rng.uniform(*ranges.contrast)),
        color=tuple(float(c) for c in rng.uniform(*ranges.color, size=channels)),
        noise_sigma=float(rng.uniform(0, ranges.noise_sigma)),
        blur_sigma=float(rng.uniform(0, ranges.blur_sigma)),
    )


def _appearance_one(img: np.ndarray, p: AppearanceParams, rng: np.random.Generator) -> np.ndarray:
    color = np.asarray(p.color, dtype=np.float64)
    if color.size != img.shape[-1]:
        color = np.resize(color, img.shape[-1])
    out = (img * color - 0.5) * p.contrast + 0.5 + p.brightness
    if p.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(p.blur_sigma, p.blur_sigma, 0), mode="reflect")
    if p.noise_sigma > 0:
        out = out + rng.normal(0.0, p.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def apply_appearance(i1: np.ndarray, i2: np.ndarray, p: AppearanceParams,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Same parameters on both frames; pixel positions are untouched."""
    return _appearance_one(np.asarray(i1, dtype=np.float64), p, rng), \
        _appearance_one(np.asarray(i2, dtype=np.float64), p, rng)


# --------------------------------------------------------------------------
# occlusion hallucination


@dataclass(frozen=True)
class OcclusionHallucinationParams:
    crop: tuple[int, int, int, int]  # x0, y0, width, height
    grid: int = 6
    mask_count: int = 0
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.mask_count < 0 or self.grid < 1:
            raise ContractError("mask count must be >= 0 and grid >= 1")


@dataclass(frozen=True)
class OcclusionRanges:
    crop_fraction: float = 0.85
    grid: int = 6
    max_mask: int = 3
    noise_sigma: float = 0.1


def crop_extent(extent: tuple[int, int], fraction: float, multiple: int = 1) -> tuple[int, int]:
    """Largest extent not above ``fraction`` of ``extent`` that is a multiple of ``multiple``."""
    out = []
    for n in extent:
        m = int(n * fraction) // multiple * multiple
        out.append(max(min(m, n), multiple))
    return out[0], out[1]


def sample_hallucination(rng: np.random.Generator, ranges: OcclusionRanges, extent: tuple[int, int],
                         out_extent: tuple[int, int]) -> OcclusionHallucinationParams:
    h, w = extent
    ho, wo = out_extent
    x0 = int(rng.integers(0, w - wo + 1))
    y0 = int(rng.integers(0, h - ho + 1))
    return OcclusionHallucinationParams(crop=(x0, y0, wo, ho), grid=ranges.grid,
                                        mask_count=int(rng.integers(0, ranges.max_mask + 1)),
                                        noise_sigma=ranges.noise_sigma)


def superpixel_labels(extent: tuple[int, int], grid: int, rng: np.random.Generator) -> np.ndarray:
    """Jittered rectangular grid: an (H, W) map of cell labels in ``[0, grid**2)``."""
    h, w = extent

    def cuts(n):
        base = np.linspace(0, n, grid + 1)
        jitter = rng.uniform(-0.25, 0.25, grid + 1) * (n / grid)
        jitter[[0, -1]] = 0
        return np.round(base + jitter).astype(int)

    ys, xs = cuts(h), cuts(w)
    row = np.searchsorted(ys[1:-1], np.arange(h), side="right")
    col = np.searchsorted(xs[1:-1], np.arange(w), side="right")
    return row[:, None] * grid + col[None, :]


def apply_occlusion_hallucination(i1: np.ndarray, i2: np.ndarray, p: OcclusionHallucinationParams,
                                  rng: np.random.Generator):
    """Crop both frames, then fill some superpixels of the target frame with noise.

    Returns ``(i1', i2', crop, masked)`` where ``crop`` is the crop as a
    SpatialTransform (output extent ``(height, width)`` of the crop) and
    ``masked`` is the boolean map of replaced target pixels.
    """
    x0, y0, cw, ch = p.crop
    h, w = np.shape(i1)[:2]
    if x0 < 0 or y0 < 0 or x0 + cw > w or y0 + ch > h or cw < 1 or ch < 1:
        raise ContractError(f"crop {p.crop} outside image {(h, w)}")
    a = np.array(i1[y0:y0 + ch, x0:x0 + cw], dtype=np.float64)
    b = np.array(i2[y0:y0 + ch, x0:x0 + cw], dtype=np.float64)
    masked = np.zeros((ch, cw), dtype=bool)
    if p.mask_count > 0:
        labels = superpixel_labels((ch, cw), p.grid, rng)
        chosen = rng.choice(p.grid * p.grid, size=min(p.mask_count, p.grid * p.grid), replace=False)
        for lab in chosen:
            cell = labels == lab
            mean = rng.uniform(0.0, 1.0, b.shape[-1])
            b[cell] = np.clip(mean + rng.normal(0.0, p.noise_sigma, (int(cell.sum()), b.shape[-1])), 0, 1)
            masked |= cell
    return a, b, SpatialTransform.translation(x0, y0), masked


# --------------------------------------------------------------------------
# combined augmentation for one training sample


@dataclass(frozen=True)
class TransformRanges:
    spatial: SpatialRanges = SpatialRanges()
    appearance: AppearanceRanges = AppearanceRanges()
    occlusion: OcclusionRanges = OcclusionRanges()
    use_spatial: bool = True
    use_appearance: bool = True
    use_occlusion: bool = True


@dataclass
class Augmentation:
    """One drawn augmentation, ready to apply to a frame pair."""

    transform: SpatialTransform  # combined spatial + crop map, new view -> original
    extent: tuple[int, int]
    appearance: AppearanceParams | None = None
    hallucination: OcclusionHallucinationParams | None = None

    def as_dict(self) -> dict[str, object]:
        out: dict[str, object] = {f"tau.{k}": v for k, v in self.transform.as_dict().items()}
        out["extent"] = f"{self.extent[0]}x{self.extent[1]}"
        if self.appearance is not None:
            out.update({f"appearance.{k}": v for k, v in asdict(self.appearance).items()})
        if self.hallucination is not None:
            out.update({f"occlusion.{k}": v for k, v in asdict(self.hallucination).items()})
        return out


def sample_augmentation(rng: np.random.Generator, ranges: TransformRanges, extent: tuple[int, int],
                        channels: int = 3, multiple: int = 1) -> Augmentation:
    """Draw one augmentation; a failed spatial draw falls back to the identity."""
    out_extent = extent
    hall = None
    if ranges.use_occlusion:
        out_extent = crop_extent(extent, ranges.occlusion.crop_fraction, multiple)
        hall = sample_hallucination(rng, ranges.occlusion, extent, out_extent)
    tau = SpatialTransform.identity()
    if ranges.use_spatial:
        try:
            tau = sample_spatial(rng, ranges.spatial, extent)
        except SamplingError:
            tau = SpatialTransform.identity()
    if hall is not None:
        tau = tau.compose(SpatialTransform.translation(hall.crop[0], hall.crop[1]))
    app = sample_appearance(rng, ranges.appearance, channels) if ranges.use_appearance else None
    return Augmentation(tau, out_extent, app, hall)


def augment_pair(i1: np.ndarray, i2: np.ndarray, aug: Augmentation, rng: np.random.Generator):
    """Apply an augmentation to a frame pair: resample, appearance, then mask-out.

    Returns ``(i1', i2', masked)``.
    """
    a = transform_image(i1, aug.transform, aug.extent)
    b = transform_image(i2, aug.transform, aug.extent)
    if aug.appearance is not None:
        a, b = apply_appearance(a, b, aug.appearance, rng)
    masked = np.zeros(aug.extent, dtype=bool)
    if aug.hallucination is not None and aug.hallucination.mask_count > 0:
        ho, wo = aug.extent
        full = OcclusionHallucinationParams((0, 0, wo, ho), aug.hallucination.grid,
                                            aug.hallucination.mask_count, aug.hallucination.noise_sigma)
        a, b, _, masked = apply_occlusion_hallucination(a, b, full, rng)
    return a, b, masked
