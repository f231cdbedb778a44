"""Flow geometry and the unsupervised loss terms.

Arrays follow NHWC layout; unbatched (H, W, C) inputs are accepted
everywhere and given a batch axis internally.  Flow channel 0 is the
horizontal displacement, channel 1 the vertical one, and pixel ``p`` of the
source frame corresponds to ``p + flow(p)`` in the target frame.  Occlusion
maps use 1 for occluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor, box_filter, concat, grid_sample

FB_ALPHA1 = 0.01
FB_ALPHA2 = 0.5
CHARBONNIER_Q = 0.4
CHARBONNIER_EPS = 0.01


@dataclass(frozen=True)
class PhotometricConfig:
    l1_weight: float = 0.15
    ssim_weight: float = 0.85
    ssim_window: int = 7

    def __post_init__(self):
        if self.l1_weight < 0 or self.ssim_weight < 0:
            raise ContractError("photometric weights must be non-negative")
        if self.l1_weight == 0 and self.ssim_weight == 0:
            raise ContractError("photometric weights cannot both be zero")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ContractError("SSIM window must be a positive odd size")


def as_image(arr) -> np.ndarray:
    """Clamp to [0, 1]; images with non-finite entries are rejected."""
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("image has non-finite intensities")
    return np.clip(arr, 0.0, 1.0)


def _batched(x):
    """Return (tensor with batch axis, whether a batch axis was added, was_tensor)."""
    was_tensor = isinstance(x, Tensor)
    t = x if was_tensor else Tensor(np.asarray(x))
    if t.ndim == 3:
        return t.reshape((1,) + t.shape), True, was_tensor
    if t.ndim != 4:
        raise ContractError(f"expected (H, W, C) or (N, H, W, C), got {t.shape}")
    return t, False, was_tensor


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return t.reshape(t.shape[1:]) if squeeze else t


def pixel_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """(H, W, 2) array holding each pixel's own (x, y) coordinate."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs, ys], axis=-1).astype(dtype)


def out_of_bounds(coords: np.ndarray, h: int, w: int) -> np.ndarray:
    x, y = coords[..., 0], coords[..., 1]
    return ((x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)).astype(np.uint8)


def _check_extent(a, b, what: str) -> None:
    if a.shape[-3:-1] != b.shape[-3:-1] or a.shape[:-3] != b.shape[:-3]:
        raise ContractError(f"{what}: extents differ, {a.shape} vs {b.shape}")


def warp(target, flow):
    """Sample ``target`` at ``p + flow(p)`` for every pixel ``p``.

    Returns ``(warped, oob)``.  ``warped`` is a Tensor when either input is
    one (differentiable w.r.t. both), a plain array otherwise.  ``oob`` is a
    uint8 map, 1 where the sample point left the image rectangle and had
    to be clamped.
    """
    _check_extent(target, flow, "warp")
    img, squeeze, t_img = _batched(target)
    fl, _, t_fl = _batched(flow)
    n, h, w, _ = img.shape
    coords = fl + pixel_grid(h, w, fl.dtype)
    warped = _unbatch(grid_sample(img, coords), squeeze)
    oob = out_of_bounds(coords.values, h, w)
    if squeeze:
        oob = oob[0]
    if t_img or t_fl:
        return warped, oob
    return warped.values, oob


def _sample_np(field: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return grid_sample(Tensor(field), Tensor(coords)).values


def occlusion_forward_backward(forward, backward, alpha1: float = FB_ALPHA1, alpha2: float = FB_ALPHA2) -> np.ndarray:
    """Forward-backward consistency check; 1 marks occluded pixels.

    ``p`` is occluded when ``|Uf(p) + Ub(q)|^2 >= alpha1 (|Uf(p)|^2 + |Ub(q)|^2) + alpha2``
    with ``q = p + Uf(p)``, or when ``q`` lies outside the image.
    """
    uf = np.asarray(forward.values if isinstance(forward, Tensor) else forward, dtype=np.float64)
    ub = np.asarray(backward.values if isinstance(backward, Tensor) else backward, dtype=np.float64)
    if uf.shape != ub.shape:
        raise ContractError(f"flow extents differ: {uf.shape} vs {ub.shape}")
    squeeze = uf.ndim == 3
    if squeeze:
        uf, ub = uf[None], ub[None]
    _, h, w, _ = uf.shape
    coords = uf + pixel_grid(h, w)
    ub_at = _sample_np(ub, coords)
    diff = np.sum((uf + ub_at) ** 2, axis=-1)
    mag = np.sum(uf ** 2, axis=-1) + np.sum(ub_at ** 2, axis=-1)
    occ = (diff >= alpha1 * mag + alpha2) | out_of_bounds(coords, h, w).astype(bool)
    occ = occ.astype(np.uint8)
    return occ[0] if squeeze else occ


def _masked_mean(per_pixel: Tensor, occ) -> Tensor:
    """Mean of an (N, H, W) tensor over pixels where ``occ`` is 0; 0 if none."""
    keep = 1.0 - np.broadcast_to(np.asarray(occ, dtype=per_pixel.dtype), per_pixel.shape)
    count = float(keep.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=per_pixel.dtype))
    return (per_pixel * keep).sum() * (1.0 / count)


def ssim_map(x: Tensor, y: Tensor, window: int = 7) -> Tensor:
    """Per-pixel, per-channel SSIM over ``window`` x ``window`` box windows."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_x = box_filter(x, window)
    mu_y = box_filter(y, window)
    sxx = box_filter(x * x, window) - mu_x * mu_x
    syy = box_filter(y * y, window) - mu_y * mu_y
    sxy = box_filter(x * y, window) - mu_x * mu_y
    num = (mu_x * mu_y * 2.0 + c1) * (sxy * 2.0 + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def photometric_loss(ref, warped, occ, cfg: PhotometricConfig | None = None) -> Tensor:
    """Mean over non-occluded pixels of ``w1 * L1 + w2 * (1 - SSIM) / 2``.

    Both terms are averaged over channels before weighting.  Occluded pixels
    of ``warped`` are replaced by ``ref`` before SSIM, so the loss has no
    dependence on the warp at occluded pixels.
    """
    cfg = cfg or PhotometricConfig()
    _check_extent(ref, warped, "photometric_loss")
    a, squeeze, _ = _batched(ref)
    b, _, _ = _batched(warped)
    occ = np.asarray(occ)
    if squeeze:
        occ = occ[None]
    if occ.shape != a.shape[:3]:
        raise ContractError(f"occlusion map {occ.shape} does not fit images {a.shape}")
    if a.dtype != b.dtype and not a.requires_grad:
        a = Tensor(a.values.astype(b.dtype))
    per_pixel = None
    if cfg.l1_weight > 0:
        per_pixel = abs(a - b).mean(axis=-1) * cfg.l1_weight
    if cfg.ssim_weight > 0:
        bs = b
        if occ.any():
            # SSIM windows reach into occluded pixels: fill them with the reference
            # so the loss does not depend on the warp there at all
            m = occ[..., None].astype(b.dtype)
            bs = b * (1.0 - m) + a * m
        dssim = ((1.0 - ssim_map(a, bs, cfg.ssim_window)) * 0.5).mean(axis=-1) * cfg.ssim_weight
        per_pixel = dssim if per_pixel is None else per_pixel + dssim
    return _masked_mean(per_pixel, occ)


def smoothness_loss(flow, ref, edge_weight: float = 10.0) -> Tensor:
    """Edge-aware first-order smoothness.

    For each direction d in (x, y), the mean over pixels of
    ``(|d u| + |d v|) * exp(-edge_weight * mean_c |d I|)`` with forward
    differences; the two directional means are summed.
    """
    _check_extent(flow, ref, "smoothness_loss")
    u, _, _ = _batched(flow)
    img = np.asarray(ref.values if isinstance(ref, Tensor) else ref)
    if img.ndim == 3:
        img = img[None]
    img = img.astype(u.dtype, copy=False)
    gx_img = np.abs(img[:, :, 1:] - img[:, :, :-1]).mean(axis=-1)
    gy_img = np.abs(img[:, 1:] - img[:, :-1]).mean(axis=-1)
    wx = np.exp(-edge_weight * gx_img)
    wy = np.exp(-edge_weight * gy_img)
    dx = abs(u[:, :, 1:] - u[:, :, :-1]).sum(axis=-1)
    dy = abs(u[:, 1:] - u[:, :-1]).sum(axis=-1)
    return (dx * wx).mean() + (dy * wy).mean()


def charbonnier_consistency(reference, prediction, scope, q: float = CHARBONNIER_Q,
                            eps: float = CHARBONNIER_EPS) -> Tensor:
    """Mean over in-scope pixels (scope 0) of ``(|du| + |dv| + eps) ** q``.

    The caller is expected to have passed ``reference`` through
    ``stop_gradient``; this function does not detach it.
    """
    _check_extent(reference, prediction, "charbonnier_consistency")
    r, squeeze, _ = _batched(reference)
    p, _, _ = _batched(prediction)
    scope = np.asarray(scope)
    if squeeze:
        scope = scope[None]
    per_pixel = (abs(r - p).sum(axis=-1) + eps) ** q
    return _masked_mean(per_pixel, scope)


def stack_batch(tensors) -> Tensor:
    """Concatenate a list of NHWC tensors along the batch axis."""
    return concat(list(tensors), axis=0)
