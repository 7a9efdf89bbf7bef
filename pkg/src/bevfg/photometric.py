"""Inverse/forward view warping and the min-over-views photometric loss.

All warps accept either a dense H x W depth map or a sparse set of source
pixels with one depth each; training uses the sparse form on a random
subset of rays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraIntrinsics, Pose, Z_NEAR
from .errors import EmptyValidSet, ShapeMismatch

# added to the error of invalid views so they never win the per-pixel minimum
_INVALID_PENALTY = 1e6
# reprojections this close outside the image border count as on it
_BORDER_TOL = 1e-9


@dataclass
class ViewPair:
    src_image: np.ndarray
    tgt_image: np.ndarray
    relative_pose: Pose  # src -> tgt
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.src_image = np.asarray(self.src_image, dtype=np.float64)
        self.tgt_image = np.asarray(self.tgt_image, dtype=np.float64)
        if self.src_image.shape != self.tgt_image.shape or self.src_image.ndim != 3:
            raise ShapeMismatch("source and target images must share a 3 x H x W shape")


@dataclass
class WarpResult:
    warped: Tensor  # 3 x H x W, or 3 x N for sparse sources
    validity: np.ndarray


def _source_pixels(pair: ViewPair, depth_src, pixels):
    depth_src = ad.as_tensor(depth_src)
    _, H, W = pair.src_image.shape
    if pixels is None:
        if depth_src.shape != (H, W):
            raise ShapeMismatch(f"depth {depth_src.shape} does not match image {(H, W)}")
        pixels = pair.intrinsics.pixel_grid()
        depth_src = depth_src.reshape(-1)
        dense = True
    else:
        pixels = np.asarray(pixels, dtype=np.float64)
        if depth_src.shape != (len(pixels),):
            raise ShapeMismatch("sparse depth must have one value per pixel")
        dense = False
    return pixels, depth_src, dense


def _reproject(pair: ViewPair, pixels: np.ndarray, depth: Tensor):
    """Target-frame coordinates of source pixels; differentiable in depth."""
    K = pair.intrinsics
    a = K.rays(pixels) @ pair.relative_pose.rotation.T  # R K^-1 p
    t = pair.relative_pose.translation
    d = ad.reshape(depth, (-1, 1))
    x = d * a + t  # N x 3
    z = x.data[:, 2]
    front = z > Z_NEAR
    zs = ad.where(front, x[:, 2], 1.0)
    u = K.fx * x[:, 0] / zs + K.cx
    v = K.fy * x[:, 1] / zs + K.cy
    return u, v, z, front


def inverse_warp(
    pair: ViewPair,
    depth_src,
    pixels: Optional[np.ndarray] = None,
    depth_valid: Optional[np.ndarray] = None,
) -> WarpResult:
    """Synthesize the source view by bilinearly sampling the target image.

    Pixels are invalid when their depth is non-positive (or flagged by
    ``depth_valid``), when the reprojection lies behind z_near, or when it
    falls outside [0, W-1] x [0, H-1] of the target.
    """
    pixels, depth, dense = _source_pixels(pair, depth_src, pixels)
    K = pair.intrinsics
    u, v, _, front = _reproject(pair, pixels, depth)
    uu, vv = u.data, v.data
    tol = _BORDER_TOL
    inside = (uu >= -tol) & (uu <= K.width - 1 + tol) & (vv >= -tol) & (vv <= K.height - 1 + tol)
    valid = front & (depth.data > 0) & inside
    # round-off can push border reprojections a hair outside the image
    coords = ad.stack([ad.clip(u, 0.0, K.width - 1.0), ad.clip(v, 0.0, K.height - 1.0)], axis=1)
    sampled, _ = ad.bilinear_sample(Tensor(pair.tgt_image), coords)  # N x 3
    if depth_valid is not None:
        valid &= np.asarray(depth_valid, dtype=bool).reshape(-1)
    warped = ad.transpose(sampled * valid[:, None].astype(np.float64))
    if dense:
        warped = warped.reshape(3, K.height, K.width)
        valid = valid.reshape(K.height, K.width)
    return WarpResult(warped, valid)


def forward_warp(
    pair: ViewPair,
    depth_src,
    pixels: Optional[np.ndarray] = None,
    depth_valid: Optional[np.ndarray] = None,
) -> WarpResult:
    """Splat source colours onto the target grid at rounded reprojections.

    Collisions keep the source point with the smallest target-frame depth;
    target pixels nobody lands on are invalid. The result is a constant
    image (splat positions carry no gradient).
    """
    pixels, depth, _ = _source_pixels(pair, depth_src, pixels)
    K = pair.intrinsics
    with ad.no_grad():
        u, v, z, front = _reproject(pair, pixels, Tensor(depth.data))
    ui = np.rint(u.data).astype(np.int64)
    vi = np.rint(v.data).astype(np.int64)
    ok = front & (depth.data > 0) & (ui >= 0) & (ui < K.width) & (vi >= 0) & (vi < K.height)
    if depth_valid is not None:
        ok &= np.asarray(depth_valid, dtype=bool).reshape(-1)
    src_idx = np.flatnonzero(ok)
    tgt_lin = vi[src_idx] * K.width + ui[src_idx]
    order = np.lexsort((src_idx, z[src_idx], tgt_lin))
    tgt_sorted = tgt_lin[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    winners = src_idx[order[first]]
    hit = tgt_sorted[first]

    pu = np.rint(pixels[winners, 0]).astype(np.int64)
    pv = np.rint(pixels[winners, 1]).astype(np.int64)
    out = np.zeros((3, K.height * K.width))
    out[:, hit] = pair.src_image[:, pv, pu]
    validity = np.zeros(K.height * K.width, dtype=bool)
    validity[hit] = True
    return WarpResult(Tensor(out.reshape(3, K.height, K.width)), validity.reshape(K.height, K.width))


def _min_over_views(errors: list[Tensor], valids: list[np.ndarray]) -> Optional[Tensor]:
    """Mean over pixels of the per-pixel minimum across views; None if no pixel is valid."""
    valid = np.stack(valids)  # V x N
    any_valid = valid.any(axis=0)
    if not any_valid.any():
        return None
    err = ad.stack(errors) + (~valid) * _INVALID_PENALTY
    best = ad.min_over_axis(err, axis=0)
    keep = np.flatnonzero(any_valid)
    return ad.mean(ad.gather(best, keep))


def photometric_loss(
    targets: Sequence[ViewPair],
    depth_src,
    pixels: Optional[np.ndarray] = None,
    depth_valid: Optional[np.ndarray] = None,
    use_min: bool = True,
) -> Tensor:
    """Inverse-branch plus forward-branch L1 with a per-pixel min over target views.

    The inverse branch compares the re-synthesized source view with the source
    image on the source grid; the forward branch compares splatted source
    colours with each target image on the target grid. Per-pixel L1 is averaged
    over colour channels. ``use_min=False`` averages over valid views instead
    (the literal sum form, kept for ablation).
    """
    if not targets:
        raise ValueError("need at least one target view")
    inv_err, inv_val, fwd_err, fwd_val = [], [], [], []
    for pair in targets:
        iw = inverse_warp(pair, depth_src, pixels, depth_valid)
        if pixels is None:
            ref = pair.src_image.reshape(3, -1)
        else:
            p = np.rint(pixels).astype(np.int64)
            ref = pair.src_image[:, p[:, 1], p[:, 0]]
        warped = iw.warped.reshape(3, -1)
        inv_err.append(ad.mean(ad.abs(warped - ref), axis=0))
        inv_val.append(iw.validity.reshape(-1))

        fw = forward_warp(pair, depth_src, pixels, depth_valid)
        fwd_err.append(ad.mean(ad.abs(fw.warped.reshape(3, -1) - pair.tgt_image.reshape(3, -1)), axis=0))
        fwd_val.append(fw.validity.reshape(-1))

    reduce = _min_over_views if use_min else _mean_over_views
    inv = reduce(inv_err, inv_val)
    fwd = reduce(fwd_err, fwd_val)
    if inv is None and fwd is None:
        raise EmptyValidSet("no pixel is valid in any target view")
    if inv is None:
        return fwd
    if fwd is None:
        return inv
    return inv + fwd


def _mean_over_views(errors: list[Tensor], valids: list[np.ndarray]) -> Optional[Tensor]:
    valid = np.stack(valids).astype(np.float64)
    count = valid.sum(axis=0)
    if not count.any():
        return None
    total = ad.sum(ad.stack(errors) * valid, axis=0)
    keep = np.flatnonzero(count > 0)
    return ad.mean(ad.gather(total, keep) / count[keep])
