"""Semantic pathway: temporal masked autoencoding over a pose-warped voxel grid."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraIntrinsics, Pose, invert
from .errors import IndivisibleShape, ShapeMismatch, WindowMismatch
from .field import (
    ENCODER_STRIDE,
    FeatureEncoder,
    FieldModel,
    density_at_points,
    he_init,
    sample_features,
    sample_rays,
    termination_weights,
    zeros_param,
)


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel lattice in the t0 camera frame (cell centres on the lattice)."""

    x_range: tuple[float, float] = (-8.0, 8.0)
    y_range: tuple[float, float] = (-2.0, 3.0)
    z_range: tuple[float, float] = (0.5, 20.0)
    resolution: tuple[int, int, int] = (32, 8, 48)

    @property
    def pitch(self) -> np.ndarray:
        lo, hi = self.lower, self.upper
        return (hi - lo) / np.asarray(self.resolution)

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]], dtype=np.float64)

    @property
    def origin(self) -> np.ndarray:
        """Centre of cell (0, 0, 0)."""
        return self.lower + 0.5 * self.pitch

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.resolution[axis]) * self.pitch[axis]

    def centers(self) -> np.ndarray:
        """Cell centres, shape (Nx*Ny*Nz, 3) in C order over (x, y, z)."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        g = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)

    def to_index(self, points: np.ndarray) -> np.ndarray:
        """Fractional lattice coordinates; values within 1e-9 of an integer snap to it."""
        idx = (np.asarray(points) - self.origin) / self.pitch
        r = np.rint(idx)
        return np.where(np.abs(idx - r) < 1e-9, r, idx)

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.resolution))


# ----------------------------------------------------------------------
# masking


@dataclass
class MaskSpec:
    """Random patch mask; ``mask`` is a boolean patch lattice, True = masked."""

    patch_size: int = 28
    ratio: float = 0.75
    seed: int = 0
    mask: Optional[np.ndarray] = None

    def pixel_mask(self) -> np.ndarray:
        """Full-resolution boolean mask."""
        if self.mask is None:
            raise ValueError("mask not generated yet")
        p = self.patch_size
        return np.kron(self.mask, np.ones((p, p), dtype=bool)).astype(bool)


def generate_mask(spec: MaskSpec, image_shape) -> MaskSpec:
    """Mask exactly round(ratio * P) of the P non-overlapping patches, chosen uniformly."""
    H, W = image_shape[-2:]
    p = spec.patch_size
    if p <= 0 or H % p or W % p:
        raise IndivisibleShape(f"patch size {p} does not tile a {H} x {W} image")
    if not 0.0 <= spec.ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    ph, pw = H // p, W // p
    total = ph * pw
    count = int(np.floor(spec.ratio * total + 0.5))
    chosen = np.random.default_rng(spec.seed).permutation(total)[:count]
    mask = np.zeros(total, dtype=bool)
    mask[chosen] = True
    return replace(spec, mask=mask.reshape(ph, pw))


def masked_encode(encoder: FeatureEncoder, image, mask) -> Tensor:
    """Encode with masked pixels zeroed and masked locations re-zeroed after each stage.

    ``mask`` is a MaskSpec or a full-resolution boolean array (True = masked).
    """
    pix = mask.pixel_mask() if isinstance(mask, MaskSpec) else np.asarray(mask, dtype=bool)
    return encoder(ad.as_tensor(image), keep=~pix)


# ----------------------------------------------------------------------
# voxel grids


@dataclass
class VoxelGrid:
    """Density-gated voxel features in a camera frame.

    ``features`` (F x Nx x Ny x Nz) already include the density factor;
    ``support`` marks cells carrying information from the t0 frustum (used to
    decide which reconstructed pixels are observable).
    """

    spec: GridSpec
    features: Tensor
    density: Tensor
    mask_occupancy: np.ndarray
    support: np.ndarray

    @property
    def num_features(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_ungated(cls, spec: GridSpec, feat, density, mask_occupancy=None, support=None) -> "VoxelGrid":
        feat, density = ad.as_tensor(feat), ad.as_tensor(density)
        shape = tuple(spec.resolution)
        mo = np.zeros(shape, dtype=bool) if mask_occupancy is None else np.asarray(mask_occupancy, dtype=bool)
        sup = np.ones(shape) if support is None else np.asarray(support, dtype=np.float64)
        return cls(spec, feat * ad.reshape(density, (1,) + shape), density, mo, sup)


def lift_to_voxels(
    sem_feat: Tensor,
    field: FieldModel,
    geo_feat: Tensor,
    K: CameraIntrinsics,
    spec: GridSpec,
    pixel_mask: Optional[np.ndarray] = None,
    detach_density: bool = False,
) -> VoxelGrid:
    """Lift a feature map onto the voxel lattice and gate it by the field density.

    Cells outside the camera frustum get zero feature and zero density.
    ``pixel_mask`` (full resolution, True = masked) sets ``mask_occupancy``.
    With ``detach_density`` the gate is a constant, so no gradient reaches the
    field or the geometric encoder.
    """
    centers = spec.centers()
    shape = tuple(spec.resolution)
    if detach_density:
        with ad.no_grad():
            sigma, uv, inside = density_at_points(field, geo_feat, K, centers)
        sigma = Tensor(sigma.data)
    else:
        sigma, uv, inside = density_at_points(field, geo_feat, K, centers)
    feat, _ = sample_features(sem_feat, np.where(inside[:, None], uv, -1e3))  # V x F
    keep = inside.astype(np.float64)
    density = ad.reshape(sigma * keep, shape)
    gated = ad.reshape(ad.transpose(feat * ad.reshape(sigma * keep, (-1, 1))), (sem_feat.shape[0],) + shape)
    occ = np.zeros(len(centers), dtype=bool)
    if pixel_mask is not None:
        ui = np.clip(np.rint(uv[inside, 0]).astype(np.int64), 0, K.width - 1)
        vi = np.clip(np.rint(uv[inside, 1]).astype(np.int64), 0, K.height - 1)
        occ[inside] = np.asarray(pixel_mask, dtype=bool)[vi, ui]
    return VoxelGrid(spec, gated, density, occ.reshape(shape), keep.reshape(shape))


def densify(grid: VoxelGrid, token: Tensor) -> VoxelGrid:
    """Replace masked cells by the shared mask token, keeping the density gate."""
    if not grid.mask_occupancy.any():
        return grid
    shape = grid.density.shape
    m = grid.mask_occupancy.astype(np.float64)
    filled = ad.reshape(token, (-1, 1, 1, 1)) * ad.reshape(grid.density * m, (1,) + shape)
    features = grid.features * (1.0 - m) + filled
    return VoxelGrid(grid.spec, features, grid.density, grid.mask_occupancy, grid.support)


def _stack_channels(grid: VoxelGrid, extra: Sequence[np.ndarray]) -> Tensor:
    """Features, density and constant auxiliary channels as one (F+1+E) x Nx x Ny x Nz tensor."""
    shape = tuple(grid.spec.resolution)
    parts = [grid.features, ad.reshape(grid.density, (1,) + shape)]
    if extra:
        parts.append(Tensor(np.stack([np.asarray(e, dtype=np.float64) for e in extra])))
    return ad.concat(parts, axis=0)


def warp_voxels(grid: VoxelGrid, pose: Pose) -> VoxelGrid:
    """Transport the grid by ``pose`` (T_0->i) via backward trilinear resampling.

    The output cell at centre c reads the input at T^-1 c; samples outside the
    input lattice are zero.
    """
    spec = grid.spec
    shape = tuple(spec.resolution)
    src = spec.to_index(invert(pose).apply(spec.centers()))
    F = grid.num_features
    stacked = _stack_channels(grid, [grid.support, grid.mask_occupancy])
    out = ad.trilinear_sample(stacked, src)  # V x (F+3)
    feats = ad.reshape(ad.transpose(out[:, :F]), (F,) + shape)
    density = ad.reshape(out[:, F], shape)
    aux = out.data[:, F + 1 :]
    return VoxelGrid(spec, feats, density, aux[:, 1].reshape(shape) >= 0.5, aux[:, 0].reshape(shape))


def collapse_rays(
    grid: VoxelGrid,
    K: CameraIntrinsics,
    pixels: np.ndarray,
    k: int = 32,
    d_min: float = 0.5,
    d_max: float = 22.0,
    alpha_formula: str = "standard",
):
    """Composite grid features along the rays through full-resolution ``pixels``.

    Returns (N x F Tensor, N observability flags). A ray is observable when
    some sample on it falls in a cell with t0 frustum support.
    """
    samples = sample_rays(K, pixels, k, d_min, d_max)
    idx = grid.spec.to_index(samples.points.reshape(-1, 3))
    F = grid.num_features
    N = len(samples.pixels)
    vals = ad.trilinear_sample(_stack_channels(grid, [grid.support]), idx)  # (N*k) x (F+2)
    sigma = ad.reshape(vals[:, F], (N, k))
    _, weights = termination_weights(sigma, samples.distances, alpha_formula)
    feats = ad.reshape(vals[:, :F], (N, k, F))
    out = ad.sum(feats * ad.reshape(weights, (N, k, 1)), axis=1)
    observable = vals.data[:, F + 1].reshape(N, k).max(axis=1) >= 0.5
    return out, observable


def collapse_to_fv(
    grid: VoxelGrid,
    K: CameraIntrinsics,
    k: int = 32,
    d_min: float = 0.5,
    d_max: float = 22.0,
    stride: int = ENCODER_STRIDE,
    alpha_formula: str = "standard",
):
    """Project the grid into the image at 1/``stride`` resolution.

    Rays through every output pixel are marched with k samples; sampled
    densities give termination weights and the output is sum_i w_i feat_i.
    Returns (F x h x w Tensor, h x w observability mask).
    """
    Ks = K.scaled(stride)
    h, w = Ks.height, Ks.width
    out, observable = collapse_rays(grid, K, Ks.pixel_grid() * stride, k, d_min, d_max, alpha_formula)
    return ad.reshape(ad.transpose(out), (grid.num_features, h, w)), observable.reshape(h, w)


def patch_pixels(patch_ids: np.ndarray, patch: int, lattice_width: int, stride: int = ENCODER_STRIDE) -> np.ndarray:
    """Full-resolution (u, v) of the output pixels of the given patches.

    ``patch`` is the patch side at output resolution. Rows are ordered patch
    by patch, then row-major inside each patch.
    """
    ids = np.asarray(patch_ids, dtype=np.int64)
    pr, pc = np.divmod(ids, lattice_width)
    dy, dx = np.divmod(np.arange(patch * patch), patch)
    v = pr[:, None] * patch + dy[None]
    u = pc[:, None] * patch + dx[None]
    return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64) * stride


class ReconHead:
    """Per-pixel MLP from collapsed features to (patch-normalized) RGB."""

    def __init__(self, rng: np.random.Generator, in_channels: int, hidden: int = 32):
        self.params = {
            "w1": he_init(rng, (in_channels, hidden), in_channels),
            "b1": zeros_param(hidden),
            "w2": Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 3)), requires_grad=True),
            "b2": zeros_param(3),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, feats: Tensor) -> Tensor:
        F, h, w = feats.shape
        y = self.rows(ad.transpose(ad.reshape(feats, (F, h * w))))
        return ad.reshape(ad.transpose(y), (3, h, w))

    def rows(self, feats: Tensor) -> Tensor:
        """Per-pixel prediction for N x F feature rows (N x 3)."""
        p = self.params
        return ad.relu(feats @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


# ----------------------------------------------------------------------
# reconstruction objective


def downsample_area(image: np.ndarray, factor: int) -> np.ndarray:
    """Block-average a C x H x W image by ``factor`` (dimensions must divide)."""
    C, H, W = image.shape
    if H % factor or W % factor:
        raise IndivisibleShape(f"{H} x {W} is not divisible by {factor}")
    return image.reshape(C, H // factor, factor, W // factor, factor).mean(axis=(2, 4))


def _patches(x, s: int):
    """C x h x w -> (P, C*s*s) rows, one per s x s patch in row-major patch order."""
    if isinstance(x, Tensor):
        C, h, w = x.shape
        t = ad.reshape(x, (C, h // s, s, w // s, s))
        return ad.reshape(ad.transpose(t, (1, 3, 0, 2, 4)), ((h // s) * (w // s), C * s * s))
    C, h, w = x.shape
    return x.reshape(C, h // s, s, w // s, s).transpose(1, 3, 0, 2, 4).reshape((h // s) * (w // s), C * s * s)


def normalize_patches(reference: np.ndarray, patch: int, std_floor: float = 1e-6) -> np.ndarray:
    """Zero-mean, unit-std version of each patch (statistics over pixels and channels)."""
    rows = _patches(np.asarray(reference, dtype=np.float64), patch)
    mu = rows.mean(axis=1, keepdims=True)
    sd = np.maximum(rows.std(axis=1, keepdims=True), std_floor)
    return (rows - mu) / sd


def reconstruction_loss(
    predicted: Sequence[Tensor],
    reference: Sequence[np.ndarray],
    mask: np.ndarray,
    window: int,
    valid: Optional[Sequence[np.ndarray]] = None,
) -> Tensor:
    """Sum over timesteps 0..n of the mean per-patch squared error.

    ``mask`` is the patch lattice (True = masked) at the resolution of
    ``predicted``; the patch side is inferred from the two shapes. The t=0
    term covers masked patches (all patches when nothing is masked); t>0 terms
    cover patches flagged in ``valid[t-1]`` (all patches when omitted).
    """
    if len(predicted) != window + 1 or len(reference) != window + 1:
        raise WindowMismatch(f"expected {window + 1} timesteps, got {len(predicted)} and {len(reference)}")
    mask = np.asarray(mask, dtype=bool)
    _, h, _ = predicted[0].shape
    s = h // mask.shape[0]
    total = None
    for t, (pred, ref) in enumerate(zip(predicted, reference)):
        if pred.shape != np.shape(ref):
            raise ShapeMismatch(f"prediction {pred.shape} vs reference {np.shape(ref)} at t={t}")
        if t == 0:
            sel = mask.ravel() if mask.any() else np.ones(mask.size, dtype=bool)
        elif valid is not None:
            sel = np.asarray(valid[t - 1], dtype=bool).ravel()
        else:
            sel = np.ones(mask.size, dtype=bool)
        keep = np.flatnonzero(sel)
        if keep.size == 0:
            continue
        target = normalize_patches(ref, s)[keep]
        rows = ad.gather(_patches(pred, s), keep, axis=0)
        term = ad.mean((rows - target) ** 2)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def patch_validity(observable: np.ndarray, patch: int) -> np.ndarray:
    """A patch is valid when every pixel in it is observable."""
    o = np.asarray(observable, dtype=bool)
    h, w = o.shape
    return o.reshape(h // patch, patch, w // patch, patch).all(axis=(1, 3))


def sampled_patch_loss(pred_rows: Tensor, reference: np.ndarray, patch_ids: np.ndarray, patch: int) -> Tensor:
    """Mean squared error over a subset of patches.

    ``pred_rows`` (N x 3) are ordered as produced by :func:`patch_pixels`;
    ``reference`` is the C x h x w image at output resolution. Averaging over
    a uniformly drawn subset is an unbiased estimate of the patch-mean term of
    :func:`reconstruction_loss`.
    """
    ids = np.asarray(patch_ids, dtype=np.int64)
    P = len(ids)
    if P == 0:
        return Tensor(0.0)
    rows = ad.reshape(ad.transpose(ad.reshape(pred_rows, (P, patch * patch, 3)), (0, 2, 1)), (P, 3 * patch * patch))
    target = normalize_patches(reference, patch)[ids]
    return ad.mean((rows - target) ** 2)
