"""The full network: geometric pathway, semantic pathway and the two heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..bev import BevHead, collapse_to_bev, predict_classes
from ..camera import CameraIntrinsics, Pose
from ..errors import CheckpointError, ShapeMismatch
from ..field import FeatureEncoder, FieldModel, render_depth
from ..photometric import ViewPair, photometric_loss
from ..tmae import (
    MaskSpec,
    ReconHead,
    collapse_rays,
    densify,
    downsample_area,
    generate_mask,
    lift_to_voxels,
    masked_encode,
    patch_pixels,
    sampled_patch_loss,
    warp_voxels,
)
from .config import Config

# rays rendered per chunk when producing full depth maps
_RENDER_CHUNK = 4096


@dataclass
class Window:
    """Frames I_0..I_n of one scene with poses T_0->i (``poses[0]`` is the identity)."""

    images: list[np.ndarray]
    poses: list[Pose]
    intrinsics: CameraIntrinsics
    stereo_image: Optional[np.ndarray] = None
    stereo_pose: Optional[Pose] = None  # frame-0 camera -> second camera

    @property
    def n(self) -> int:
        return len(self.images) - 1


@dataclass
class StepDraws:
    """Random numbers consumed by one pretraining step, drawn whether or not used."""

    ray_ids: np.ndarray
    jitter_seed: int
    mask_seed: int
    patch_seed: int

    @classmethod
    def draw(cls, rng: np.random.Generator, num_pixels: int, num_rays: int) -> "StepDraws":
        ids = rng.choice(num_pixels, size=min(num_rays, num_pixels), replace=False)
        a, b, c = (int(x) for x in rng.integers(0, 2**31 - 1, size=3))
        return cls(np.sort(ids), a, b, c)


class Network:
    def __init__(self, config: Config, seed: Optional[int] = None):
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.geo_encoder = FeatureEncoder(rng, config.feat_dim)
        self.field = FieldModel(
            rng, config.feat_dim, config.field_hidden, config.pe_bands, config.d_max, config.density_bias
        )
        self.sem_encoder = FeatureEncoder(rng, config.sem_dim)
        self.mask_token = Tensor(np.zeros(config.sem_dim), requires_grad=True)
        self.recon_head = ReconHead(rng, config.sem_dim, config.recon_hidden)
        self.bev_head = BevHead(rng, config.sem_dim, config.bev_hidden)
        self.grid_spec = config.grid

    # ------------------------------------------------------------------
    # parameters

    def _groups(self) -> dict[str, dict[str, Tensor]]:
        return {
            "geo": self.geo_encoder.parameters(),
            "field": self.field.parameters(),
            "sem": self.sem_encoder.parameters(),
            "token": {"value": self.mask_token},
            "recon": self.recon_head.parameters(),
            "bev": self.bev_head.parameters(),
        }

    def named_parameters(self, groups=None) -> dict[str, Tensor]:
        out = {}
        for g, params in self._groups().items():
            if groups is None or g in groups:
                out.update({f"{g}.{k}": v for k, v in params.items()})
        return out

    def pretrain_parameters(self) -> dict[str, Tensor]:
        groups = []
        if self.config.use_geometric:
            groups += ["geo", "field"]
        if self.config.use_semantic:
            groups += ["sem", "token", "recon"]
        return self.named_parameters(groups)

    def finetune_parameters(self) -> dict[str, Tensor]:
        return self.named_parameters(["geo", "field", "sem", "bev"])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray], skip_prefixes=()) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unknown = sorted(set(state) - set(params))
        if missing or unknown:
            raise CheckpointError(f"parameter names differ (missing {missing}, unexpected {unknown})")
        for name, p in params.items():
            if any(name.startswith(s) for s in skip_prefixes):
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.copy()

    # ------------------------------------------------------------------
    # geometric pathway

    def photometric(self, window: Window, draws: StepDraws) -> Tensor:
        """Photometric loss on a random subset of source rays."""
        c = self.config
        K = window.intrinsics
        src = window.images[0]
        if src.shape[1:] != (K.height, K.width):
            raise ShapeMismatch("window images do not match the intrinsics")
        pixels = K.pixel_grid()[draws.ray_ids]
        feats = self.geo_encoder(Tensor(src))
        depth, acc, _ = render_depth(
            self.field, feats, K, pixels, c.num_samples, c.d_min, c.d_max, draws.jitter_seed, c.alpha_formula
        )
        pairs = [ViewPair(src, window.images[i], window.poses[i], K) for i in range(1, window.n + 1)]
        if c.use_stereo and window.stereo_image is not None:
            pairs.append(ViewPair(src, window.stereo_image, window.stereo_pose, K))
        return photometric_loss(pairs, depth, pixels, acc > 0.5, use_min=c.use_min)

    def depth_map(self, image: np.ndarray, K: CameraIntrinsics):
        """Full-resolution z-depth and accumulated weight, without gradients."""
        c = self.config
        pix = K.pixel_grid()
        depth = np.empty(len(pix))
        acc = np.empty(len(pix))
        with ad.no_grad():
            feats = self.geo_encoder(Tensor(image))
            for s in range(0, len(pix), _RENDER_CHUNK):
                d, a, _ = render_depth(
                    self.field, feats, K, pix[s : s + _RENDER_CHUNK], c.num_samples, c.d_min, c.d_max,
                    alpha_formula=c.alpha_formula,
                )
                depth[s : s + _RENDER_CHUNK] = d.data
                acc[s : s + _RENDER_CHUNK] = a
        return depth.reshape(K.height, K.width), acc.reshape(K.height, K.width)

    # ------------------------------------------------------------------
    # semantic pathway

    def reconstruction(self, window: Window, draws: StepDraws) -> Tensor:
        """Temporal masked-autoencoding loss, estimated on a random subset of patches per timestep."""
        c = self.config
        K = window.intrinsics
        img0 = window.images[0]
        mask = generate_mask(MaskSpec(c.patch_size, c.mask_ratio, draws.mask_seed), img0.shape)
        sem = masked_encode(self.sem_encoder, img0, mask)
        with ad.no_grad():
            geo = self.geo_encoder(Tensor(img0))
        grid = lift_to_voxels(sem, self.field, geo, K, self.grid_spec, mask.pixel_mask(), detach_density=True)
        grid = densify(grid, self.mask_token)

        s = c.patch_size // 4
        lattice_w = mask.mask.shape[1]
        masked_ids = np.flatnonzero(mask.mask.ravel())
        all_ids = np.arange(mask.mask.size)
        prng = np.random.default_rng(draws.patch_seed)
        total = None
        for t in range(window.n + 1):
            pool = (masked_ids if masked_ids.size else all_ids) if t == 0 else all_ids
            ids = np.sort(prng.choice(pool, size=min(c.recon_patches, pool.size), replace=False))
            g = grid if t == 0 else warp_voxels(grid, window.poses[t])
            feats, observable = collapse_rays(
                g, K, patch_pixels(ids, s, lattice_w), c.num_samples, c.d_min, c.collapse_d_max, c.alpha_formula
            )
            if t > 0:
                ok = observable.reshape(len(ids), s * s).all(axis=1)
                if not ok.any():
                    continue
                if not ok.all():
                    keep_rows = np.flatnonzero(np.repeat(ok, s * s))
                    feats = ad.gather(feats, keep_rows, axis=0)
                    ids = ids[ok]
            ref = downsample_area(window.images[t], 4)
            term = sampled_patch_loss(self.recon_head.rows(feats), ref, ids, s)
            total = term if total is None else total + term
        return total if total is not None else Tensor(0.0)

    # ------------------------------------------------------------------
    # BEV

    def bev_logits(self, image: np.ndarray, K: CameraIntrinsics) -> Tensor:
        """Unmasked semantic features lifted, density-gated and collapsed to the ground plane."""
        img = Tensor(np.asarray(image, dtype=np.float64))
        sem = self.sem_encoder(img)
        geo = self.geo_encoder(img)
        grid = lift_to_voxels(sem, self.field, geo, K, self.grid_spec)
        return self.bev_head(collapse_to_bev(grid))

    def predict(self, image: np.ndarray, K: CameraIntrinsics):
        """(BEV class map, z-depth map, accumulated weight) for one image."""
        with ad.no_grad():
            logits = self.bev_logits(image, K)
        depth, acc = self.depth_map(image, K)
        return predict_classes(logits), depth, acc
