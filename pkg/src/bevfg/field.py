"""Geometric pathway: image-conditioned density field and depth compositing."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraIntrinsics, Z_NEAR, project
from .errors import BadRange, NonMonotoneSamples, ShapeMismatch

ENCODER_STRIDE = 4
ALPHA_FORMULAS = ("standard", "paper_literal_clamped")


def he_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# ----------------------------------------------------------------------
# encoders


class FeatureEncoder:
    """Three strided conv stages producing a feature map at 1/4 resolution.

    Stage 3 is merged with a 1x1 projection of the pooled stage-1 map so the
    output mixes two scales. An optional ``keep`` mask (H x W, 1 = visible)
    zeroes the input and re-zeroes every intermediate map at locations whose
    receptive-field centre is masked.
    """

    def __init__(self, rng: np.random.Generator, out_channels: int = 16, widths=(16, 24)):
        c1, c2 = widths
        self.out_channels = out_channels
        self.params = {
            "w1": he_init(rng, (c1, 3, 3, 3), 27),
            "b1": zeros_param(c1),
            "w2": he_init(rng, (c2, c1, 3, 3), 9 * c1),
            "b2": zeros_param(c2),
            "w3": he_init(rng, (out_channels, c2, 3, 3), 9 * c2),
            "b3": zeros_param(out_channels),
            "wm": he_init(rng, (out_channels, c1, 1, 1), c1),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, image: Tensor, keep: Optional[np.ndarray] = None) -> Tensor:
        p = self.params
        if keep is not None:
            keep = np.asarray(keep, dtype=np.float64)
            image = image * keep[None]
        s1 = ad.relu(ad.conv2d(image, p["w1"], p["b1"], stride=2, padding=1))
        k1 = None if keep is None else keep[::2, ::2]
        if k1 is not None:
            s1 = s1 * k1[None]
        s2 = ad.relu(ad.conv2d(s1, p["w2"], p["b2"], stride=2, padding=1))
        k2 = None if keep is None else k1[::2, ::2]
        if k2 is not None:
            s2 = s2 * k2[None]
        s3 = ad.conv2d(s2, p["w3"], p["b3"], stride=1, padding=1)
        merged = s3 + ad.conv2d(ad.avg_pool2(s1), p["wm"])
        if k2 is not None:
            merged = merged * k2[None]
        return merged


# ----------------------------------------------------------------------
# field


def positional_encoding(u: np.ndarray, d: np.ndarray, bands: int) -> np.ndarray:
    """Sinusoidal encoding of normalized (u1, u2, d) triples.

    ``u`` is (..., 2) in [0, 1]^2 and ``d`` (...) is distance over d_max.
    Output is (..., 6 * bands): all sines, then all cosines, each ordered by
    band then scalar.
    """
    x = np.concatenate([np.asarray(u, dtype=np.float64), np.asarray(d, dtype=np.float64)[..., None]], axis=-1)
    freqs = (2.0 ** np.arange(bands)) * np.pi
    arg = (freqs[:, None] * x[..., None, :]).reshape(*x.shape[:-1], 3 * bands)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


class FieldModel:
    """Two-layer MLP mapping (image feature, encoding) to softplus density."""

    def __init__(
        self,
        rng: np.random.Generator,
        feat_dim: int = 16,
        hidden: int = 64,
        pe_bands: int = 6,
        d_max: float = 40.0,
        density_bias: float = -1.0,
    ):
        self.feat_dim = feat_dim
        self.pe_bands = pe_bands
        self.d_max = d_max
        n_in = feat_dim + 6 * pe_bands
        self.params = {
            "w1": he_init(rng, (n_in, hidden), n_in),
            "b1": zeros_param(hidden),
            "w2": Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 1)), requires_grad=True),
            "b2": Tensor(np.full(1, density_bias), requires_grad=True),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def encode(self, K: CameraIntrinsics, uv: np.ndarray, dist: np.ndarray) -> np.ndarray:
        un = np.stack([uv[..., 0] / max(K.width - 1, 1), uv[..., 1] / max(K.height - 1, 1)], axis=-1)
        return positional_encoding(un, dist / self.d_max, self.pe_bands)

    def mlp(self, feat: Tensor, enc: np.ndarray) -> Tensor:
        """sigma = softplus(phi(concat(feat, enc))) for row-aligned inputs."""
        p = self.params
        x = ad.concat([feat, Tensor(enc)], axis=1)
        h = ad.relu(x @ p["w1"] + p["b1"])
        return ad.softplus(h @ p["w2"] + p["b2"]).reshape(-1)


def sample_features(feat_map: Tensor, uv: np.ndarray, stride: int = ENCODER_STRIDE) -> tuple[Tensor, np.ndarray]:
    """Bilinear feature lookup at full-resolution pixel coordinates."""
    return ad.bilinear_sample(feat_map, np.asarray(uv, dtype=np.float64) / stride)


def density_at_points(model: FieldModel, feat_map: Tensor, K: CameraIntrinsics, points: np.ndarray):
    """Density at camera-frame ``points`` (N x 3).

    Returns (sigma Tensor (N,), pixel projections (N, 2), frustum validity (N,)).
    Features outside the image read as zero.
    """
    uv, _, valid = project(K, points)
    dist = np.linalg.norm(points, axis=-1)
    feat, _ = sample_features(feat_map, np.where(valid[:, None], uv, -1e3))
    sigma = model.mlp(feat, model.encode(K, uv, dist))
    return sigma, uv, valid


# ----------------------------------------------------------------------
# rays


@dataclass
class RaySamples:
    """Stratified samples along camera rays through ``pixels``.

    ``distances`` are ranges along the unit ``directions`` (origin at the
    camera centre). ``sigma``, ``alpha`` and ``weights`` are filled in by
    :func:`eval_density` and :func:`composite_depth`.
    """

    pixels: np.ndarray
    directions: np.ndarray
    distances: np.ndarray
    sigma: Optional[Tensor] = None
    alpha: Optional[Tensor] = None
    weights: Optional[Tensor] = None

    @property
    def points(self) -> np.ndarray:
        return self.directions[:, None, :] * self.distances[..., None]

    @property
    def num_rays(self) -> int:
        return len(self.pixels)

    def z_scale(self) -> np.ndarray:
        """Factor turning a range along each ray into z-depth."""
        return self.directions[:, 2]


def sample_rays(
    K: CameraIntrinsics,
    pixels: np.ndarray,
    k: int,
    d_min: float,
    d_max: float,
    jitter_seed: Optional[int] = None,
) -> RaySamples:
    """k samples per ray, one uniformly placed in each of k equal range bins.

    Without a seed the samples sit at the bin midpoints.
    """
    if k < 2 or not (d_max > d_min > 0):
        raise BadRange(f"need k >= 2 and d_max > d_min > 0, got k={k}, [{d_min}, {d_max}]")
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    rays = K.rays(pixels)
    dirs = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    edges = np.linspace(d_min, d_max, k + 1)
    width = edges[1:] - edges[:-1]
    if jitter_seed is None:
        frac = np.full((len(pixels), k), 0.5)
    else:
        frac = np.random.default_rng(jitter_seed).random((len(pixels), k))
    dist = edges[:-1] + frac * width
    return RaySamples(pixels, dirs, dist)


def eval_density(model: FieldModel, feat_map: Tensor, samples: RaySamples, K: CameraIntrinsics) -> RaySamples:
    """Fill ``samples.sigma`` (N x k) from the field.

    Every sample on a source-camera ray projects onto that ray's own pixel, so
    the image feature is looked up once per ray and only the encoding varies
    along the ray.
    """
    N, k = samples.distances.shape
    if feat_map.ndim != 3 or feat_map.shape[0] != model.feat_dim:
        raise ShapeMismatch(f"feature map {feat_map.shape} does not match field input width {model.feat_dim}")
    feat, _ = sample_features(feat_map, samples.pixels)  # N x F
    uv = np.broadcast_to(samples.pixels[:, None, :], (N, k, 2))
    enc = model.encode(K, uv, samples.distances).reshape(N * k, -1)
    p = model.params
    F = model.feat_dim
    per_ray = feat @ p["w1"][:F]  # N x H
    hidden = per_ray.shape[1]
    pre = ad.reshape(per_ray, (N, 1, hidden)) + ad.reshape(Tensor(enc) @ p["w1"][F:], (N, k, hidden))
    h = ad.relu(pre + p["b1"])
    out = ad.reshape(h, (N * k, hidden)) @ p["w2"] + p["b2"]
    samples.sigma = ad.reshape(ad.softplus(out), (N, k))
    return samples


def interval_lengths(distances: np.ndarray) -> np.ndarray:
    """delta_i = d_{i+1} - d_i, with the last interval copying its predecessor."""
    d = np.asarray(distances, dtype=np.float64)
    delta = np.empty_like(d)
    delta[..., :-1] = d[..., 1:] - d[..., :-1]
    delta[..., -1] = delta[..., -2] if d.shape[-1] > 1 else 1.0
    if np.any(delta <= 0):
        raise NonMonotoneSamples("sample distances must be strictly increasing")
    return delta


def termination_weights(sigma: Tensor, distances: np.ndarray, alpha_formula: str = "standard"):
    """Per-sample opacity alpha and termination weights w = T * alpha.

    ``standard``: alpha = 1 - exp(-sigma * delta).
    ``paper_literal_clamped``: alpha = min(exp(1 - sigma * delta), 1).
    """
    delta = interval_lengths(distances)
    sd = sigma * delta
    if alpha_formula == "standard":
        alpha = 1.0 - ad.exp(-sd)
    elif alpha_formula == "paper_literal_clamped":
        alpha = ad.clip(ad.exp(1.0 - sd), 0.0, 1.0)
    else:
        raise ValueError(f"unknown alpha formula {alpha_formula!r}")
    trans = ad.cumprod_exclusive(1.0 - alpha)
    return alpha, trans * alpha


def composite_depth(samples: RaySamples, alpha_formula: str = "standard") -> Tensor:
    """Expected ray-termination range sum_i w_i d_i (not renormalized)."""
    if samples.sigma is None:
        raise ValueError("evaluate the density before compositing")
    alpha, w = termination_weights(samples.sigma, samples.distances, alpha_formula)
    samples.alpha, samples.weights = alpha, w
    return ad.sum(w * samples.distances, axis=-1)


def composite_depth_values(sigma, distances, alpha_formula: str = "standard"):
    """Array convenience wrapper: returns (depth, alpha, weights) as numpy arrays."""
    distances = np.asarray(distances, dtype=np.float64)
    s = RaySamples(np.zeros((distances.shape[0], 2)), np.zeros((distances.shape[0], 3)), distances)
    s.sigma = ad.as_tensor(sigma)
    d = composite_depth(s, alpha_formula)
    return d.data, s.alpha.data, s.weights.data


def render_depth(
    model: FieldModel,
    feat_map: Tensor,
    K: CameraIntrinsics,
    pixels: np.ndarray,
    k: int,
    d_min: float,
    d_max: float,
    jitter_seed: Optional[int] = None,
    alpha_formula: str = "standard",
):
    """z-depth Tensor (N,) and accumulated weight (N,) for the given pixels."""
    samples = sample_rays(K, pixels, k, d_min, d_max, jitter_seed)
    eval_density(model, feat_map, samples, K)
    rng_depth = composite_depth(samples, alpha_formula)
    acc = samples.weights.data.sum(axis=-1)
    return rng_depth * samples.z_scale(), acc, samples


__all__ = [
    "ALPHA_FORMULAS",
    "ENCODER_STRIDE",
    "FeatureEncoder",
    "FieldModel",
    "RaySamples",
    "Z_NEAR",
    "composite_depth",
    "composite_depth_values",
    "density_at_points",
    "eval_density",
    "interval_lengths",
    "positional_encoding",
    "render_depth",
    "sample_rays",
    "termination_weights",
]
