"""Pinhole projection and rigid transforms.

Frames are x right, y down, z forward. Pixel (i, j) is centred on the
continuous coordinate (i, j), so an image spans [0, W-1] x [0, H-1].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidCamera, NonPositiveDepth

Z_NEAR = 0.1


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCamera("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidCamera("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of a map sampled at every ``factor``-th pixel (pixel j <-> factor*j)."""
        return CameraIntrinsics(
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            -(-self.width // factor),
            -(-self.height // factor),
        )

    def pixel_grid(self) -> np.ndarray:
        """All pixel coordinates (u, v) in row-major order, shape (H*W, 2)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)

    def rays(self, pixels: np.ndarray) -> np.ndarray:
        """Back-projected directions K^-1 [u, v, 1] with unit z component."""
        pixels = np.asarray(pixels, dtype=np.float64)
        return np.stack(
            [(pixels[..., 0] - self.cx) / self.fx, (pixels[..., 1] - self.cy) / self.fy, np.ones(pixels.shape[:-1])],
            axis=-1,
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping points from a source frame into a target frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidCamera("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Rotation about the (downward) y axis; positive yaw turns z towards x."""
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]), np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not self.translation.any())

    def to_dict(self) -> dict:
        return {"R": self.rotation.ravel().tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64))


def compose(first: Pose, second: Pose) -> Pose:
    """Pose that applies ``first`` and then ``second``.

    With T_a_b mapping frame a into frame b, compose(T_0_1, T_1_2) == T_0_2.
    """
    return Pose(second.rotation @ first.rotation, second.rotation @ first.translation + second.translation)


def invert(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation)


def relative_pose(cam_to_world_src: Pose, cam_to_world_tgt: Pose) -> Pose:
    """T_src->tgt from two camera-to-world poses."""
    return compose(cam_to_world_src, invert(cam_to_world_tgt))


def project(K: CameraIntrinsics, x: np.ndarray, z_near: float = Z_NEAR):
    """Project camera-frame point(s) ``x`` (..., 3).

    Returns pixel coordinates (..., 2), depth (...) and validity (...):
    valid iff z > z_near and the pixel lies inside [0, W-1] x [0, H-1].
    """
    x = np.asarray(x, dtype=np.float64)
    z = x[..., 2]
    ok = z > z_near
    zs = np.where(ok, z, 1.0)
    u = K.fx * x[..., 0] / zs + K.cx
    v = K.fy * x[..., 1] / zs + K.cy
    valid = ok & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    return np.stack([u, v], axis=-1), z, valid


def unproject(K: CameraIntrinsics, u: np.ndarray, d) -> np.ndarray:
    """Lift pixel(s) ``u`` (..., 2) at z-depth ``d`` into the camera frame."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise NonPositiveDepth("unproject needs strictly positive depth")
    return K.rays(u) * d[..., None]
