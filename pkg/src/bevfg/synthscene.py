"""Procedural street scenes rendered by analytic ray casting.

Scenes are static: a textured ground plane split into road and terrain,
axis-aligned boxes for buildings and cars, and a constant sky. Surface
colour is a solid (3-d) value-noise texture evaluated at the hit point, so a
surface point has exactly the same colour in every frame. World coordinates
coincide with the camera frame of frame 0 (x right, y down, z forward).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bev import IGNORE_INDEX, BevMap
from .camera import CameraIntrinsics, Pose, Z_NEAR, compose, invert, project
from .errors import DegenerateSpec, IoError
from .pnm import read_pnm, write_pgm, write_ppm
from .tmae import GridSpec

ROAD, TERRAIN, BUILDING, CAR = 0, 1, 2, 3
SKY_COLOR = np.array([0.60, 0.75, 0.95])
DEFAULT_INTRINSICS = CameraIntrinsics(110.0, 110.0, 143.5, 47.5, 288, 96)
MANIFEST_SCHEMA_VERSION = 1

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


# ----------------------------------------------------------------------
# textures


def _hash3(i: np.ndarray, j: np.ndarray, k: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic uniform [0, 1) values at integer lattice points (splitmix64 finalizer)."""
    with np.errstate(over="ignore"):
        h = (
            i.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
            ^ j.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
            ^ k.astype(np.int64).astype(np.uint64) * np.uint64(0x165667B19E3779F9)
            ^ np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x27D4EB2F165667C5)
        )
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(p: np.ndarray, freq: float, seed: int) -> np.ndarray:
    """Smooth-step interpolated lattice noise in [0, 1) at points p (N x 3)."""
    q = np.asarray(p, dtype=np.float64) * freq
    i0 = np.floor(q)
    f = q - i0
    s = f * f * (3.0 - 2.0 * f)
    i0 = i0.astype(np.int64)
    out = np.zeros(len(q))
    for dx in (0, 1):
        wx = s[:, 0] if dx else 1 - s[:, 0]
        for dy in (0, 1):
            wy = s[:, 1] if dy else 1 - s[:, 1]
            for dz in (0, 1):
                wz = s[:, 2] if dz else 1 - s[:, 2]
                out += wx * wy * wz * _hash3(i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz, seed)
    return out


@dataclass(frozen=True)
class Texture:
    base: tuple[float, float, float]
    seed: int
    freq: float = 1.2
    octaves: int = 3
    contrast: float = 0.8

    def __call__(self, p: np.ndarray) -> np.ndarray:
        n, amp, total = np.zeros(len(p)), 1.0, 0.0
        for o in range(self.octaves):
            n += amp * value_noise(p, self.freq * 2.0**o, self.seed + 7919 * o)
            total += amp
            amp *= 0.5
        n /= total
        tint = value_noise(p, self.freq * 0.5, self.seed + 104729) - 0.5
        base = np.asarray(self.base)
        c = base[None, :] * (1.0 - self.contrast / 2 + self.contrast * n[:, None])
        c = c + 0.12 * tint[:, None] * np.array([1.0, -0.5, 0.5])
        return np.clip(np.rint(np.clip(c, 0.0, 1.0) * 255.0) / 255.0, 0.0, 1.0)


# ----------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class Box:
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]
    class_id: int
    texture: Texture


@dataclass
class SceneSpec:
    seed: int
    camera_height: float
    road_center: float
    road_width: float
    road_texture: Texture
    terrain_texture: Texture
    boxes: list[Box]
    trajectory: list[Pose]  # camera-to-world per frame
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    stereo_baseline: Optional[float] = None
    max_range: float = 40.0
    grid: GridSpec = field(default_factory=GridSpec)

    @property
    def num_frames(self) -> int:
        return len(self.trajectory)

    def validate(self) -> None:
        if self.num_frames < 1:
            raise DegenerateSpec("scene needs at least one frame")
        if self.camera_height <= Z_NEAR or self.road_width <= 0:
            raise DegenerateSpec("camera height and road width must be positive")
        for b in self.boxes:
            lo, hi = np.asarray(b.lower), np.asarray(b.upper)
            if np.any(hi <= lo):
                raise DegenerateSpec("box with empty extent")
            if hi[1] > self.camera_height + 1e-12:
                raise DegenerateSpec("boxes must sit on or above the ground plane")
            for pose in self.trajectory:
                c = pose.translation
                if np.all(c > lo) and np.all(c < hi):
                    raise DegenerateSpec("a camera position lies inside a box")

    def ground_class(self, x: np.ndarray) -> np.ndarray:
        return np.where(np.abs(x - self.road_center) <= self.road_width / 2, ROAD, TERRAIN)


def trajectory(num_frames: int, speed: float = 1.0, yaw_rate: float = 0.0) -> list[Pose]:
    """Camera-to-world poses moving forward along the current heading."""
    poses = [Pose.identity()]
    yaw, pos = 0.0, np.zeros(3)
    for _ in range(1, num_frames):
        pos = pos + Pose.from_yaw(yaw).rotation @ np.array([0.0, 0.0, speed])
        yaw += yaw_rate
        poses.append(Pose.from_yaw(yaw, pos))
    return poses


# ego-vehicle clearance around the camera path: half width plus margin, and
# the distance kept behind a car ahead of the last frame
_LATERAL_CLEARANCE = 1.5
_FORWARD_CLEARANCE = 3.0


def _clear_of_path(box: Box, path: np.ndarray) -> bool:
    """True when no camera position on ``path`` (N x 3, world) drives into the box footprint."""
    (x0, _, z0), (x1, _, z1) = box.lower, box.upper
    x, z = path[:, 0], path[:, 2]
    hit = (x > x0 - _LATERAL_CLEARANCE) & (x < x1 + _LATERAL_CLEARANCE) & (z > z0 - _FORWARD_CLEARANCE) & (z < z1 + 1.0)
    return not hit.any()


def random_scene_spec(
    seed: int,
    num_frames: int = 8,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    stereo_baseline: Optional[float] = None,
    grid: GridSpec = GridSpec(),
) -> SceneSpec:
    """Street layout drawn from ``seed``: road, side buildings, parked and driving cars."""
    rng = np.random.default_rng(seed)
    h = float(rng.uniform(1.4, 1.7))
    road_c = float(rng.uniform(-1.5, 1.5))
    road_w = float(rng.uniform(5.0, 8.0))
    tex_seed = int(rng.integers(1 << 30))
    road_tex = Texture((0.40, 0.40, 0.44), tex_seed + 1, freq=float(rng.uniform(0.9, 1.4)))
    terr_tex = Texture((0.35, 0.58, 0.22), tex_seed + 2, freq=float(rng.uniform(0.9, 1.4)))
    boxes: list[Box] = []
    for side in (-1, 1):
        edge = road_c + side * road_w / 2
        z = float(rng.uniform(-4.0, 2.0))
        while z < 70.0:
            length = float(rng.uniform(6.0, 14.0))
            margin = float(rng.uniform(1.0, 4.0))
            depth = float(rng.uniform(4.0, 8.0))
            height = float(rng.uniform(4.0, 9.0))
            inner = edge + side * margin
            outer = inner + side * depth
            x0, x1 = sorted((inner, outer))
            color = (float(rng.uniform(0.6, 0.8)), float(rng.uniform(0.35, 0.5)), float(rng.uniform(0.25, 0.4)))
            tex = Texture(color, int(rng.integers(1 << 30)), freq=float(rng.uniform(0.8, 1.3)))
            boxes.append(Box((x0, h - height, z), (x1, h, z + length), BUILDING, tex))
            z += length + float(rng.uniform(0.0, 5.0))
    n_cars = int(rng.integers(1, 4))
    for _ in range(n_cars):
        cz = float(rng.uniform(6.0, 22.0))
        cx = road_c + float(rng.uniform(-1.0, 1.0)) * (road_w / 2 - 1.2)
        w, l, ht = float(rng.uniform(1.7, 2.0)), float(rng.uniform(3.8, 4.6)), float(rng.uniform(1.4, 1.7))
        if any(b.class_id == CAR and abs(b.lower[2] - cz) < 5.5 and abs(b.lower[0] - (cx - w / 2)) < 2.5 for b in boxes):
            continue
        hue = rng.integers(3)
        color = [0.15, 0.15, 0.15]
        color[hue] = 0.8
        tex = Texture(tuple(color), int(rng.integers(1 << 30)), freq=1.5, contrast=0.5)
        boxes.append(Box((cx - w / 2, h - ht, cz), (cx + w / 2, h, cz + l), CAR, tex))
    traj = trajectory(num_frames, speed=float(rng.uniform(0.8, 1.2)), yaw_rate=float(rng.uniform(-0.02, 0.02)))
    path = np.array([p.translation for p in traj])
    boxes = [b for b in boxes if b.class_id != CAR or _clear_of_path(b, path)]
    spec = SceneSpec(
        seed, h, road_c, road_w, road_tex, terr_tex, boxes, traj, intrinsics, stereo_baseline, grid=grid
    )
    spec.validate()
    return spec


# ----------------------------------------------------------------------
# rendering


@dataclass
class Frame:
    rgb: np.ndarray  # 3 x H x W in [0, 1], multiples of 1/255
    depth: np.ndarray  # H x W z-depth in metres, 0 where invalid
    semantics: np.ndarray  # H x W uint8 class ids, 255 for sky
    pose: Pose  # camera-to-world


@dataclass
class SceneBundle:
    scene_id: str
    intrinsics: CameraIntrinsics
    frames: list[Frame]
    bev: BevMap
    right_frames: Optional[list[Frame]] = None
    right_offset: Optional[Pose] = None  # left camera -> right camera
    spec: Optional[SceneSpec] = None

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def relative_pose(self, src: int, tgt: int) -> Pose:
        """T_src->tgt between frames ``src`` and ``tgt``."""
        return compose(self.frames[src].pose, invert(self.frames[tgt].pose))


def cast_rays(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit parameter t along ``dirs`` (not normalized), class id and hit points."""
    n = len(dirs)
    t_best = np.full(n, np.inf)
    cls = np.full(n, IGNORE_INDEX, dtype=np.int64)
    which = np.full(n, -1, dtype=np.int64)  # -1 ground, >=0 box index
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (spec.camera_height - origin[1]) / dirs[:, 1]
    g = (dirs[:, 1] > 0) & (tg > 1e-9)
    t_best[g] = tg[g]
    which[g] = -1
    for bi, b in enumerate(spec.boxes):
        lo, hi = np.asarray(b.lower), np.asarray(b.upper)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 1e-9) & (tmin < t_best)
        t_best[hit] = tmin[hit]
        which[hit] = bi
    finite = np.isfinite(t_best)
    pts = origin + dirs * np.where(finite, t_best, 0.0)[:, None]
    ground = finite & (which == -1)
    cls[ground] = spec.ground_class(pts[ground, 0])
    for bi, b in enumerate(spec.boxes):
        cls[which == bi] = b.class_id
    return t_best, cls, which, pts


def shade(spec: SceneSpec, which: np.ndarray, cls: np.ndarray, pts: np.ndarray) -> np.ndarray:
    color = np.tile(SKY_COLOR, (len(pts), 1))
    road = (which == -1) & (cls == ROAD)
    terr = (which == -1) & (cls == TERRAIN)
    if road.any():
        color[road] = spec.road_texture(pts[road])
    if terr.any():
        color[terr] = spec.terrain_texture(pts[terr])
    for bi, b in enumerate(spec.boxes):
        m = which == bi
        if m.any():
            color[m] = b.texture(pts[m])
    return np.rint(color * 255.0) / 255.0


def render_frame(spec: SceneSpec, cam_to_world: Pose) -> Frame:
    K = spec.intrinsics
    pix = K.pixel_grid()
    rays_cam = K.rays(pix)
    dirs = rays_cam @ cam_to_world.rotation.T
    t, cls, which, pts = cast_rays(spec, cam_to_world.translation, dirs)
    rng_dist = t * np.linalg.norm(rays_cam, axis=1)
    valid = np.isfinite(t) & (rng_dist <= spec.max_range)
    depth = np.where(valid, t, 0.0)
    rgb = shade(spec, which, cls, pts)
    H, W = K.height, K.width
    return Frame(
        rgb.T.reshape(3, H, W).copy(),
        depth.reshape(H, W),
        cls.astype(np.uint8).reshape(H, W),
        cam_to_world,
    )


def rasterize_bev(spec: SceneSpec, cam_to_world: Pose) -> BevMap:
    """Semantic BEV over the voxel-grid footprint of the given camera.

    Cells whose ground point and a point 1.5 m above it both fall outside the
    camera frustum are unlabeled.
    """
    grid = spec.grid
    xs, zs = grid.axis_centers(0), grid.axis_centers(2)
    X, Z = np.meshgrid(xs, zs, indexing="ij")
    cam = np.stack([X.ravel(), np.full(X.size, spec.camera_height), Z.ravel()], axis=1)
    world = cam_to_world.apply(cam)
    wx, wz = world[:, 0], world[:, 2]
    cls = spec.ground_class(wx)
    for b in spec.boxes:  # later boxes win; boxes never overlap in generated scenes
        inside = (wx >= b.lower[0]) & (wx <= b.upper[0]) & (wz >= b.lower[2]) & (wz <= b.upper[2])
        cls = np.where(inside, b.class_id, cls)
    K = spec.intrinsics
    _, _, vis_ground = project(K, cam)
    _, _, vis_up = project(K, cam - np.array([0.0, 1.5, 0.0]))
    cls = np.where(vis_ground | vis_up, cls, IGNORE_INDEX)
    return BevMap(cls.reshape(len(xs), len(zs)).astype(np.uint8))


def generate_scene(spec: SceneSpec, scene_id: Optional[str] = None) -> SceneBundle:
    spec.validate()
    frames = [render_frame(spec, pose) for pose in spec.trajectory]
    right_frames = right_offset = None
    if spec.stereo_baseline:
        # right camera sits +baseline along x of the left camera
        right_offset = Pose(np.eye(3), np.array([-spec.stereo_baseline, 0.0, 0.0]))
        to_left = invert(right_offset)
        right_frames = [render_frame(spec, compose(to_left, pose)) for pose in spec.trajectory]
    bev = rasterize_bev(spec, spec.trajectory[0])
    return SceneBundle(
        scene_id or f"scene_{spec.seed:06d}", spec.intrinsics, frames, bev, right_frames, right_offset, spec
    )


# ----------------------------------------------------------------------
# on-disk format


def _to_u8(rgb: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(rgb).transpose(1, 2, 0) * 255.0).astype(np.uint8)


def save_bundle(bundle: SceneBundle, scene_dir) -> None:
    d = Path(scene_dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {d}: {e}") from e
    views = [("", bundle.frames)]
    if bundle.right_frames:
        views.append(("right_", bundle.right_frames))
    for prefix, frames in views:
        for i, f in enumerate(frames):
            write_ppm(d / f"{prefix}rgb_{i:03d}.ppm", _to_u8(f.rgb))
            write_pgm(d / f"{prefix}depth_{i:03d}.pgm", np.rint(f.depth * 1000.0).astype(np.uint16))
            write_pgm(d / f"{prefix}sem_{i:03d}.pgm", f.semantics.astype(np.uint8))
    write_pgm(d / "bev.pgm", bundle.bev.grid)
    meta = {
        "scene_id": bundle.scene_id,
        "intrinsics": bundle.intrinsics.to_dict(),
        "poses": [f.pose.to_dict() for f in bundle.frames],
        "right_offset": bundle.right_offset.to_dict() if bundle.right_offset else None,
    }
    try:
        (d / "poses.json").write_text(json.dumps(meta, indent=1))
    except OSError as e:
        raise IoError(f"cannot write {d / 'poses.json'}: {e}") from e


def load_bundle(scene_dir, with_bev: bool = True) -> SceneBundle:
    d = Path(scene_dir)
    try:
        meta = json.loads((d / "poses.json").read_text())
    except OSError as e:
        raise IoError(f"cannot read {d / 'poses.json'}: {e}") from e
    K = CameraIntrinsics.from_dict(meta["intrinsics"])

    def load_frames(prefix):
        frames = []
        for i, pd in enumerate(meta["poses"]):
            rgb = read_pnm(d / f"{prefix}rgb_{i:03d}.ppm").transpose(2, 0, 1).astype(np.float64) / 255.0
            depth = read_pnm(d / f"{prefix}depth_{i:03d}.pgm").astype(np.float64) / 1000.0
            sem = read_pnm(d / f"{prefix}sem_{i:03d}.pgm")
            pose = Pose.from_dict(pd)
            if prefix:
                pose = compose(invert(Pose.from_dict(meta["right_offset"])), pose)
            frames.append(Frame(rgb, depth, sem, pose))
        return frames

    frames = load_frames("")
    right = right_offset = None
    if meta.get("right_offset"):
        right_offset = Pose.from_dict(meta["right_offset"])
        right = load_frames("right_")
    bev = BevMap(read_pnm(d / "bev.pgm")) if with_bev else None
    return SceneBundle(meta["scene_id"], K, frames, bev, right, right_offset)


def emit_dataset(
    specs: Sequence[SceneSpec],
    out_dir,
    val_fraction: float = 0.2,
) -> dict:
    """Render ``specs`` to ``out_dir`` and write ``manifest.json``.

    The last ``round(val_fraction * n)`` scenes form the validation split.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out}: {e}") from e
    n = len(specs)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    scenes = []
    for i, spec in enumerate(specs):
        bundle = generate_scene(spec)
        save_bundle(bundle, out / bundle.scene_id)
        scenes.append(
            {
                "id": bundle.scene_id,
                "path": bundle.scene_id,
                "frames": bundle.num_frames,
                "split": "val" if i >= n - n_val else "train",
                "stereo": bool(bundle.right_frames),
            }
        )
    counts = {s: sum(1 for sc in scenes if sc["split"] == s) for s in ("train", "val")}
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "scenes": scenes,
        "splits": {s: c / n for s, c in counts.items()} if n else {"train": 1.0, "val": 0.0},
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    except OSError as e:
        raise IoError(f"cannot write manifest: {e}") from e
    return manifest


def load_manifest(data_dir) -> dict:
    p = Path(data_dir) / "manifest.json"
    try:
        m = json.loads(p.read_text())
    except OSError as e:
        raise IoError(f"cannot read {p}: {e}") from e
    if m.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise IoError(f"{p}: unsupported manifest schema {m.get('schema_version')}")
    return m
