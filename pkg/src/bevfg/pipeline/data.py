"""Scene datasets with phase-aware access accounting."""
from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..bev import BevMap
from ..camera import Pose
from ..errors import ContractError, DatasetTooSmall, MissingSplit, NoLabels
from ..synthscene import SceneBundle, load_bundle, load_manifest
from .model import Window

PHASES = ("pretrain", "finetune", "eval")


class AccessLog(Counter):
    """Counts label reads and loss evaluations; used to assert phase separation."""


class SceneDataset:
    """Scenes of one split, loaded lazily from disk or wrapped from memory.

    In the ``pretrain`` phase BEV labels are never loaded and :meth:`bev`
    refuses to answer.
    """

    def __init__(self, bundles: Sequence, phase: str = "pretrain", log: Optional[AccessLog] = None):
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        self._items = list(bundles)
        self.phase = phase
        self.log = AccessLog() if log is None else log

    @classmethod
    def from_dir(cls, data_dir, split: str, phase: str = "pretrain", log: Optional[AccessLog] = None):
        manifest = load_manifest(data_dir)
        scenes = [s for s in manifest["scenes"] if s["split"] == split]
        if not scenes:
            raise MissingSplit(f"split {split!r} has no scenes in {data_dir}")
        return cls([Path(data_dir) / s["path"] for s in scenes], phase, log)

    def __len__(self) -> int:
        return len(self._items)

    def bundle(self, i: int) -> SceneBundle:
        item = self._items[i]
        if not isinstance(item, SceneBundle):
            item = load_bundle(item, with_bev=self.phase != "pretrain")
            self._items[i] = item
        return item

    def scene_ids(self) -> list[str]:
        return [self.bundle(i).scene_id for i in range(len(self))]

    def window(self, i: int, start: int, n: int) -> Window:
        b = self.bundle(i)
        if start < 0 or start + n >= b.num_frames:
            raise DatasetTooSmall(f"scene {b.scene_id} has {b.num_frames} frames; window needs {start + n + 1}")
        frames = b.frames[start : start + n + 1]
        poses = [Pose.identity()] + [b.relative_pose(start, start + i) for i in range(1, n + 1)]
        stereo = b.right_frames[start].rgb if b.right_frames else None
        return Window([f.rgb for f in frames], poses, b.intrinsics, stereo, b.right_offset)

    def bev(self, i: int) -> BevMap:
        if self.phase == "pretrain":
            raise ContractError("BEV labels are not readable during pretraining")
        self.log["bev_reads"] += 1
        b = self.bundle(i)
        if b.bev is None:
            raise ContractError(f"scene {b.scene_id} has no BEV labels")
        return b.bev


def select_labeled(num_scenes: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded subset of max(1, round(fraction * N)) scene indices, sorted."""
    if not 0.0 < fraction <= 1.0:
        raise NoLabels(f"label fraction must lie in (0, 1], got {fraction}")
    if num_scenes == 0:
        raise NoLabels("no training scenes to label")
    count = max(1, int(np.floor(fraction * num_scenes + 0.5)))
    return np.sort(np.random.default_rng(seed).permutation(num_scenes)[:count])
