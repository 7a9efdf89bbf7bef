"""Training configuration, serialized as JSON with strict key checking."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from ..errors import ConfigError, IoError
from ..field import ALPHA_FORMULAS
from ..tmae import GridSpec


@dataclass
class Config:
    seed: int = 0

    # geometric pathway
    feat_dim: int = 16
    field_hidden: int = 64
    pe_bands: int = 6
    density_bias: float = -1.0
    num_samples: int = 32
    d_min: float = 0.5
    d_max: float = 40.0
    rays_per_step: int = 1024
    alpha_formula: str = "standard"
    use_min: bool = True
    use_stereo: bool = True

    # semantic pathway
    sem_dim: int = 16
    grid_x_range: tuple = (-8.0, 8.0)
    grid_y_range: tuple = (-2.0, 3.0)
    grid_z_range: tuple = (0.5, 20.0)
    grid_resolution: tuple = (32, 8, 48)
    collapse_d_max: float = 22.0
    patch_size: int = 24
    mask_ratio: float = 0.75
    window: int = 3
    recon_hidden: int = 32
    recon_patches: int = 8

    # pathway switches
    use_geometric: bool = True
    use_semantic: bool = True

    # optimization
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_points: tuple = (0.75, 0.9)
    lr_decay_factors: tuple = (0.5, 0.2)
    warmup_steps: int = 100
    grad_clip: float = 0.2
    epochs: int = 20
    steps_per_epoch: int = 100

    # finetuning
    bev_hidden: int = 32
    finetune_lr: float = 0.02
    finetune_epochs: int = 10
    finetune_steps_per_epoch: int = 30
    label_fraction: float = 1.0
    label_seed: int = 0

    def __post_init__(self):
        for name in ("grid_x_range", "grid_y_range", "grid_z_range", "grid_resolution", "lr_decay_points",
                     "lr_decay_factors"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.alpha_formula in ALPHA_FORMULAS, f"alpha_formula must be one of {ALPHA_FORMULAS}")
        need(self.num_samples >= 2, "num_samples must be >= 2")
        need(self.d_max > self.d_min > 0, "need d_max > d_min > 0")
        need(self.collapse_d_max > self.d_min, "collapse_d_max must exceed d_min")
        need(self.patch_size > 0 and self.patch_size % 4 == 0, "patch_size must be a positive multiple of 4")
        need(0.0 <= self.mask_ratio <= 1.0, "mask_ratio must lie in [0, 1]")
        need(self.window >= 0, "window must be >= 0")
        need(self.rays_per_step > 0 and self.recon_patches > 0, "per-step sample counts must be positive")
        need(self.lr >= 0 and self.finetune_lr >= 0, "learning rates must be non-negative")
        need(0 <= self.momentum < 1, "momentum must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay must be non-negative")
        need(len(self.lr_decay_points) == len(self.lr_decay_factors), "decay points and factors differ in length")
        need(self.epochs >= 1 and self.steps_per_epoch >= 1, "epochs and steps_per_epoch must be >= 1")
        need(self.finetune_epochs >= 1 and self.finetune_steps_per_epoch >= 1, "finetune schedule must be >= 1")
        need(
            len(self.grid_resolution) == 3 and all(isinstance(r, int) and r >= 1 for r in self.grid_resolution),
            "grid_resolution needs 3 positive integers",
        )
        need(self.use_geometric or self.use_semantic, "at least one pathway must be enabled")
        need(self.warmup_steps >= 0, "warmup_steps must be >= 0")
        need(self.grad_clip >= 0, "grad_clip must be non-negative (0 disables clipping)")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_x_range, self.grid_y_range, self.grid_z_range, self.grid_resolution)

    def lr_at(self, epoch: int, base: float | None = None, total: int | None = None) -> float:
        """Step schedule: multiply by each factor once ``epoch`` passes its fraction of the run."""
        lr = self.lr if base is None else base
        total = self.epochs if total is None else total
        for point, factor in zip(self.lr_decay_points, self.lr_decay_factors):
            if epoch >= point * total:
                lr *= factor
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for name, value in d.items():
            _check_type(name, value, known[name].default)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Config":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise IoError(f"cannot read config {path}: {e}") from e
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e

    def save(self, path) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        except OSError as e:
            raise IoError(f"cannot write config {path}: {e}") from e


def _check_type(name, value, default) -> None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {name!r} has the wrong type ({type(value).__name__})")
