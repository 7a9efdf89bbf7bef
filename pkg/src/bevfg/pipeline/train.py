"""Pretraining, finetuning, evaluation and rendering."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .. import autodiff as ad
from ..bev import CLASS_NAMES, NUM_CLASSES, PALETTE, bev_cross_entropy, confusion_matrix, miou_from_confusion
from ..camera import CameraIntrinsics
from ..errors import BadFrame, DatasetTooSmall, IoError
from ..pnm import read_pnm, write_pgm
from ..synthscene import DEFAULT_INTRINSICS, load_bundle, load_manifest
from .checkpoint import Checkpoint
from .config import Config
from .data import AccessLog, SceneDataset, select_labeled
from .model import Network, StepDraws

LOG_COLUMNS = ("epoch", "step", "loss_photom", "loss_rgb", "loss_bev", "wall_ms")
METRICS_SCHEMA = {
    "type": "object",
    "required": ["split", "num_scenes", "per_class_iou", "miou", "abs_rel", "confusion"],
    "properties": {
        "split": {"type": "string"},
        "num_scenes": {"type": "integer", "minimum": 1},
        "per_class_iou": {
            "type": "object",
            "additionalProperties": {"type": ["number", "null"]},
        },
        "miou": {"type": ["number", "null"]},
        "abs_rel": {"type": ["number", "null"]},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
    },
}


@dataclass
class TrainLog:
    """Per-step loss rows; losses not evaluated in a phase are NaN."""

    rows: list[tuple] = field(default_factory=list)

    def append(self, epoch: int, step: int, photom: float, rgb: float, bev: float, wall_ms: float) -> None:
        if self.rows and step <= self.rows[-1][1]:
            raise ValueError("step counter must increase")
        self.rows.append((epoch, step, photom, rgb, bev, wall_ms))

    def column(self, name: str) -> np.ndarray:
        i = LOG_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def write_csv(self, path, append: bool = False) -> None:
        try:
            with open(path, "a" if append else "w", newline="") as fh:
                w = csv.writer(fh)
                if not append or fh.tell() == 0:
                    w.writerow(LOG_COLUMNS)
                for e, s, p, r, b, ms in self.rows:
                    w.writerow([e, s, repr(p), repr(r), repr(b), f"{ms:.1f}"])
        except OSError as e:
            raise IoError(f"cannot write log {path}: {e}") from e

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        try:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as e:
            raise IoError(f"cannot read log {path}: {e}") from e
        log = cls()
        for r in rows:
            log.append(int(r["epoch"]), int(r["step"]), float(r["loss_photom"]), float(r["loss_rgb"]),
                       float(r["loss_bev"]), float(r["wall_ms"]))
        return log


def _as_dataset(data, split: str, phase: str, log: Optional[AccessLog] = None) -> SceneDataset:
    if isinstance(data, SceneDataset):
        return data
    return SceneDataset.from_dir(data, split, phase, log)


def _make_checkpoint(net: Network, opt: ad.SGD, names: Sequence[str], rng, epoch: int, step: int) -> Checkpoint:
    buffers = {n: b.copy() for n, b in zip(names, opt.buffers) if b is not None}
    return Checkpoint(net.state_dict(), buffers, rng.bit_generator.state, epoch, step, net.config.to_dict())


def _restore(ckpt: Checkpoint, net: Network, opt: ad.SGD, names: Sequence[str], rng) -> None:
    net.load_state(ckpt.params)
    opt.buffers = [ckpt.buffers[n].copy() if n in ckpt.buffers else None for n in names]
    rng.bit_generator.state = ckpt.rng_state


def _clip_geometric(params: dict, max_norm: float) -> None:
    """Bound the joint gradient norm of the geometric pathway (encoder and field).

    Rare large steps there push all density to the nearest samples or drain it
    to zero, after which no pixel is valid and the photometric loss is empty.
    The semantic gradients are an order of magnitude larger and stay unclipped.
    """
    if max_norm > 0:
        ad.clip_grad_norm([p for k, p in params.items() if k.startswith(("geo.", "field."))], max_norm)


# ----------------------------------------------------------------------
# pretraining


def pretrain(
    config: Config,
    data,
    out: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
    log_path: Optional[Union[str, Path]] = None,
    on_step: Optional[Callable[[int, Network], None]] = None,
) -> tuple[Checkpoint, TrainLog]:
    """Self-supervised pretraining with the photometric and reconstruction losses.

    ``data`` is a dataset directory (its train split is used) or a
    :class:`SceneDataset`. A checkpoint is written to ``out`` after every
    epoch. ``resume`` continues a previous run from its last completed epoch.
    """
    ds = _as_dataset(data, "train", "pretrain")
    if ds.phase != "pretrain":
        raise ValueError("pretraining needs a dataset in the pretrain phase")
    n = config.window
    usable = [ds.bundle(i).num_frames for i in range(len(ds))]
    if min(usable) < n + 1:
        raise DatasetTooSmall(f"window of {n + 1} frames needs longer scenes (shortest has {min(usable)})")
    if config.use_geometric and n == 0 and not (config.use_stereo and ds.bundle(0).right_frames):
        raise DatasetTooSmall("the photometric loss needs at least one target view")

    net = Network(config)
    params = net.pretrain_parameters()
    names = list(params)
    opt = ad.SGD(list(params.values()), config.lr, config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    start_epoch, step = 0, 0
    if resume is not None:
        _restore(resume, net, opt, names, rng)
        start_epoch, step = resume.epoch, resume.step

    log = TrainLog()
    K = ds.bundle(0).intrinsics
    num_pixels = K.width * K.height
    ckpt = resume
    for epoch in range(start_epoch, config.epochs):
        epoch_lr = config.lr_at(epoch)
        for _ in range(config.steps_per_epoch):
            t0 = time.perf_counter()
            # linear warmup keeps early momentum steps from collapsing the density
            opt.lr = epoch_lr * min(1.0, (step + 1) / config.warmup_steps) if config.warmup_steps else epoch_lr
            scene = int(rng.integers(len(ds)))
            start = int(rng.integers(0, usable[scene] - n))
            draws = StepDraws.draw(rng, num_pixels, config.rays_per_step)
            window = ds.window(scene, start, n)
            opt.zero_grad()
            total = None
            photom = rgb = math.nan
            if config.use_geometric:
                lp = net.photometric(window, draws)
                ds.log["photom_evals"] += 1
                photom, total = lp.item(), lp
            if config.use_semantic:
                lr_ = net.reconstruction(window, draws)
                ds.log["rgb_evals"] += 1
                rgb = lr_.item()
                total = lr_ if total is None else total + lr_
            if total.requires_grad:
                ad.backward(total)
            _clip_geometric(params, config.grad_clip)
            opt.step()
            step += 1
            log.append(epoch, step, photom, rgb, math.nan, 1000.0 * (time.perf_counter() - t0))
            if on_step is not None:
                on_step(step, net)
        ckpt = _make_checkpoint(net, opt, names, rng, epoch + 1, step)
        if out is not None:
            ckpt.save(out)
    if log_path is not None:
        log.write_csv(log_path, append=resume is not None)
    if ckpt is None:
        ckpt = _make_checkpoint(net, opt, names, rng, start_epoch, step)
    return ckpt, log


# ----------------------------------------------------------------------
# finetuning


def finetune(
    config: Config,
    init: Optional[Checkpoint],
    data,
    label_fraction: Optional[float] = None,
    out: Optional[Union[str, Path]] = None,
    log_path: Optional[Union[str, Path]] = None,
    val_data=None,
) -> tuple[Checkpoint, TrainLog, list[dict]]:
    """Train the BEV head together with both encoders and the field on labeled scenes.

    Masking and the reconstruction head are unused. With ``init`` the
    backbone starts from pretrained weights; the BEV head always starts from
    the seeded initialization, so paired runs differ only in the backbone.
    Returns the checkpoint, the loss log and per-epoch evaluation rows.
    """
    fraction = config.label_fraction if label_fraction is None else label_fraction
    ds = _as_dataset(data, "train", "finetune")
    labeled = select_labeled(len(ds), fraction, config.label_seed)
    val = None if val_data is None else _as_dataset(val_data, "val", "eval")

    net = Network(config)
    if init is not None:
        net.load_state(init.params, skip_prefixes=("bev.",))
    params = net.finetune_parameters()
    names = list(params)
    opt = ad.SGD(list(params.values()), config.finetune_lr, config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed + 2)
    log, history, step = TrainLog(), [], 0
    for epoch in range(config.finetune_epochs):
        opt.lr = config.lr_at(epoch, config.finetune_lr, config.finetune_epochs)
        cm = np.zeros((NUM_CLASSES, NUM_CLASSES + 1), dtype=np.int64)
        for _ in range(config.finetune_steps_per_epoch):
            t0 = time.perf_counter()
            i = int(labeled[int(rng.integers(len(labeled)))])
            b = ds.bundle(i)
            gt = ds.bev(i)
            opt.zero_grad()
            logits = net.bev_logits(b.frames[0].rgb, b.intrinsics)
            loss = bev_cross_entropy(logits, gt)
            ds.log["bev_evals"] += 1
            ad.backward(loss)
            _clip_geometric(params, config.grad_clip)
            opt.step()
            step += 1
            cm += confusion_matrix(np.argmax(logits.data, axis=0), gt.grid, NUM_CLASSES)
            log.append(epoch, step, math.nan, math.nan, loss.item(), 1000.0 * (time.perf_counter() - t0))
        row = {"epoch": epoch, "train_miou": miou_from_confusion(cm)[1]}
        if val is not None:
            row["val_miou"] = evaluate(net, val)["miou"]
        history.append(row)
        if out is not None:
            _make_checkpoint(net, opt, names, rng, epoch + 1, step).save(out)
    if log_path is not None:
        log.write_csv(log_path)
    return _make_checkpoint(net, opt, names, rng, config.finetune_epochs, step), log, history


def compare_init(
    config: Config,
    pretrained: Checkpoint,
    train_data,
    val_data,
    fraction: float,
    seeds: Sequence[int],
    csv_path: Optional[Union[str, Path]] = None,
) -> list[dict]:
    """Paired finetuning runs (pretrained vs scratch backbone) per seed, scored on ``val_data``."""
    rows = []
    for seed in seeds:
        cfg = replace(config, seed=seed, label_seed=seed)
        row = {"seed": seed}
        for name, init in (("pretrained", pretrained), ("scratch", None)):
            net_ckpt, _, _ = finetune(cfg, init, train_data, fraction)
            net = network_from_checkpoint(net_ckpt, cfg)
            row[f"{name}_miou"] = evaluate(net, _as_dataset(val_data, "val", "eval"))["miou"]
        rows.append(row)
    if csv_path is not None:
        try:
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["seed", "pretrained_miou", "scratch_miou"])
                w.writeheader()
                w.writerows(rows)
        except OSError as e:
            raise IoError(f"cannot write {csv_path}: {e}") from e
    return rows


def network_from_checkpoint(ckpt: Checkpoint, config: Optional[Config] = None) -> Network:
    if config is None:
        config = Config.from_dict(ckpt.config) if ckpt.config else Config()
    net = Network(config)
    net.load_state(ckpt.params)
    return net


# ----------------------------------------------------------------------
# evaluation and rendering


def evaluate(predictor, data, split: str = "val") -> dict:
    """BEV confusion, per-class IoU, mIoU and mean abs-rel depth error on frame 0 of each scene.

    ``predictor`` is any object with ``predict(image, K) -> (bev classes,
    z-depth, accumulated weight)``, normally a :class:`Network`. Confusion
    counts are pooled over scenes before computing IoU; abs-rel pools all
    valid ground-truth pixels.
    """
    ds = _as_dataset(data, split, "eval")
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES + 1), dtype=np.int64)
    err_sum, err_n = 0.0, 0
    for i in range(len(ds)):
        b = ds.bundle(i)
        frame = b.frames[0]
        bev_pred, depth, _ = predictor.predict(frame.rgb, b.intrinsics)
        cm += confusion_matrix(bev_pred, ds.bev(i).grid, NUM_CLASSES)
        valid = frame.depth > 0
        err_sum += float(np.sum(np.abs(depth[valid] - frame.depth[valid]) / frame.depth[valid]))
        err_n += int(valid.sum())
    iou, mean = miou_from_confusion(cm)
    return {
        "split": split,
        "num_scenes": len(ds),
        "per_class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(CLASS_NAMES, iou)},
        "miou": None if np.isnan(mean) else float(mean),
        "abs_rel": err_sum / err_n if err_n else None,
        "confusion": cm.tolist(),
    }


def depth_to_pgm(depth: np.ndarray, acc: np.ndarray) -> np.ndarray:
    """Millimetre uint16 depth; 0 marks pixels whose accumulated weight is at most 0.5."""
    mm = np.clip(np.rint(np.asarray(depth) * 1000.0), 1, 65535).astype(np.uint16)
    return np.where(np.asarray(acc) > 0.5, mm, 0).astype(np.uint16)


def resolve_frame(frame_id: str, data_dir=None):
    """Image and intrinsics for ``scene_id:index`` (with ``data_dir``) or a PPM path."""
    if data_dir is not None:
        scene, _, idx = frame_id.partition(":")
        manifest = load_manifest(data_dir)
        entry = next((s for s in manifest["scenes"] if s["id"] == scene), None)
        try:
            k = int(idx or 0)
        except ValueError:
            raise BadFrame(f"bad frame index in {frame_id!r}") from None
        if entry is None or not 0 <= k < entry["frames"]:
            raise BadFrame(f"no frame {frame_id!r} in {data_dir}")
        b = load_bundle(Path(data_dir) / entry["path"], with_bev=False)
        return b.frames[k].rgb, b.intrinsics, f"{scene}_{k:03d}"
    path = Path(frame_id)
    if not path.is_file():
        raise BadFrame(f"no such frame file {frame_id!r}")
    rgb = read_pnm(path)
    if rgb.ndim != 3:
        raise BadFrame(f"{frame_id} is not an RGB image")
    K = DEFAULT_INTRINSICS
    if rgb.shape[:2] != (K.height, K.width):
        raise BadFrame(f"{frame_id} is {rgb.shape[1]}x{rgb.shape[0]}, expected {K.width}x{K.height}")
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0, K, path.stem


def render(net: Network, image: np.ndarray, K: CameraIntrinsics, out_dir, name: str) -> dict:
    """Write ``depth_<name>.pgm`` (16-bit mm), ``bev_<name>.pgm`` and its palette sidecar."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out}: {e}") from e
    bev, depth, acc = net.predict(image, K)
    paths = {
        "depth": out / f"depth_{name}.pgm",
        "bev": out / f"bev_{name}.pgm",
        "palette": out / f"bev_{name}.palette.json",
    }
    write_pgm(paths["depth"], depth_to_pgm(depth, acc))
    write_pgm(paths["bev"], bev.astype(np.uint8))
    palette = {str(k): {"name": CLASS_NAMES[k] if k < NUM_CLASSES else "ignore", "rgb": list(v)} for k, v in PALETTE.items()}
    try:
        paths["palette"].write_text(json.dumps(palette, indent=1, sort_keys=True) + "\n")
    except OSError as e:
        raise IoError(f"cannot write {paths['palette']}: {e}") from e
    return paths
