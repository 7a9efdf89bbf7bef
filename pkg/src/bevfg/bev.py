"""BEV finetuning head, cross-entropy and mIoU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import AllIgnored, ShapeMismatch
from .field import he_init, zeros_param

IGNORE_INDEX = 255
CLASS_NAMES = ("road", "terrain", "building", "car")
NUM_CLASSES = len(CLASS_NAMES)
# RGB palette for class maps; the ignore index renders black
PALETTE = {
    0: (128, 64, 128),
    1: (152, 251, 152),
    2: (70, 70, 70),
    3: (0, 0, 142),
    IGNORE_INDEX: (0, 0, 0),
}
COLLAPSE_EPS = 1e-6
STANDARDIZE_EPS = 1e-5


@dataclass
class BevMap:
    """Class-index map over (x lateral, z forward) cells; 255 marks unlabeled cells."""

    grid: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        bad = (self.grid >= self.num_classes) & (self.grid != IGNORE_INDEX)
        if bad.any():
            raise ValueError("BEV entries must be class ids or the ignore index")

    @property
    def shape(self):
        return self.grid.shape


def collapse_to_bev(grid) -> Tensor:
    """Density-weighted mean over the height axis.

    ``grid.features`` are already density gated (feat * sigma), so this is
    sum_y feat*sigma / (sum_y sigma + eps) per (x, z) column.
    Output: F x Nx x Nz.
    """
    num = ad.sum(grid.features, axis=2)
    den = ad.sum(grid.density, axis=1) + COLLAPSE_EPS
    return num / ad.reshape(den, (1,) + den.shape)


def standardize_channels(feats: Tensor, eps: float = STANDARDIZE_EPS) -> Tensor:
    """Zero mean and unit variance per channel over the BEV map (F x Nx x Nz).

    Pretraining leaves the semantic features at an arbitrary scale (the
    reconstruction targets are patch normalized), so the head would otherwise
    see inputs ten times larger than at initialization.
    """
    mu = ad.mean(feats, axis=(1, 2), keepdims=True)
    centered = feats - mu
    var = ad.mean(centered * centered, axis=(1, 2), keepdims=True)
    return centered * ad.pow(var + eps, -0.5)


class BevHead:
    """standardize -> conv3x3 -> relu -> conv1x1 from collapsed features to class logits."""

    def __init__(self, rng: np.random.Generator, in_channels: int, hidden: int = 32, num_classes: int = NUM_CLASSES):
        self.num_classes = num_classes
        self.params = {
            "w1": he_init(rng, (hidden, in_channels, 3, 3), 9 * in_channels),
            "b1": zeros_param(hidden),
            "w2": he_init(rng, (num_classes, hidden, 1, 1), hidden),
            "b2": zeros_param(num_classes),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, feats: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.conv2d(standardize_channels(feats), p["w1"], p["b1"], padding=1))
        return ad.conv2d(h, p["w2"], p["b2"])


def bev_cross_entropy(logits: Tensor, gt: BevMap) -> Tensor:
    """Mean negative log-softmax of the true class over labeled cells."""
    logits = ad.as_tensor(logits)
    labels = gt.grid if isinstance(gt, BevMap) else np.asarray(gt)
    if logits.shape[1:] != labels.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    C = logits.shape[0]
    flat_lab = labels.reshape(-1).astype(np.int64)
    keep = np.flatnonzero(flat_lab != IGNORE_INDEX)
    if keep.size == 0:
        raise AllIgnored("every BEV cell is ignored")
    logp = ad.log_softmax(logits.reshape(C, -1), axis=0)
    picked = logp[flat_lab[keep], keep]
    return -ad.mean(picked)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """C x (C+1) counts: rows are ground truth, columns predictions.

    Ignored gt cells are skipped; predictions outside 0..C-1 at labeled cells
    land in the last column and count as misses only.
    """
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeMismatch("prediction and ground truth differ in shape")
    m = gt != IGNORE_INDEX
    g, p = gt[m], pred[m]
    p = np.where((p >= 0) & (p < num_classes), p, num_classes)
    return np.bincount(g * (num_classes + 1) + p, minlength=num_classes * (num_classes + 1)).reshape(
        num_classes, num_classes + 1
    )


def miou_from_confusion(cm: np.ndarray):
    """Per-class IoU (nan for classes absent from both maps) and their mean."""
    cm = np.asarray(cm, dtype=np.float64)
    C = cm.shape[0]
    tp = np.diag(cm[:, :C])
    fn = cm.sum(axis=1) - tp
    fp = cm[:, :C].sum(axis=0) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = np.full(C, np.nan)
    iou[present] = tp[present] / denom[present]
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return iou, mean


def miou(pred, gt, num_classes: int = NUM_CLASSES):
    """IoU_c = TP / (TP + FP + FN) over labeled cells, averaged over present classes."""
    p = pred.grid if isinstance(pred, BevMap) else np.asarray(pred)
    g = gt.grid if isinstance(gt, BevMap) else np.asarray(gt)
    return miou_from_confusion(confusion_matrix(p, g, num_classes))


def predict_classes(logits) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=0).astype(np.uint8)
