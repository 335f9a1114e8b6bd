"""Segmentation losses and ground-truth channel construction."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .model import MaskSet, split_background_grid
from .tensor import Tensor, concat

PROB_FLOOR = 1e-12
DICE_SMOOTH = 1.0


def cross_entropy_loss(pred: MaskSet, gt_channels: Tensor) -> Tensor:
    """Mean over pixels of -log of the predicted probability at the true channel."""
    if pred.channels.data.shape != gt_channels.data.shape:
        raise ShapeError(
            f"prediction {pred.channels.data.shape} vs ground truth {gt_channels.data.shape}"
        )
    _, h, w = gt_channels.data.shape
    p = pred.channels.clamp(PROB_FLOOR, 1.0)
    return -(gt_channels * p.log()).sum() / float(h * w)


def dice_loss(pred_obj: Tensor, gt_obj: Tensor) -> Tensor:
    """Soft Dice over object channels, averaged over objects; smoothing 1.0."""
    if pred_obj.data.shape != gt_obj.data.shape:
        raise ShapeError(f"prediction {pred_obj.data.shape} vs ground truth {gt_obj.data.shape}")
    inter = (pred_obj * gt_obj).sum(axis=(1, 2))
    denom = pred_obj.sum(axis=(1, 2)) + gt_obj.sum(axis=(1, 2))
    dice = (inter * 2.0 + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return (1.0 - dice).mean()


def total_loss(pred: MaskSet, gt_channels: Tensor):
    """Cross-entropy plus Dice, both weighted by one; returns (total, ce, dice)."""
    ce = cross_entropy_loss(pred, gt_channels)
    dice = dice_loss(pred.object_channels(), gt_channels[: pred.num_objects])
    return ce + dice, ce, dice


def build_gt_channels(gt_objects: np.ndarray, grid: int, catch_all: bool) -> Tensor:
    """One-hot target channels: objects, grid cells of the background, zero catch-all.

    No pixel is ever labeled catch-all; that channel competes in the softmax
    but is learned implicitly.
    """
    objs = Tensor(np.asarray(gt_objects, dtype=np.float64))
    cells = split_background_grid(objs, grid)
    parts = [objs, cells]
    if catch_all:
        parts.append(Tensor(np.zeros((1,) + objs.data.shape[1:])))
    return concat(parts, axis=0).detach()
