"""Weighted soft Dice loss.

For each batch item the foreground and background soft Dice scores are

    D = 2 * sum(p * y) / (sum(y) + sum(p) + 1)

computed on (p, y) and on (1 - p, 1 - y) respectively, and the item loss is
``1 - (w_bg * D_bg + w_fg * D_fg)`` with w_fg = 0.9, w_bg = 0.1. The batch
loss is the mean over items.
"""
import numpy as np

__all__ = [
    "FG_WEIGHT",
    "BG_WEIGHT",
    "soft_dice",
    "weighted_dice_loss",
    "weighted_dice_loss_forward",
    "weighted_dice_loss_backward",
]

FG_WEIGHT = 0.9
BG_WEIGHT = 0.1


def soft_dice(p, y):
    return 2.0 * np.sum(p * y) / (np.sum(y) + np.sum(p) + 1.0)


def _as_batch(a):
    a = np.asarray(a)
    if a.ndim == 5:
        return a.reshape(a.shape[0], -1)
    return a.reshape(1, -1)


def weighted_dice_loss_forward(pred, target, fg_weight=FG_WEIGHT, bg_weight=BG_WEIGHT):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    if not np.isin(target, (0, 1)).all():
        raise ValueError("target values must be 0 or 1")
    dt = np.float64
    p = _as_batch(pred).astype(dt)
    y = _as_batch(target).astype(dt)
    inter_fg = np.sum(p * y, axis=1)
    den_fg = y.sum(axis=1) + p.sum(axis=1) + 1.0
    pb = 1.0 - p
    yb = 1.0 - y
    inter_bg = np.sum(pb * yb, axis=1)
    den_bg = yb.sum(axis=1) + pb.sum(axis=1) + 1.0
    d_fg = 2.0 * inter_fg / den_fg
    d_bg = 2.0 * inter_bg / den_bg
    per_item = 1.0 - (bg_weight * d_bg + fg_weight * d_fg)
    loss = per_item.mean()
    cache = (pred.shape, pred.dtype, y, inter_fg, den_fg, yb, inter_bg, den_bg, fg_weight, bg_weight)
    return pred.dtype.type(loss), cache


def weighted_dice_loss_backward(gout, cache):
    """Return (grad wrt pred, None)."""
    shape, dtype, y, inter_fg, den_fg, yb, inter_bg, den_bg, fg_weight, bg_weight = cache
    n = y.shape[0]
    # dD_fg/dp_i = 2 y_i / den - 2 I / den^2 ; the background term flips sign via p -> 1 - p
    dfg = 2.0 * y / den_fg[:, None] - (2.0 * inter_fg / den_fg**2)[:, None]
    dbg = -(2.0 * yb / den_bg[:, None] - (2.0 * inter_bg / den_bg**2)[:, None])
    g = -(fg_weight * dfg + bg_weight * dbg) * (float(gout) / n)
    return g.reshape(shape).astype(dtype), None


def weighted_dice_loss(pred, target, fg_weight=FG_WEIGHT, bg_weight=BG_WEIGHT):
    """Return (loss, grad wrt pred)."""
    loss, cache = weighted_dice_loss_forward(pred, target, fg_weight, bg_weight)
    return loss, weighted_dice_loss_backward(1.0, cache)[0]
