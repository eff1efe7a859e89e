"""Training objectives: Dice, boundary-aware, their sum, and heatmap MSE.

The segmentation objective is ``dice + weight * boundary`` where the
boundary term is the mean of the soft prediction multiplied by a signed
Euclidean distance map of the ground-truth mask (negative inside, zero on
boundary pixels, positive outside). Putting prediction mass far outside the
region is penalised; mass inside is rewarded, so lower is better and the
term can go negative.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DICE_EPS = 1e-6


def _check_match(pred: Tensor, other: np.ndarray, op: str) -> None:
    if pred.data.shape != other.shape:
        raise ShapeError(f"{op}: prediction shape {pred.data.shape} vs target shape {other.shape}")


def dice_loss(pred_soft: Tensor, gt) -> Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    g = np.asarray(gt, dtype=pred_soft.data.dtype)
    _check_match(pred_soft, g, "dice_loss")
    inter = (pred_soft * Tensor(g)).sum()
    num = inter * 2.0 + DICE_EPS
    den = pred_soft.sum() + (float(g.sum()) + DICE_EPS)
    return 1.0 - num / den


def signed_distance_map(gt) -> np.ndarray:
    """Exact signed Euclidean distance to the mask boundary, in pixels.

    A boundary pixel is a foreground pixel with a 4-neighbour background
    pixel; image-edge adjacency counts as background. Boundary pixels map to
    0, other foreground to -distance, background to +distance, computed by
    brute force against all boundary pixels. An all-zero mask maps to all
    zeros.
    """
    fg = np.asarray(gt).astype(bool)
    if fg.ndim != 2:
        raise ShapeError(f"signed_distance_map expects an HxW mask, got shape {fg.shape}")
    h, w = fg.shape
    if not fg.any():
        return np.zeros((h, w), dtype=np.float32)
    padded = np.pad(fg, 1, constant_values=False)
    has_bg_nb = (
        ~padded[:-2, 1:-1] | ~padded[2:, 1:-1] | ~padded[1:-1, :-2] | ~padded[1:-1, 2:]
    )
    boundary = fg & has_bg_nb
    by, bx = np.nonzero(boundary)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy.reshape(-1, 1) - by) ** 2 + (xx.reshape(-1, 1) - bx) ** 2
    dist = np.sqrt(d2.min(axis=1).astype(np.float64)).reshape(h, w)
    sdm = np.where(fg, -dist, dist).astype(np.float32)
    sdm[boundary] = 0.0
    return sdm


def boundary_loss(pred_soft: Tensor, sdm) -> Tensor:
    """Mean over pixels of prediction * signed distance; lower is better."""
    s = np.asarray(sdm, dtype=pred_soft.data.dtype)
    _check_match(pred_soft, s, "boundary_loss")
    return (pred_soft * Tensor(s)).mean()


def _stacked_sdm(gt: np.ndarray) -> np.ndarray:
    if gt.ndim == 2:
        return signed_distance_map(gt)
    flat = gt.reshape(-1, gt.shape[-2], gt.shape[-1])
    return np.stack([signed_distance_map(m) for m in flat]).reshape(gt.shape)


def total_seg_loss(pred_soft: Tensor, gt, weight: float = 1.0, sdm=None) -> Tensor:
    """Dice plus ``weight`` times the boundary term (plain sum by default).

    ``sdm`` may carry a precomputed distance map (training caches these);
    with weight 0 the boundary term is skipped entirely.
    """
    g = np.asarray(gt)
    _check_match(pred_soft, g, "total_seg_loss")
    dice = dice_loss(pred_soft, g.astype(pred_soft.data.dtype))
    if weight == 0.0:
        return dice
    if sdm is None:
        sdm = _stacked_sdm(g.astype(bool))
    return dice + weight * boundary_loss(pred_soft, sdm)


def mse_heatmap_loss(pred: Tensor, gt_heatmap) -> Tensor:
    """Mean over pixels of the squared difference."""
    g = np.asarray(gt_heatmap, dtype=pred.data.dtype)
    _check_match(pred, g, "mse_heatmap_loss")
    diff = pred - Tensor(g)
    return (diff * diff).mean()
