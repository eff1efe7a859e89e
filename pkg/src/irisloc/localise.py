"""From model output maps to an iris-centre coordinate.

Two paths: heatmap argmax (regression pipeline) and threshold -> largest
connected blob -> centroid (segmentation pipeline). Also synthesises the
Gaussian ground-truth heatmaps used to train the regressor.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PixelPoint:
    """Image coordinate: x is the column, y is the row, origin top-left."""

    x: float
    y: float


def gaussian_heatmap(center: PixelPoint, size: tuple[int, int], sigma: float) -> np.ndarray:
    """Peak-1 Gaussian centred on ``center``; no renormalisation.

    value(r, c) = exp(-((c-x)^2 + (r-y)^2) / (2 sigma^2)), float32 HxW.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = size
    if not (-0.5 <= center.x <= w - 0.5 and -0.5 <= center.y <= h - 0.5):
        raise ValueError(f"center {center} outside {h}x{w} image bounds")
    ys = np.arange(h, dtype=np.float64) - center.y
    xs = np.arange(w, dtype=np.float64) - center.x
    d2 = ys[:, None] ** 2 + xs[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)


def argmax_point(heatmap: np.ndarray) -> PixelPoint:
    """Integer coordinates of the hottest pixel; ties break to the smallest
    row-major index."""
    hm = np.asarray(heatmap)
    if hm.ndim != 2 or hm.size == 0:
        raise ValueError(f"argmax_point expects a non-empty HxW map, got shape {hm.shape}")
    flat = int(hm.argmax())
    r, c = divmod(flat, hm.shape[1])
    return PixelPoint(float(c), float(r))


def binarize(soft: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Boolean mask: soft >= threshold (inclusive)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(soft) >= threshold


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """8-connected labelling; labels are assigned 1.. in first-encounter
    row-major order. Returns (label map, areas) with areas[k-1] = size of
    component k."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"connected_components expects an HxW mask, got shape {m.shape}")
    h, w = m.shape
    labels = np.zeros((h, w), dtype=np.int32)
    areas: list[int] = []
    for r0 in range(h):
        for c0 in range(w):
            if not m[r0, c0] or labels[r0, c0]:
                continue
            label = len(areas) + 1
            queue = deque([(r0, c0)])
            labels[r0, c0] = label
            area = 0
            while queue:
                r, c = queue.popleft()
                area += 1
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and m[rr, cc] and not labels[rr, cc]:
                            labels[rr, cc] = label
                            queue.append((rr, cc))
            areas.append(area)
    return labels, areas


def largest_blob_centroid(mask: np.ndarray) -> PixelPoint | None:
    """Centroid of the largest 8-connected component (ties take the smaller
    label); None for an empty mask."""
    labels, areas = connected_components(mask)
    if not areas:
        return None
    best = int(np.argmax(areas)) + 1
    ys, xs = np.nonzero(labels == best)
    return PixelPoint(float(xs.mean()), float(ys.mean()))
