"""Gaussian target heatmaps, the masked MSE loss and peak decoding.

Heatmap coordinates follow the image convention: pixel ``(col, row)`` is
centred at ``(col + 0.5, row + 0.5)``.  Input-space points map to heatmap
space by dividing by the network stride.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codecs import encode_png

STRIDE = 4


@dataclass
class HeatmapStack:
    """``data`` is ``(..., C, H, W)``; ``mask`` is ``(..., C)`` booleans."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.shape[:-2] != self.mask.shape:
            raise ValueError(f"mask shape {self.mask.shape} does not match data {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def shape(self):
        return self.data.shape


def sigma_bound(n: int, out_size: float) -> float:
    """Largest admissible sigma (exclusive) for an N x N puzzle: ``out_size / (6 n)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return out_size / (6.0 * n)


def default_sigma(n: int, out_size: float) -> float:
    """1.5 heatmap px, shrunk to 90% of the bound when the bound is tighter."""
    return min(1.5, 0.9 * sigma_bound(n, out_size))


def render_targets(centers, sigma: float, out_h: int, out_w: int,
                   visible=None, dtype=np.float64) -> HeatmapStack:
    """Unit-amplitude Gaussians at ``centers`` (``(..., C, 2)`` as x, y).

    Channels whose centre falls outside ``[0, W) x [0, H)`` (or that are
    flagged invisible) are zeroed and masked out.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    centers = np.asarray(centers, dtype=np.float64)
    x = centers[..., 0]
    y = centers[..., 1]
    mask = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x < out_w) & (y >= 0) & (y < out_h)
    if visible is not None:
        mask &= np.asarray(visible, dtype=bool)
    xs = np.arange(out_w) + 0.5
    ys = np.arange(out_h) + 0.5
    xc = np.where(mask, x, 0.0)[..., None]
    yc = np.where(mask, y, 0.0)[..., None]
    gx = np.exp(-((xs - xc) ** 2) / (2.0 * sigma * sigma))
    gy = np.exp(-((ys - yc) ** 2) / (2.0 * sigma * sigma))
    data = gy[..., :, None] * gx[..., None, :]
    data *= mask[..., None, None]
    return HeatmapStack(data.astype(dtype, copy=False), mask)


def _check_pair(target: HeatmapStack, pred: np.ndarray):
    if target.data.shape != pred.shape:
        raise ValueError(f"shape mismatch: target {target.data.shape} vs prediction {pred.shape}")


def masked_mse(target: HeatmapStack, pred: np.ndarray) -> float:
    """Masked MSE normalised by the full ``C * H * W`` (averaged over leading batch dims)."""
    _check_pair(target, pred)
    c, h, w = pred.shape[-3:]
    diff = (target.data.astype(np.float64) - pred) * target.mask[..., None, None]
    per_sample = np.sum(diff * diff, axis=(-3, -2, -1)) / (c * h * w)
    return float(np.mean(per_sample))


def masked_mse_gradient(target: HeatmapStack, pred: np.ndarray) -> np.ndarray:
    _check_pair(target, pred)
    c, h, w = pred.shape[-3:]
    batch = int(np.prod(pred.shape[:-3], dtype=np.int64))
    scale = -2.0 / (c * h * w * batch)
    grad = scale * (target.data - pred) * target.mask[..., None, None]
    return grad.astype(pred.dtype, copy=False)


@dataclass
class Peaks:
    points: np.ndarray  # (..., C, 2) heatmap coordinates
    scores: np.ndarray  # (..., C)
    valid: np.ndarray  # (..., C)


def decode_peaks(heatmaps, mask=None) -> Peaks:
    """Per-channel argmax plus a quarter-pixel shift toward the larger neighbour.

    Ties go to the smallest row-major index.  ``valid`` mirrors the stack's
    mask when one is given, otherwise it is all true.
    """
    if isinstance(heatmaps, HeatmapStack):
        mask = heatmaps.mask if mask is None else mask
        heatmaps = heatmaps.data
    hm = np.asarray(heatmaps)
    h, w = hm.shape[-2:]
    flat = hm.reshape(hm.shape[:-2] + (h * w,))
    idx = np.argmax(flat, axis=-1)
    scores = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    row, col = np.divmod(idx, w)

    def at(r, c):
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        rr = np.clip(r, 0, h - 1)
        cc = np.clip(c, 0, w - 1)
        vals = np.take_along_axis(flat, (rr * w + cc)[..., None], axis=-1)[..., 0]
        return vals, ok

    right, ok_r = at(row, col + 1)
    left, ok_l = at(row, col - 1)
    down, ok_d = at(row + 1, col)
    up, ok_u = at(row - 1, col)
    inner_x = ok_r & ok_l
    inner_y = ok_d & ok_u
    dx = np.where(inner_x, 0.25 * np.sign(right - left), 0.0)
    dy = np.where(inner_y, 0.25 * np.sign(down - up), 0.0)
    points = np.stack([col + 0.5 + dx, row + 0.5 + dy], axis=-1).astype(np.float64)
    valid = np.ones(scores.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return Peaks(points, scores, valid)


def heatmap_mosaic(data: np.ndarray, columns: int | None = None, gap: int = 1) -> np.ndarray:
    """Tile a ``C x H x W`` stack into one gray image (values clipped to [0, 1])."""
    c, h, w = data.shape
    cols = columns or int(math.ceil(math.sqrt(c)))
    rows = int(math.ceil(c / cols))
    out = np.zeros((rows * (h + gap) - gap, cols * (w + gap) - gap, 1))
    for i in range(c):
        r, k = divmod(i, cols)
        out[r * (h + gap):r * (h + gap) + h, k * (w + gap):k * (w + gap) + w, 0] = data[i]
    return np.clip(out, 0.0, 1.0)


def mosaic_png(data: np.ndarray, columns: int | None = None) -> bytes:
    return encode_png(heatmap_mosaic(data, columns))


def side_by_side_png(pred: np.ndarray, target: np.ndarray, columns: int | None = None) -> bytes:
    """Predicted mosaic on the left, target mosaic on the right."""
    a = heatmap_mosaic(pred, columns)
    b = heatmap_mosaic(target, columns)
    sep = np.ones((a.shape[0], 2, 1))
    return encode_png(np.concatenate([a, sep, b], axis=1))
