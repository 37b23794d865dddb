"""Jigsaw precision, keypoint OKS / mAP, and the freeze-depth transfer sweep."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .heatmap import STRIDE, decode_peaks
from .model import ModelState, predict
from .puzzle import fisher_yates, make_grid, shuffle_image, shuffled_centers
from .rng import Rng, derive_seed

OKS_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))

# Standard 17-keypoint benchmark falloffs: k_i = 2 * sigma_i.
COCO_SIGMAS = np.array([.26, .25, .25, .35, .35, .79, .79, .72, .72,
                        .62, .62, 1.07, 1.07, .87, .87, .89, .89]) / 10.0
COCO_FALLOFF = 2.0 * COCO_SIGMAS
SYNTHETIC_FALLOFF = 0.08


# ------------------------------------------------------------------ jigsaw


@dataclass
class JigsawResult:
    correct: np.ndarray  # (N^2,) bool
    errors: np.ndarray  # (N^2,) L2 distance in heatmap px

    @property
    def solved(self) -> bool:
        return puzzle_solved(self.correct)


def default_eps(n: int, size: int) -> float:
    """Half a grid cell in heatmap pixels."""
    return (size / STRIDE) / (2.0 * n)


def patch_correct(pred_center, gt_center, eps: float) -> bool:
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    d = np.asarray(pred_center, dtype=np.float64) - np.asarray(gt_center, dtype=np.float64)
    return bool(math.hypot(d[0], d[1]) < eps)


def puzzle_solved(correct) -> bool:
    return bool(np.all(np.asarray(correct, dtype=bool)))


def precision(solved: int, failed: int) -> float:
    if solved < 0 or failed < 0:
        raise ValueError("counts must be non-negative")
    if solved + failed == 0:
        raise ValueError("precision of an empty evaluation set is undefined")
    return solved / (solved + failed)


@dataclass
class HsjpReport:
    precision: float
    patch_accuracy: float
    solved: int
    failed: int
    results: list[JigsawResult] = field(repr=False, default_factory=list)


def to_input(image: np.ndarray) -> np.ndarray:
    """``H x W x C`` image in [0, 1] to a centred ``C x H x W`` network input."""
    return (image.transpose(2, 0, 1) - 0.5).astype(np.float32)


def hsjp_eval_batch(images: Sequence[np.ndarray], n: int, size: int, seed: int = 0,
                    concat_unshuffled: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled, un-augmented inputs and heatmap-space target centres.

    Image ``i`` is shuffled with a stream derived from ``(seed, i)``, so the
    set of puzzles depends only on the seed and the images.
    """
    grid = make_grid(size, n)
    inputs, centers = [], []
    for i, image in enumerate(images):
        perm = fisher_yates(n * n, Rng(derive_seed(seed, i)))
        shuffled = shuffle_image(image, grid, perm)
        x = to_input(shuffled)
        if concat_unshuffled:
            x = np.concatenate([x, to_input(image)], axis=0)
        inputs.append(x)
        centers.append(shuffled_centers(grid, perm, size) / STRIDE)
    return np.stack(inputs), np.stack(centers)


def score_puzzles(pred_centers: np.ndarray, gt_centers: np.ndarray, eps: float) -> list[JigsawResult]:
    results = []
    for pred, gt in zip(pred_centers, gt_centers):
        errors = np.hypot(*(pred - gt).T)
        correct = np.array([patch_correct(p, g, eps) for p, g in zip(pred, gt)])
        results.append(JigsawResult(correct, errors))
    return results


def evaluate_hsjp(model: ModelState | Callable[[np.ndarray], np.ndarray],
                  images: Sequence[np.ndarray], n: int, size: int,
                  eps: float | None = None, seed: int = 0) -> HsjpReport:
    """Split, shuffle (no augmentation), predict, decode and score every image.

    ``model`` is a :class:`ModelState` or any callable mapping an input batch
    to ``B x N^2 x S/4 x S/4`` heatmaps.
    """
    if eps is None:
        eps = default_eps(n, size)
    concat = isinstance(model, ModelState) and model.in_channels == 6
    inputs, gt = hsjp_eval_batch(images, n, size, seed, concat)
    heatmaps = predict(model, inputs) if isinstance(model, ModelState) else model(inputs)
    peaks = decode_peaks(heatmaps)
    results = score_puzzles(peaks.points, gt, eps)
    solved = sum(r.solved for r in results)
    accuracy = float(np.mean([r.correct.mean() for r in results]))
    return HsjpReport(precision(solved, len(results) - solved), accuracy, solved,
                      len(results) - solved, results)


# ------------------------------------------------------------------- pose


class NoVisibleKeypoints(ValueError):
    """OKS is undefined for an instance without visible keypoints."""


def oks(pred_kps, gt_kps, visible, scale: float, falloff=SYNTHETIC_FALLOFF) -> float:
    """Mean over visible keypoints of ``exp(-d^2 / (2 scale^2 k^2))``."""
    pred = np.asarray(pred_kps, dtype=np.float64)
    gt = np.asarray(gt_kps, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint count mismatch: {pred.shape} vs {gt.shape}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    vis = np.asarray(visible, dtype=bool)
    if not vis.any():
        raise NoVisibleKeypoints("no visible keypoints")
    k = np.broadcast_to(np.asarray(falloff, dtype=np.float64), vis.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        d2 = np.sum((pred - gt) ** 2, axis=-1)  # far misses overflow to inf -> similarity 0
        e = np.exp(-d2 / (2.0 * scale * scale * k * k))
    e = np.where(np.isfinite(d2), e, 0.0)
    return float(np.mean(e[vis]))


@dataclass
class MapReport:
    map: float
    ap: dict[float, float]
    n_valid: int
    n_invalid: int


def map_over_thresholds(per_instance_oks: Sequence[float | None]) -> MapReport:
    """AP at each threshold is the fraction of valid instances with OKS >= t.

    ``None`` entries mark invalid predictions; they are excluded and counted.
    """
    values = [v for v in per_instance_oks if v is not None]
    invalid = len(per_instance_oks) - len(values)
    if not values:
        raise ValueError("no valid instances to score")
    arr = np.asarray(values, dtype=np.float64)
    ap = {t: float(np.mean(arr >= t)) for t in OKS_THRESHOLDS}
    return MapReport(float(np.mean(list(ap.values()))), ap, len(values), invalid)


@dataclass
class PoseReport:
    oks: list[float | None]
    summary: MapReport

    @property
    def map(self) -> float:
        return self.summary.map


def predict_keypoints(state: ModelState, images: Sequence[np.ndarray]) -> np.ndarray:
    """Decoded keypoints in input-pixel coordinates, ``(B, K, 2)``."""
    batch = np.stack([to_input(img) for img in images])
    if state.in_channels == 2 * batch.shape[1]:
        batch = np.concatenate([batch, batch], axis=1)
    heatmaps = predict(state, batch)
    return decode_peaks(heatmaps).points * STRIDE


def evaluate_pose(state: ModelState, samples, falloff=SYNTHETIC_FALLOFF) -> PoseReport:
    preds = predict_keypoints(state, [s.image for s in samples])
    scores: list[float | None] = []
    for pred, sample in zip(preds, samples):
        try:
            scores.append(oks(pred, sample.keypoints, sample.visible,
                              math.sqrt(sample.area), falloff))
        except NoVisibleKeypoints:
            scores.append(None)
    return PoseReport(scores, map_over_thresholds(scores))


# ------------------------------------------------------------------ sweeps


def transfer_sweep(pretrained: ModelState | None, train_samples, eval_samples,
                   depths: Sequence[int], config) -> list[tuple[int, float]]:
    """Finetune once per freeze depth with identical seeds; rows of ``(depth, mAP)``."""
    from dataclasses import replace

    from .train import finetune

    rows = []
    for depth in depths:
        result = finetune(train_samples, pretrained, replace(config, freeze_depth=depth))
        rows.append((depth, evaluate_pose(result.state, eval_samples).map))
    return rows


def format_table(header: Sequence[str], rows) -> str:
    """Tab-separated table with a header line."""
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines)
