"""Adam, step-decay schedules, HSJP pretraining and keypoint finetuning."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .evaluation import default_eps, evaluate_hsjp, evaluate_pose, to_input
from .heatmap import STRIDE, HeatmapStack, default_sigma, masked_mse, masked_mse_gradient, render_targets, sigma_bound
from .imaging import (AffineTransform, ColorAugConfig, SpatialAugConfig, color_augment,
                      resize, sample_color_params, sample_spatial_augmentation, warp_image)
from .model import GROUPS, ModelState, backward, build_network, forward, set_freeze_prefix, swap_head
from .puzzle import Permutation, fisher_yates, make_grid, shuffle_image, shuffled_centers
from .rng import Rng, derive_seed
from .synthdata import DEFAULT_SKELETON, AnnotatedSample, SkeletonSpec

log = logging.getLogger(__name__)

# stream labels for derive_seed
_INIT, _HEAD, _DATA, _EVAL, _SUBSET = 1, 2, 3, 4, 5


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    milestones: tuple[tuple[int, float], ...]
    total_epochs: int

    def __post_init__(self):
        epochs = [e for e, _ in self.milestones]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"milestone epochs must be strictly increasing: {epochs}")
        if epochs and (epochs[0] < 0 or epochs[-1] >= self.total_epochs):
            raise ValueError(f"milestones {epochs} must lie in [0, {self.total_epochs})")


PAPER_SCHEDULE = Schedule(1e-3, ((190, 1e-4), (220, 1e-5)), 240)
DESK_SCHEDULE = Schedule(1e-3, ((30, 1e-4), (36, 1e-5)), 40)


def lr_at_epoch(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    lr = schedule.base_lr
    for start, value in schedule.milestones:
        if epoch >= start:
            lr = value
    return lr


# -------------------------------------------------------------------- adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update of every tensor in ``grads``, in place."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"{name}: parameter {params[name].shape} vs gradient {g.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class TrainConfig:
    """Flat training configuration; field names double as config-file keys."""

    n: int = 3
    size: int = 96
    sigma: float | None = None
    epochs: int = 40
    batch: int = 16
    seed: int = 0
    lr: float = 1e-3
    milestones: tuple[tuple[int, float], ...] = ((30, 1e-4), (36, 1e-5))
    eps: float | None = None
    fraction: float = 1.0
    freeze_depth: int = 0
    concat_unshuffled: bool = False
    scale_aug: float = 0.35
    rotate_aug: float = 45.0
    translate_aug: float = 0.10
    flip_prob: float = 0.5
    color_aug: bool = True
    keypoint_sigma: float = 1.0
    eval_every: int = 5
    select: str = "best"
    threads: int = 0
    deterministic: bool = False

    def validate(self) -> "TrainConfig":
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.size < 4 or self.size % STRIDE:
            raise ValueError(f"size must be a positive multiple of {STRIDE}, got {self.size}")
        if self.n > self.size:
            raise ValueError(f"n={self.n} exceeds size={self.size}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        bound = sigma_bound(self.n, self.size / STRIDE)
        if self.sigma is not None and not 0.0 < self.sigma < bound:
            raise ValueError(f"sigma {self.sigma} must lie in (0, {bound:.6g}) for n={self.n}, "
                             f"size={self.size}")
        if self.epochs < 1 or self.batch < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch and eval_every must be >= 1")
        if not 0 <= self.freeze_depth <= len(GROUPS):
            raise ValueError(f"freeze_depth must lie in [0, {len(GROUPS)}], got {self.freeze_depth}")
        if self.eps is not None and not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.keypoint_sigma <= 0:
            raise ValueError("keypoint_sigma must be positive")
        if self.select not in ("best", "final"):
            raise ValueError(f"select must be 'best' or 'final', got {self.select!r}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        self.schedule  # milestone checks
        return self

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.lr, tuple(self.milestones), self.epochs)

    @property
    def target_sigma(self) -> float:
        return self.sigma if self.sigma is not None else default_sigma(self.n, self.size / STRIDE)

    @property
    def match_eps(self) -> float:
        return self.eps if self.eps is not None else default_eps(self.n, self.size)

    @property
    def spatial(self) -> SpatialAugConfig:
        return SpatialAugConfig(self.scale_aug, self.rotate_aug, self.translate_aug)


PAPER_PRESET = dict(size=224, n=6, epochs=240, batch=256, lr=1e-3,
                    milestones=((190, 1e-4), (220, 1e-5)))

CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


@contextlib.contextmanager
def thread_limit(config: TrainConfig):
    """Cap BLAS threads: 1 when ``deterministic``, else ``threads`` (0 = untouched)."""
    limit = 1 if config.deterministic else (config.threads or None)
    if limit is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=limit):
        yield


# ---------------------------------------------------------------- batches


def _hsjp_example(image, grid, config: TrainConfig, rng: Rng, perm: Permutation | None,
                  augment: bool, transform: AffineTransform | None = None):
    size = config.size
    if image.shape[:2] != (size, size):
        image = resize(image, size, size)
    if perm is None:
        perm = fisher_yates(grid.cells, rng)
    shuffled = shuffle_image(image, grid, perm)
    centers = shuffled_centers(grid, perm, size)
    original = image
    if augment:
        if transform is None:
            transform = sample_spatial_augmentation(rng, config.spatial, size, size)
        shuffled = warp_image(shuffled, transform, size, size)
        centers = transform.apply(centers)
        if config.concat_unshuffled:
            original = warp_image(original, transform, size, size)
        if config.color_aug:
            params = sample_color_params(rng, ColorAugConfig())
            shuffled = color_augment(shuffled, params)
            if config.concat_unshuffled:
                original = color_augment(original, params)
    x = to_input(shuffled)
    if config.concat_unshuffled:
        x = np.concatenate([x, to_input(original)], axis=0)
    return x, centers / STRIDE


def make_hsjp_batch(images: Sequence[np.ndarray], config: TrainConfig, rng: Rng,
                    augment: bool = True, permutations: Sequence[Permutation] | None = None,
                    transforms: Sequence[AffineTransform] | None = None):
    """Network inputs ``B x C x S x S`` and masked target stacks ``B x N^2 x S/4 x S/4``.

    ``permutations`` and ``transforms`` replace the sampled ones when given.
    """
    grid = make_grid(config.size, config.n)
    xs, cs = [], []
    for i, image in enumerate(images):
        perm = permutations[i] if permutations is not None else None
        transform = transforms[i] if transforms is not None else None
        x, c = _hsjp_example(image, grid, config, rng, perm, augment, transform)
        xs.append(x)
        cs.append(c)
    out = config.size // STRIDE
    targets = render_targets(np.stack(cs), config.target_sigma, out, out, dtype=np.float32)
    return np.stack(xs), targets


def flip_keypoints(keypoints: np.ndarray, visible: np.ndarray, width: float,
                   skeleton: SkeletonSpec = DEFAULT_SKELETON):
    """Mirror ``x -> width - x`` and swap left/right identities."""
    kps = keypoints.copy()
    kps[:, 0] = width - kps[:, 0]
    idx = skeleton.flip_index
    return kps[idx], np.asarray(visible)[idx]


def make_keypoint_batch(samples: Sequence[AnnotatedSample], config: TrainConfig, rng: Rng,
                        augment: bool = True, in_channels: int = 3,
                        skeleton: SkeletonSpec = DEFAULT_SKELETON):
    size = config.size
    spatial = SpatialAugConfig(config.scale_aug, config.rotate_aug, 0.0)
    xs, cs, vs = [], [], []
    for sample in samples:
        image, kps, vis = sample.image, sample.keypoints.astype(np.float64), sample.visible
        h, w = image.shape[:2]
        if (h, w) != (size, size):
            image = resize(image, size, size)
            kps = kps * np.array([size / w, size / h])
        if augment:
            if rng.bernoulli(config.flip_prob):
                image = image[:, ::-1]
                kps, vis = flip_keypoints(kps, vis, size, skeleton)
            transform = sample_spatial_augmentation(rng, spatial, size, size)
            image = warp_image(image, transform, size, size)
            kps = transform.apply(kps)
        x = to_input(image)
        if in_channels == 2 * x.shape[0]:
            x = np.concatenate([x, x], axis=0)
        xs.append(x)
        cs.append(kps / STRIDE)
        vs.append(vis)
    out = size // STRIDE
    targets = render_targets(np.stack(cs), config.keypoint_sigma, out, out,
                             visible=np.stack(vs), dtype=np.float32)
    return np.stack(xs), targets


# ------------------------------------------------------------------- loops


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    precision: float | None = None
    accuracy: float | None = None
    map: float | None = None

    def line(self) -> str:
        cols = [str(self.epoch), f"{self.loss:.9g}", f"{self.lr:g}"]
        metric = self.precision if self.precision is not None else self.map
        if metric is not None:
            cols.append(f"{metric:.6f}")
        return "\t".join(cols)


@dataclass
class TrainResult:
    state: ModelState
    records: list[EpochRecord]
    best_epoch: int | None = None
    steps: int = 0

    @property
    def log_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)


def train_step(state: ModelState, adam: AdamState, inputs, targets: HeatmapStack, lr: float) -> float:
    out, cache = forward(state, inputs)
    loss = masked_mse(targets, out)
    grads = backward(state, cache, masked_mse_gradient(targets, out))
    trainable = state.trainable()
    if trainable:
        adam_step(state.params, {k: grads[k] for k in trainable}, adam, lr)
        state.touch()
    return loss


def _batches(n_items: int, batch: int, rng: Rng):
    order = rng.numpy().permutation(n_items)
    for start in range(0, n_items, batch):
        yield order[start:start + batch]


def pretrain(images: Sequence[np.ndarray], config: TrainConfig,
             heldout: Sequence[np.ndarray] | None = None,
             state: ModelState | None = None) -> TrainResult:
    """Masked-MSE training on shuffled puzzles; keeps the best-precision weights.

    Held-out puzzles (no augmentation) are scored every ``eval_every`` epochs
    and after the last one.  Ties in precision go to the higher per-patch
    accuracy, then to the earlier epoch.  ``select='final'`` keeps the last
    weights instead.
    """
    config.validate()
    with thread_limit(config):
        return _pretrain(list(images), config, heldout, state)


def _pretrain(images, config, heldout, state) -> TrainResult:
    if not images:
        raise ValueError("empty pretraining dataset")
    if heldout is None:
        k = max(1, len(images) // 10)
        if len(images) <= k:
            raise ValueError("need at least two images to hold out a split")
        images, heldout = images[:-k], images[-k:]
    if state is None:
        state = build_network(config.size, config.n ** 2, Rng(derive_seed(config.seed, _INIT)),
                              in_channels=6 if config.concat_unshuffled else 3)
    set_freeze_prefix(state, config.freeze_depth)
    rng = Rng(derive_seed(config.seed, _DATA))
    adam = AdamState()
    schedule = config.schedule
    records: list[EpochRecord] = []
    best = None  # (key, epoch, params copy)
    steps = 0
    for epoch in range(config.epochs):
        lr = lr_at_epoch(schedule, epoch)
        losses = []
        for idx in _batches(len(images), config.batch, rng):
            inputs, targets = make_hsjp_batch([images[i] for i in idx], config, rng)
            losses.append(train_step(state, adam, inputs, targets, lr))
            steps += 1
        rec = EpochRecord(epoch, float(np.mean(losses)), lr)
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            report = evaluate_hsjp(state, heldout, config.n, config.size, config.match_eps,
                                   seed=derive_seed(config.seed, _EVAL))
            rec.precision, rec.accuracy = report.precision, report.patch_accuracy
            key = (report.precision, report.patch_accuracy)
            if best is None or key > best[0]:
                best = (key, epoch, {k: v.copy() for k, v in state.params.items()})
        records.append(rec)
        log.info("pretrain %s", rec.line())
    if config.select == "best" and best is not None:
        final = ModelState(best[2], dict(state.frozen))
        return TrainResult(final, records, best[1], steps)
    return TrainResult(state, records, config.epochs - 1, steps)


def subsample_labels(dataset: Sequence, fraction: float, seed: int) -> list:
    """``floor(fraction * len)`` items without replacement, in original order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    dataset = list(dataset)
    k = int(np.floor(fraction * len(dataset) + 1e-9))
    if k == 0:
        raise ValueError(f"fraction {fraction} of {len(dataset)} items selects nothing")
    if k == len(dataset):
        return dataset
    perm = fisher_yates(len(dataset), Rng(derive_seed(seed, _SUBSET)))
    chosen = np.sort(perm.mapping[:k])
    return [dataset[i] for i in chosen]


def finetune(samples: Sequence[AnnotatedSample], pretrained: ModelState | None,
             config: TrainConfig, eval_samples: Sequence[AnnotatedSample] | None = None,
             skeleton: SkeletonSpec = DEFAULT_SKELETON) -> TrainResult:
    """Keypoint-heatmap training from a pretrained backbone or from scratch."""
    config.validate()
    with thread_limit(config):
        return _finetune(list(samples), pretrained, config, eval_samples, skeleton)


def _finetune(samples, pretrained, config, eval_samples, skeleton) -> TrainResult:
    if not samples:
        raise ValueError("empty finetuning dataset")
    k = skeleton.n_keypoints
    for i, s in enumerate(samples):
        if s.keypoints.shape != (k, 2) or s.visible.shape != (k,):
            raise ValueError(f"sample {i}: expected {k} keypoints, got {s.keypoints.shape}")
    if config.fraction < 1.0:
        samples = subsample_labels(samples, config.fraction, config.seed)
    head_rng = Rng(derive_seed(config.seed, _HEAD))
    if pretrained is None:
        state = build_network(config.size, k, Rng(derive_seed(config.seed, _INIT)))
    else:
        if pretrained.in_channels not in (3, 6):
            raise ValueError(f"pretrained backbone takes {pretrained.in_channels} channels")
        state = swap_head(pretrained, k, head_rng)
    set_freeze_prefix(state, config.freeze_depth)
    rng = Rng(derive_seed(config.seed, _DATA))
    adam = AdamState()
    schedule = config.schedule
    records = []
    steps = 0
    for epoch in range(config.epochs):
        lr = lr_at_epoch(schedule, epoch)
        losses = []
        for idx in _batches(len(samples), config.batch, rng):
            inputs, targets = make_keypoint_batch([samples[i] for i in idx], config, rng,
                                                  in_channels=state.in_channels, skeleton=skeleton)
            losses.append(train_step(state, adam, inputs, targets, lr))
            steps += 1
        rec = EpochRecord(epoch, float(np.mean(losses)), lr)
        if eval_samples is not None and ((epoch + 1) % config.eval_every == 0
                                         or epoch == config.epochs - 1):
            rec.map = evaluate_pose(state, eval_samples).map
        records.append(rec)
        log.info("finetune %s", rec.line())
    return TrainResult(state, records, config.epochs - 1, steps)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw).validate()
