"""Procedural corpora: textured backgrounds and stick figures with exact keypoints.

Every image is a pure function of ``(seed, index)``; samples are generated
from per-index derived seeds so they can be produced in any order.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .codecs import read_image, write_image
from .imaging import resize
from .rng import Rng, derive_seed

KEYPOINT_NAMES = (
    "head",
    "l_shoulder", "r_shoulder",
    "l_elbow", "r_elbow",
    "l_wrist", "r_wrist",
    "l_hip", "r_hip",
    "l_knee", "r_knee",
    "l_ankle", "r_ankle",
)


@dataclass(frozen=True)
class Bone:
    parent: str
    child: str
    length: tuple[float, float]  # fraction of figure height
    angle: tuple[float, float]  # degrees, 0 = +x, clockwise-positive (y down)


@dataclass(frozen=True)
class SkeletonSpec:
    names: tuple[str, ...]
    flip_pairs: tuple[tuple[int, int], ...]
    bones: tuple[Bone, ...]
    root: str = "pelvis"
    # segments drawn between keypoints; "mid_shoulder"/"mid_hip" are derived
    limbs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        perm = self.flip_index
        if not np.array_equal(perm[perm], np.arange(len(self.names))):
            raise ValueError("flip pairing is not an involution")
        children = [b.child for b in self.bones]
        if len(set(children)) != len(children) or self.root in children:
            raise ValueError("bone graph is not a tree")
        seen = {self.root}
        for bone in self.bones:
            if bone.parent not in seen:
                raise ValueError(f"bone {bone.parent}->{bone.child} listed before its parent")
            seen.add(bone.child)
        missing = set(self.names) - seen
        if missing:
            raise ValueError(f"keypoints not reachable from {self.root}: {sorted(missing)}")

    @property
    def n_keypoints(self) -> int:
        return len(self.names)

    @property
    def flip_index(self) -> np.ndarray:
        idx = np.arange(len(self.names))
        for a, b in self.flip_pairs:
            idx[a], idx[b] = b, a
        return idx


DEFAULT_SKELETON = SkeletonSpec(
    names=KEYPOINT_NAMES,
    flip_pairs=((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12)),
    bones=(
        Bone("pelvis", "neck", (0.28, 0.33), (-100.0, -80.0)),
        Bone("neck", "head", (0.11, 0.14), (-105.0, -75.0)),
        Bone("neck", "l_shoulder", (0.09, 0.12), (-12.0, 12.0)),
        Bone("neck", "r_shoulder", (0.09, 0.12), (168.0, 192.0)),
        Bone("l_shoulder", "l_elbow", (0.13, 0.17), (-60.0, 100.0)),
        Bone("r_shoulder", "r_elbow", (0.13, 0.17), (80.0, 240.0)),
        Bone("l_elbow", "l_wrist", (0.12, 0.15), (-80.0, 110.0)),
        Bone("r_elbow", "r_wrist", (0.12, 0.15), (70.0, 260.0)),
        Bone("pelvis", "l_hip", (0.06, 0.08), (-10.0, 10.0)),
        Bone("pelvis", "r_hip", (0.06, 0.08), (170.0, 190.0)),
        Bone("l_hip", "l_knee", (0.21, 0.25), (60.0, 110.0)),
        Bone("r_hip", "r_knee", (0.21, 0.25), (70.0, 120.0)),
        Bone("l_knee", "l_ankle", (0.20, 0.24), (65.0, 115.0)),
        Bone("r_knee", "r_ankle", (0.20, 0.24), (65.0, 115.0)),
    ),
    limbs=(
        ("mid_shoulder", "head"), ("l_shoulder", "r_shoulder"),
        ("mid_shoulder", "mid_hip"), ("l_hip", "r_hip"),
        ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
        ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
        ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
        ("r_hip", "r_knee"), ("r_knee", "r_ankle"),
    ),
)


@dataclass
class AnnotatedSample:
    image: np.ndarray
    keypoints: np.ndarray  # (K, 2) x, y
    visible: np.ndarray  # (K,) bool
    bbox: np.ndarray  # (4,) x, y, w, h

    @property
    def area(self) -> float:
        return float(self.bbox[2] * self.bbox[3])


@dataclass
class FigureStyle:
    color: np.ndarray
    thickness: float
    head_radius: float
    torso_thickness: float
    occluder: tuple[float, float, float, float] | None = None  # x0, y0, x1, y1
    occluder_color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def flipped(self, width: float) -> "FigureStyle":
        occ = self.occluder
        if occ is not None:
            occ = (width - occ[2], occ[1], width - occ[0], occ[3])
        return FigureStyle(self.color, self.thickness, self.head_radius,
                           self.torso_thickness, occ, self.occluder_color)


# ----------------------------------------------------------------- textures


def value_noise(gen: np.random.Generator, size: int, cells: int, channels: int = 3) -> np.ndarray:
    """Smooth noise in [0, 1]: a random ``cells x cells`` lattice bilinearly upsampled."""
    lattice = gen.random((cells, cells, channels))
    return resize(lattice, size, size)


def background(gen: np.random.Generator, size: int) -> np.ndarray:
    """Lit gradient plus multi-scale value noise plus a few flat primitives."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    u, v = xs / size, ys / size
    top = gen.uniform(0.45, 0.95, 3)
    bottom = gen.uniform(0.05, 0.5, 3)
    light = (1.0 - v)[..., None] * top + v[..., None] * bottom
    # consistent side lighting: brighter on the left
    light = light * (1.0 + gen.uniform(0.2, 0.45) * (0.5 - u))[..., None]
    noise = np.zeros((size, size, 3))
    amp_total = 0.0
    for cells, amp in ((4, 0.5), (8, 0.3), (16, 0.2)):
        noise += amp * (value_noise(gen, size, cells) - 0.5)
        amp_total += amp
    img = light + gen.uniform(0.15, 0.35) * noise / amp_total * 2.0
    for _ in range(int(gen.integers(2, 6))):
        color = gen.random(3)
        alpha = gen.uniform(0.3, 0.7)
        cx, cy = gen.uniform(0, size, 2)
        r = gen.uniform(0.04, 0.12) * size
        if gen.random() < 0.5:
            shape = ((xs - cx) ** 2 + (ys - cy) ** 2) <= r * r
        else:
            shape = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r * gen.uniform(0.4, 1.6))
        img = np.where(shape[..., None], (1 - alpha) * img + alpha * color, img)
    return np.clip(img, 0.0, 1.0)


# -------------------------------------------------------------- skeletons


def sample_pose(rng: Rng, skeleton: SkeletonSpec, size: int) -> np.ndarray:
    """Joint positions for ``skeleton.names`` (``(K, 2)``), fitted inside the frame."""
    height = size * rng.uniform(0.7, 0.95)
    joints = {skeleton.root: np.zeros(2)}
    for bone in skeleton.bones:
        length = rng.uniform(*bone.length) * height
        angle = math.radians(rng.uniform(*bone.angle))
        joints[bone.child] = joints[bone.parent] + length * np.array([math.cos(angle), math.sin(angle)])
    kps = np.array([joints[name] for name in skeleton.names])
    lo, hi = kps.min(axis=0), kps.max(axis=0)
    margin = 0.08 * size
    span = max(hi[0] - lo[0], hi[1] - lo[1])
    scale = min(1.0, (size - 2 * margin) / span)
    kps = (kps - (lo + hi) / 2.0) * scale
    lo, hi = kps.min(axis=0), kps.max(axis=0)
    # random placement that keeps every joint at least ``margin`` inside
    cx = rng.uniform(margin - lo[0], size - margin - hi[0])
    cy = rng.uniform(margin - lo[1], size - margin - hi[1])
    return kps + np.array([cx, cy])


def _segment_distance(xs, ys, a, b) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(xs - a[0], ys - a[1])
    t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(xs - (a[0] + t * ab[0]), ys - (a[1] + t * ab[1]))


def _named_points(skeleton: SkeletonSpec, keypoints: np.ndarray) -> dict[str, np.ndarray]:
    pts = dict(zip(skeleton.names, keypoints))
    pts["mid_shoulder"] = (pts["l_shoulder"] + pts["r_shoulder"]) / 2.0
    pts["mid_hip"] = (pts["l_hip"] + pts["r_hip"]) / 2.0
    return pts


def figure_alpha(skeleton: SkeletonSpec, keypoints: np.ndarray, style: FigureStyle,
                 size: int) -> np.ndarray:
    """Anti-aliased coverage of all limb capsules and the head disc."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    pts = _named_points(skeleton, keypoints)
    alpha = np.zeros((size, size))
    for a, b in skeleton.limbs:
        r = style.torso_thickness if (a, b) == ("mid_shoulder", "mid_hip") else style.thickness
        d = _segment_distance(xs, ys, pts[a], pts[b])
        alpha = np.maximum(alpha, np.clip(r + 0.5 - d, 0.0, 1.0))
    head = pts["head"]
    d = np.hypot(xs - head[0], ys - head[1])
    return np.maximum(alpha, np.clip(style.head_radius + 0.5 - d, 0.0, 1.0))


def render_figure(bg: np.ndarray, skeleton: SkeletonSpec, keypoints: np.ndarray,
                  style: FigureStyle) -> np.ndarray:
    size = bg.shape[0]
    alpha = figure_alpha(skeleton, keypoints, style, size)[..., None]
    img = (1.0 - alpha) * bg + alpha * style.color
    if style.occluder is not None:
        ys, xs = np.mgrid[0:size, 0:size] + 0.5
        x0, y0, x1, y1 = style.occluder
        inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
        img = np.where(inside[..., None], style.occluder_color, img)
    return np.clip(img, 0.0, 1.0)


def occluded(keypoints: np.ndarray, occluder) -> np.ndarray:
    if occluder is None:
        return np.zeros(len(keypoints), dtype=bool)
    x0, y0, x1, y1 = occluder
    x, y = keypoints[:, 0], keypoints[:, 1]
    return (x >= x0) & (x < x1) & (y >= y0) & (y < y1)


def sample_style(rng: Rng, keypoints: np.ndarray, size: int, occlude_prob: float = 0.7) -> FigureStyle:
    color = np.array([rng.random() for _ in range(3)])
    thickness = size * rng.uniform(0.02, 0.035)
    style = FigureStyle(color=color, thickness=thickness,
                        head_radius=thickness * rng.uniform(1.8, 2.4),
                        torso_thickness=thickness * rng.uniform(1.5, 2.0))
    if rng.bernoulli(occlude_prob):
        target = keypoints[rng.randbelow(len(keypoints))]
        w = size * rng.uniform(0.15, 0.3)
        h = size * rng.uniform(0.15, 0.3)
        cx = target[0] + rng.uniform(-0.3, 0.3) * w
        cy = target[1] + rng.uniform(-0.3, 0.3) * h
        style.occluder = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        style.occluder_color = np.array([rng.random() for _ in range(3)])
    return style


def figure_bbox(keypoints: np.ndarray, style: FigureStyle, size: int) -> np.ndarray:
    pad = max(style.thickness, style.head_radius)
    lo = np.clip(keypoints.min(axis=0) - pad, 0.0, size)
    hi = np.clip(keypoints.max(axis=0) + pad, 0.0, size)
    return np.array([lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]])


# ----------------------------------------------------------------- corpora


def pretext_image(seed: int, index: int, size: int,
                  skeleton: SkeletonSpec = DEFAULT_SKELETON) -> np.ndarray:
    rng = Rng(derive_seed(seed, 0, index))
    bg = background(rng.numpy(), size)
    kps = sample_pose(rng, skeleton, size)
    style = sample_style(rng, kps, size, occlude_prob=0.0)
    return render_figure(bg, skeleton, kps, style)


def gen_pretext_corpus(count: int, size: int, seed: int,
                       skeleton: SkeletonSpec = DEFAULT_SKELETON) -> list[np.ndarray]:
    """Unlabelled person-like images: textured background plus an unannotated figure."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [pretext_image(seed, i, size, skeleton) for i in range(count)]


def keypoint_sample(seed: int, index: int, size: int,
                    skeleton: SkeletonSpec = DEFAULT_SKELETON) -> AnnotatedSample:
    rng = Rng(derive_seed(seed, 1, index))
    bg = background(rng.numpy(), size)
    kps = sample_pose(rng, skeleton, size)
    style = sample_style(rng, kps, size)
    image = render_figure(bg, skeleton, kps, style)
    visible = ~occluded(kps, style.occluder)
    return AnnotatedSample(image, kps, visible, figure_bbox(kps, style, size))


def gen_keypoint_corpus(count: int, size: int, seed: int,
                        skeleton: SkeletonSpec = DEFAULT_SKELETON) -> list[AnnotatedSample]:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [keypoint_sample(seed, i, size, skeleton) for i in range(count)]


def flip_sample(sample: AnnotatedSample, skeleton: SkeletonSpec = DEFAULT_SKELETON) -> AnnotatedSample:
    """Mirror horizontally and swap left/right keypoint identities."""
    w = sample.image.shape[1]
    idx = skeleton.flip_index
    kps = sample.keypoints.copy()
    kps[:, 0] = w - kps[:, 0]
    x, y, bw, bh = sample.bbox
    return AnnotatedSample(sample.image[:, ::-1].copy(), kps[idx], sample.visible[idx].copy(),
                           np.array([w - x - bw, y, bw, bh]))


# ------------------------------------------------------------------- on disk

ANNOTATION_FILE = "annotations.txt"


def patch_mean_std(image: np.ndarray, n: int = 6) -> float:
    """Standard deviation of per-cell mean intensity over an ``n x n`` grid."""
    size = image.shape[0]
    side = -(-size // n)
    pad = side * n - size
    img = np.pad(image.mean(axis=2), ((0, pad), (0, pad)), constant_values=np.nan)
    cells = img.reshape(n, side, n, side)
    return float(np.nanstd(np.nanmean(cells, axis=(1, 3))))


def save_corpus(directory, images=None, samples=None) -> list[str]:
    """Write PNGs (``img_00000.png`` ...) plus, for annotated samples, one annotation file.

    Annotation line: ``file K x1 y1 v1 ... xK yK vK bx by bw bh``.
    """
    os.makedirs(directory, exist_ok=True)
    names = []
    lines = []
    items = samples if samples is not None else images
    for i, item in enumerate(items):
        name = f"img_{i:05d}.png"
        image = item.image if samples is not None else item
        write_image(os.path.join(directory, name), image)
        names.append(name)
        if samples is not None:
            fields = [name, str(len(item.keypoints))]
            for (x, y), v in zip(item.keypoints, item.visible):
                fields += [repr(float(x)), repr(float(y)), str(int(v))]
            fields += [repr(float(b)) for b in item.bbox]
            lines.append(" ".join(fields))
    if samples is not None:
        with open(os.path.join(directory, ANNOTATION_FILE), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return names


def load_images(directory) -> list[np.ndarray]:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith((".png", ".ppm")))
    if not names:
        raise FileNotFoundError(f"no PNG/PPM images in {directory}")
    return [read_image(os.path.join(directory, n)) for n in names]


def load_annotated(directory) -> list[AnnotatedSample]:
    path = os.path.join(directory, ANNOTATION_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {ANNOTATION_FILE} in {directory}")
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                k = int(parts[1])
                vals = parts[2:]
                if len(vals) != 3 * k + 4:
                    raise ValueError(f"expected {3 * k + 4} numbers, got {len(vals)}")
                trip = np.array([float(v) for v in vals[:3 * k]]).reshape(k, 3)
                bbox = np.array([float(v) for v in vals[3 * k:]])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed annotation ({exc})") from None
            image = read_image(os.path.join(directory, parts[0]))
            samples.append(AnnotatedSample(image, trip[:, :2], trip[:, 2] > 0, bbox))
    return samples
