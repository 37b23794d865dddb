"""Resizing, affine spatial augmentation and colour augmentation.

Coordinates: origin at the top-left corner of the image, x to the right,
y downward, and pixel ``(col, row)`` has its centre at ``(col + 0.5, row + 0.5)``.
Under that convention the image centre is ``(W / 2, H / 2)`` and a horizontal
flip maps ``x -> W - x``.

Images are ``H x W x C`` float arrays in [0, 1] with ``C`` in {1, 3}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .codecs import decode_image, encode_image  # noqa: F401  (re-exported)
from .rng import Rng

_SINGULAR_DET = 1e-9


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"expected H x W x {{1,3}} image, got shape {image.shape}")
    return image


# ------------------------------------------------------------------ sampling


def bilinear_sample(image: np.ndarray, sx: np.ndarray, sy: np.ndarray,
                    fill: float | None = 0.0) -> np.ndarray:
    """Sample ``image`` at continuous index coordinates (pixel ``i`` sits at ``i``).

    Neighbours outside the image contribute ``fill``; ``fill=None`` clamps
    coordinates to the border instead.
    """
    h, w, c = image.shape
    if fill is None:
        sx = np.clip(sx, 0, w - 1)
        sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    out = np.zeros(sx.shape + (c,), dtype=np.result_type(image.dtype, np.float32))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            vals = image[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            if fill is not None:
                inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                vals = np.where(inside[..., None], vals, fill)
            out += wy * wx * vals
    return out


def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (align-corners false), edge clamped."""
    image = check_image(image)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w, _ = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    gx, gy = np.meshgrid(sx, sy)
    return bilinear_sample(image, gx, gy, fill=None).astype(image.dtype, copy=False)


# ------------------------------------------------------------------- affine


class AffineTransform:
    """Forward map on points, ``p' = M @ [x, y, 1]``, with ``M`` a 2x3 matrix."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape == (3, 3):
            m = m[:2]
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        self.matrix = m

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3)[:2])

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls([[1.0, 0.0, tx], [0.0, 1.0, ty]])

    @classmethod
    def rotation(cls, degrees: float, center=(0.0, 0.0)) -> "AffineTransform":
        """Rotation about ``center``; positive angles turn clockwise on screen (y down)."""
        t = math.radians(degrees)
        c, s = math.cos(t), math.sin(t)
        rot = cls([[c, -s, 0.0], [s, c, 0.0]])
        return _about(rot, center)

    @classmethod
    def scaling(cls, factor: float, center=(0.0, 0.0)) -> "AffineTransform":
        return _about(cls([[factor, 0.0, 0.0], [0.0, factor, 0.0]]), center)

    @classmethod
    def hflip(cls, width: float) -> "AffineTransform":
        return cls([[-1.0, 0.0, width], [0.0, 1.0, 0.0]])

    def as3x3(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """``self`` applied after ``other``."""
        return AffineTransform(self.as3x3() @ other.as3x3())

    def inverse(self) -> "AffineTransform":
        if abs(self.det) <= _SINGULAR_DET:
            raise np.linalg.LinAlgError(f"singular affine transform (det={self.det:g})")
        a = self.matrix[:, :2]
        inv = np.linalg.inv(a)
        return AffineTransform(np.hstack([inv, -inv @ self.matrix[:, 2:]]))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def __repr__(self):
        return f"AffineTransform({self.matrix.tolist()})"


def _about(transform: AffineTransform, center) -> AffineTransform:
    cx, cy = center
    return (AffineTransform.translation(cx, cy)
            .compose(transform)
            .compose(AffineTransform.translation(-cx, -cy)))


def transform_point(transform: AffineTransform, point) -> np.ndarray:
    return transform.apply(point)


@dataclass(frozen=True)
class SpatialAugConfig:
    """Uniform ranges: scale ``1 +- scale``, rotation ``+-rotation`` degrees,
    translation ``+-translate`` as a fraction of each axis, drawn independently."""

    scale: float = 0.35
    rotation: float = 45.0
    translate: float = 0.10
    flip_prob: float = 0.0


def sample_spatial_augmentation(rng: Rng, config: SpatialAugConfig,
                                width: float, height: float) -> AffineTransform:
    """Draw ``T(t) R(theta) S(s)`` about the image centre.

    Draw order is scale, rotation, x-translation, y-translation, so a given
    seed always produces the same transform.
    """
    s = 1.0 + rng.uniform(-config.scale, config.scale)
    theta = rng.uniform(-config.rotation, config.rotation)
    tx = rng.uniform(-config.translate, config.translate) * width
    ty = rng.uniform(-config.translate, config.translate) * height
    # closed form of translation(t) . rotation(theta, c) . scaling(s, c)
    t = math.radians(theta)
    a = s * np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    c = np.array([width / 2.0, height / 2.0])
    return AffineTransform(np.hstack([a, (c - a @ c + (tx, ty))[:, None]]))


def warp_image(image: np.ndarray, transform: AffineTransform,
               out_h: int, out_w: int) -> np.ndarray:
    """Inverse-mapping bilinear warp; samples from outside the source are 0."""
    image = check_image(image)
    inv = transform.inverse()
    xs = np.arange(out_w) + 0.5
    ys = np.arange(out_h) + 0.5
    m = inv.matrix
    sx = m[0, 0] * xs[None, :] + m[0, 1] * ys[:, None] + m[0, 2] - 0.5
    sy = m[1, 0] * xs[None, :] + m[1, 1] * ys[:, None] + m[1, 2] - 0.5
    return bilinear_sample(image, sx, sy, fill=0.0).astype(image.dtype, copy=False)


# -------------------------------------------------------------------- colour


@dataclass(frozen=True)
class ColorAugParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0  # degrees
    grayscale: bool = False
    blur_sigma: float = 0.0
    solarize: float | None = None  # threshold in [0, 1]

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} factor must be > 0, got {getattr(self, name)}")
        if not -180.0 <= self.hue <= 180.0:
            raise ValueError(f"hue shift must lie in [-180, 180], got {self.hue}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur sigma must be >= 0, got {self.blur_sigma}")
        if self.solarize is not None and not 0.0 <= self.solarize <= 1.0:
            raise ValueError(f"solarize threshold must lie in [0, 1], got {self.solarize}")


@dataclass(frozen=True)
class ColorAugConfig:
    """Sampling distribution for :class:`ColorAugParams`."""

    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 18.0
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5

    @classmethod
    def off(cls) -> "ColorAugConfig":
        return cls(jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0, solarize_prob=0.0)


def sample_color_params(rng: Rng, config: ColorAugConfig) -> ColorAugParams:
    kw = {}
    if rng.bernoulli(config.jitter_prob):
        kw["brightness"] = rng.uniform(1 - config.brightness, 1 + config.brightness)
        kw["contrast"] = rng.uniform(1 - config.contrast, 1 + config.contrast)
        kw["saturation"] = rng.uniform(1 - config.saturation, 1 + config.saturation)
        kw["hue"] = rng.uniform(-config.hue, config.hue)
    kw["grayscale"] = rng.bernoulli(config.grayscale_prob)
    if rng.bernoulli(config.blur_prob):
        kw["blur_sigma"] = rng.uniform(*config.blur_sigma)
    if rng.bernoulli(config.solarize_prob):
        kw["solarize"] = config.solarize_threshold
    return ColorAugParams(**kw)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """RGB in [0,1] to HSV with hue in [0, 1)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    if image.shape[2] == 1:
        return image.copy()
    if np.array_equal(image[..., 0], image[..., 1]) and np.array_equal(image[..., 1], image[..., 2]):
        return image.copy()
    luma = image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114
    return np.repeat(luma[..., None], 3, axis=2)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3 sigma), edge-replicated borders."""
    if sigma <= 0:
        return image.copy()
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = correlate1d(image, kernel, axis=0, mode="nearest")
    return correlate1d(out, kernel, axis=1, mode="nearest")


def color_augment(image: np.ndarray, params: ColorAugParams) -> np.ndarray:
    """Brightness, contrast, saturation, hue, grayscale, blur, solarize, in that order.

    The result is clamped to [0, 1] after every step.
    """
    image = check_image(image)
    out = image.astype(np.float64, copy=True)
    rgb = out.shape[2] == 3
    if params.brightness != 1.0:
        out = np.clip(out * params.brightness, 0.0, 1.0)
    if params.contrast != 1.0:
        mean = to_grayscale(out)[..., 0].mean()
        out = np.clip(params.contrast * out + (1.0 - params.contrast) * mean, 0.0, 1.0)
    if rgb and (params.saturation != 1.0 or params.hue != 0.0):
        hsv = rgb_to_hsv(out)
        hsv[..., 1] = np.clip(hsv[..., 1] * params.saturation, 0.0, 1.0)
        hsv[..., 0] = (hsv[..., 0] + params.hue / 360.0) % 1.0
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    if params.grayscale:
        out = to_grayscale(out)
    if params.blur_sigma > 0:
        out = np.clip(gaussian_blur(out, params.blur_sigma), 0.0, 1.0)
    if params.solarize is not None:
        out = np.where(out >= params.solarize, 1.0 - out, out)
    return out.astype(image.dtype, copy=False)


def hflip_image(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()
