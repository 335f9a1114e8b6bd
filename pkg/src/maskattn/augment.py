"""Affine and color augmentation, and fake video clips from single scenes.

Every frame of a fake sequence is warped from the ORIGINAL image with an
independently sampled transform (no chaining). All of this is data-side
numpy; nothing here records gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .synthetic import SyntheticScene


@dataclass(frozen=True)
class AugmentationRanges:
    """Sampling bounds; directional fields are sampled sign-symmetrically."""

    translation: float = 0.25  # fraction of the dimension size
    rotation: float = 10.0  # degrees, both directions
    shear: float = 10.0  # degrees, both axes
    crop_min: float = 0.60  # fraction of the image retained
    crop_max: float = 0.90
    hue: float = 0.12  # fraction of the hue circle
    saturation: float = 0.12
    contrast: float = 0.05  # linear, about the mean
    brightness: float = 0.25

    def __post_init__(self):
        checks = [
            (0.0 <= self.translation <= 0.25, "translation in [0, 0.25]"),
            (0.0 <= self.rotation <= 10.0, "rotation in [0, 10] degrees"),
            (0.0 <= self.shear <= 10.0, "shear in [0, 10] degrees"),
            (0.5 <= self.crop_min <= self.crop_max <= 1.0, "crop bounds in [0.5, 1.0], min <= max"),
            (0.0 <= self.hue <= 0.12, "hue in [0, 0.12]"),
            (0.0 <= self.saturation <= 0.12, "saturation in [0, 0.12]"),
            (0.0 <= self.contrast <= 0.05, "contrast in [0, 0.05]"),
            (0.0 <= self.brightness <= 0.25, "brightness in [0, 0.25]"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"augmentation range out of bounds: expected {what}")

    @classmethod
    def zero(cls) -> "AugmentationRanges":
        """Identity augmentation (full crop retained, no jitter)."""
        return cls(0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AffineParams:
    tx: float  # pixels
    ty: float
    rotation_deg: float
    shear_x_deg: float
    shear_y_deg: float
    crop_keep: float
    crop_ox: float  # crop window origin, pixels
    crop_oy: float


def sample_affine(ranges: AugmentationRanges, rng: np.random.Generator, height: int, width: int) -> AffineParams:
    keep = float(rng.uniform(ranges.crop_min, ranges.crop_max))
    return AffineParams(
        tx=float(rng.uniform(-ranges.translation, ranges.translation) * width),
        ty=float(rng.uniform(-ranges.translation, ranges.translation) * height),
        rotation_deg=float(rng.uniform(-ranges.rotation, ranges.rotation)),
        shear_x_deg=float(rng.uniform(-ranges.shear, ranges.shear)),
        shear_y_deg=float(rng.uniform(-ranges.shear, ranges.shear)),
        crop_keep=keep,
        crop_ox=float(rng.uniform(0.0, (1.0 - keep) * width)),
        crop_oy=float(rng.uniform(0.0, (1.0 - keep) * height)),
    )


def _forward_matrix(params: AffineParams, height: int, width: int) -> np.ndarray:
    """Homogeneous 3x3 matrix mapping input (x, y) to output coordinates.

    Rotation and shear act about the image center, then translation, then the
    crop window (origin o, scale keep) is stretched back to full size.
    """
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    th = math.radians(params.rotation_deg)
    shx = math.tan(math.radians(params.shear_x_deg))
    shy = math.tan(math.radians(params.shear_y_deg))
    rot = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]])
    shear = np.array([[1, shx, 0], [shy, 1, 0], [0, 0, 1]])
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    from_center = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    translate = np.array([[1, 0, params.tx], [0, 1, params.ty], [0, 0, 1]])
    s = params.crop_keep
    crop = np.array([[1 / s, 0, -params.crop_ox / s], [0, 1 / s, -params.crop_oy / s], [0, 0, 1]])
    return crop @ translate @ from_center @ rot @ shear @ to_center


def _bilinear_gather(channels: np.ndarray, src_x: np.ndarray, src_y: np.ndarray) -> np.ndarray:
    """Sample channels at fractional coords; zero fill outside the image."""
    _, h, w = channels.shape
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx = src_x - x0
    fy = src_y - y0
    out = np.zeros((channels.shape[0],) + src_x.shape)
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yi, xi = y0 + dy, x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc, xc = np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)
        out += channels[:, yc, xc] * (wgt * valid)[None]
    return out


def apply_affine(image: np.ndarray, masks: np.ndarray, params: AffineParams):
    """Warp image and masks with the same transform; masks re-clipped to [0,1]."""
    _, h, w = image.shape
    inv = np.linalg.inv(_forward_matrix(params, h, w))
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    warped_image = _bilinear_gather(image, src_x, src_y)
    warped_masks = np.clip(_bilinear_gather(masks, src_x, src_y), 0.0, 1.0)
    return warped_image, warped_masks


def _rgb_to_hsv(img: np.ndarray):
    r, g, b = img
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    h = np.zeros_like(maxc)
    h = np.where((maxc == r) & (delta > 0), ((g - b) / safe) % 6.0, h)
    h = np.where((maxc == g) & (delta > 0), (b - r) / safe + 2.0, h)
    h = np.where((maxc == b) & (delta > 0), (r - g) / safe + 4.0, h)
    h = h / 6.0
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return h, s, maxc


def _hsv_to_rgb_arrays(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def apply_color(image: np.ndarray, ranges: AugmentationRanges, rng: np.random.Generator) -> np.ndarray:
    """Hue rotation, saturation/brightness scaling, linear contrast; clipped.

    Exactly-zero draws skip their stage entirely, so identity configurations
    return the input bit-for-bit.
    """
    dh = rng.uniform(-ranges.hue, ranges.hue)
    ds = rng.uniform(-ranges.saturation, ranges.saturation)
    db = rng.uniform(-ranges.brightness, ranges.brightness)
    dc = rng.uniform(-ranges.contrast, ranges.contrast)
    out = image
    if dh != 0.0 or ds != 0.0 or db != 0.0:
        h, s, v = _rgb_to_hsv(out)
        h = (h + dh) % 1.0
        s = np.clip(s * (1.0 + ds), 0.0, 1.0)
        v = np.clip(v * (1.0 + db), 0.0, 1.0)
        out = _hsv_to_rgb_arrays(h, s, v)
    if dc != 0.0:
        mean = out.mean()
        out = mean + (1.0 + dc) * (out - mean)
    return np.clip(out, 0.0, 1.0)


@dataclass
class ClipFrame:
    image: np.ndarray  # 3xHxW float
    masks: np.ndarray  # NxHxW float in [0,1]


def make_fake_sequence(
    scene: SyntheticScene,
    length: int,
    ranges: AugmentationRanges,
    rng: np.random.Generator,
) -> list:
    """Frame 1 is the original scene; frames 2..T are independent warps of it."""
    if length < 1:
        raise UsageError(f"sequence length must be >= 1, got {length}")
    frames = [ClipFrame(scene.image.copy(), scene.object_masks.astype(np.float64).copy())]
    _, h, w = scene.image.shape
    for _ in range(1, length):
        params = sample_affine(ranges, rng, h, w)
        img, masks = apply_affine(scene.image, scene.object_masks.astype(np.float64), params)
        img = apply_color(img, ranges, rng)
        frames.append(ClipFrame(img, masks))
    return frames
