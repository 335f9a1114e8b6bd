"""Synthetic scene generation: colored shapes on a textured background."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

MIN_OBJECT_PIXELS = 16
PLACEMENT_RETRIES = 100


@dataclass
class SyntheticScene:
    image: np.ndarray  # 3xHxW float in [0,1]
    object_masks: np.ndarray  # NxHxW binary float
    seed_note: str = ""
    notes: tuple = field(default_factory=tuple)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base_h = rng.uniform(0.0, 1.0)
    base = np.array(_hsv_to_rgb(base_h, rng.uniform(0.1, 0.3), rng.uniform(0.35, 0.7)))
    img = np.tile(base[:, None, None], (1, h, w))
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.05 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img += wave[None] * rng.uniform(0.3, 1.0, (3, 1, 1))
    img += rng.uniform(-0.02, 0.02, (3, h, w))
    return np.clip(img, 0.0, 1.0)


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # shapes are kept away from the borders so that full-range affine warps
    # usually leave them (partly) visible
    kind = rng.choice(["rectangle", "disk", "triangle"])
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    margin = max(h // 8, 2)
    lo_extent = max(h // 4, 6)
    hi_extent = max(3 * h // 8, lo_extent + 2)
    if kind == "rectangle":
        dh = int(rng.integers(lo_extent, hi_extent))
        dw = int(rng.integers(lo_extent, hi_extent))
        top = int(rng.integers(margin, max(h - dh - margin, margin + 1)))
        left = int(rng.integers(margin, max(w - dw - margin, margin + 1)))
        mask = np.zeros((h, w))
        mask[top : top + dh, left : left + dw] = 1.0
    elif kind == "disk":
        r = int(rng.integers(max(lo_extent // 2, 4), max(hi_extent // 2, 6)))
        cy = int(rng.integers(r + margin, max(h - r - margin, r + margin + 1)))
        cx = int(rng.integers(r + margin, max(w - r - margin, r + margin + 1)))
        mask = (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(np.float64)
    else:
        pts = []
        cy, cx = rng.integers(h // 4, 3 * h // 4), rng.integers(w // 4, 3 * w // 4)
        for _ in range(3):
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(lo_extent * 0.7, hi_extent * 0.7)
            pts.append((cy + rad * np.sin(ang), cx + rad * np.cos(ang)))
        mask = np.ones((h, w))
        for (y1, x1), (y2, x2) in zip(pts, pts[1:] + pts[:1]):
            side = (xx - x1) * (y2 - y1) - (yy - y1) * (x2 - x1)
            mask *= side >= 0
        if mask.sum() < MIN_OBJECT_PIXELS:  # degenerate winding; flip orientation
            mask = np.ones((h, w))
            for (y1, x1), (y2, x2) in zip(pts, pts[1:] + pts[:1]):
                side = (xx - x1) * (y2 - y1) - (yy - y1) * (x2 - x1)
                mask *= side <= 0
    return mask


def generate_scene(rng: np.random.Generator, height: int, width: int, n_objects: int) -> SyntheticScene:
    """Place n disjoint colored shapes (>= 16 px each) on a textured background.

    If a shape cannot be placed in 100 tries the object count is reduced and a
    note recorded.
    """
    if n_objects < 1:
        raise ConfigError("need at least one object")
    image = _textured_background(rng, height, width)
    occupied = np.zeros((height, width), dtype=bool)
    border = np.ones((height, width), dtype=bool)
    my, mx = max(height // 8, 2), max(width // 8, 2)
    border[my : height - my, mx : width - mx] = False
    # placement floor grows with the canvas so objects stay resolvable at stride 8
    min_pixels = max(MIN_OBJECT_PIXELS, (height * width) // 50)
    masks, notes = [], []
    hue0 = rng.uniform(0.0, 1.0)
    for k in range(n_objects):
        placed = None
        for _ in range(PLACEMENT_RETRIES):
            cand = _shape_mask(rng, height, width)
            if (
                cand.sum() >= min_pixels
                and not (occupied & (cand > 0)).any()
                and not (border & (cand > 0)).any()
            ):
                placed = cand
                break
        if placed is None:
            notes.append(f"object {k} dropped after {PLACEMENT_RETRIES} placement retries")
            continue
        occupied |= placed > 0
        masks.append(placed)
        hue = (hue0 + k / max(n_objects, 1) + rng.uniform(-0.05, 0.05)) % 1.0
        color = np.array(_hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.7, 1.0)))
        shade = 1.0 + rng.uniform(-0.04, 0.04, (height, width))
        image = np.where(placed[None] > 0, np.clip(color[:, None, None] * shade[None], 0, 1), image)
    if not masks:
        raise ConfigError(f"could not place any object on a {height}x{width} canvas")
    return SyntheticScene(
        image=image,
        object_masks=np.stack(masks),
        notes=tuple(notes),
    )
