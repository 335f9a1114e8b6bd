"""Clip ingestion from a frames/ + masks/ directory tree.

Layout: frames/<seq>/NNNNN.ppm and masks/<seq>/NNNNN.pgm, where a mask pixel
value k in 1..N is the object id and 0 is background. Only the first frame's
mask is required; later masks, when present, are kept as ground truth.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .imageio import read_pgm, read_ppm


@dataclass
class Clip:
    name: str
    frames: list  # 3xHxW float arrays
    first_masks: np.ndarray  # NxHxW binary float
    gt_masks: dict = field(default_factory=dict)  # frame index -> NxHxW binary float

    @property
    def num_objects(self) -> int:
        return self.first_masks.shape[0]


def _id_map_to_channels(id_map: np.ndarray, n_objects: int) -> np.ndarray:
    return np.stack([(id_map == k + 1).astype(np.float64) for k in range(n_objects)])


def ingest_davis_dir(path) -> list:
    """Read every sequence under `path`; returns [] for an empty tree."""
    root = os.fspath(path)
    if not os.path.isdir(root):
        raise ConfigError(f"clip directory {root!r} does not exist")
    frames_root = os.path.join(root, "frames")
    masks_root = os.path.join(root, "masks")
    if not os.path.isdir(frames_root):
        return []
    clips = []
    for seq in sorted(os.listdir(frames_root)):
        seq_dir = os.path.join(frames_root, seq)
        if not os.path.isdir(seq_dir):
            continue
        frame_files = sorted(f for f in os.listdir(seq_dir) if f.endswith(".ppm"))
        if not frame_files:
            continue
        frames = [read_ppm(os.path.join(seq_dir, f)) for f in frame_files]
        size = frames[0].shape
        for t, fr in enumerate(frames):
            if fr.shape != size:
                raise ConfigError(f"sequence {seq!r}: frame {t} resolution {fr.shape} != {size}")
        mask_dir = os.path.join(masks_root, seq)
        first_name = frame_files[0][: -len(".ppm")] + ".pgm"
        first_path = os.path.join(mask_dir, first_name)
        if not os.path.isfile(first_path):
            raise ConfigError(f"sequence {seq!r}: missing first-frame mask {first_name}")
        first_ids = read_pgm(first_path)
        if first_ids.shape != size[1:]:
            raise ConfigError(f"sequence {seq!r}: mask resolution {first_ids.shape} != frame {size[1:]}")
        n_objects = int(first_ids.max())
        if n_objects < 1:
            raise ConfigError(f"sequence {seq!r}: first-frame mask has no objects")
        gt = {}
        for t, f in enumerate(frame_files):
            p = os.path.join(mask_dir, f[: -len(".ppm")] + ".pgm")
            if os.path.isfile(p):
                ids = read_pgm(p)
                if ids.shape != size[1:]:
                    raise ConfigError(f"sequence {seq!r}: mask resolution {ids.shape} != frame {size[1:]}")
                gt[t] = _id_map_to_channels(ids, n_objects)
        clips.append(
            Clip(name=seq, frames=frames, first_masks=_id_map_to_channels(first_ids, n_objects), gt_masks=gt)
        )
    return clips


def write_clip(out_dir, name: str, frames, masks_per_frame) -> None:
    """Write one clip in the ingestible layout (PPM frames + PGM id masks)."""
    from .imageio import write_pgm, write_ppm

    frames_dir = os.path.join(os.fspath(out_dir), "frames", name)
    masks_dir = os.path.join(os.fspath(out_dir), "masks", name)
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    for t, image in enumerate(frames):
        write_ppm(os.path.join(frames_dir, f"{t:05d}.ppm"), image)
        masks = masks_per_frame[t]
        if masks is None:
            continue
        id_map = np.zeros(masks.shape[1:], dtype=np.uint8)
        for k in range(masks.shape[0]):
            id_map[masks[k] > 0.5] = k + 1
        write_pgm(os.path.join(masks_dir, f"{t:05d}.pgm"), id_map)
