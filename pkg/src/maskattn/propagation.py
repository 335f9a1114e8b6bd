"""Sequential mask propagation over a clip and the cyclic-consistency pass.

Cross-frame state is a FIFO of descriptor sets only; no feature maps are
retained. Predicted soft masks are re-encoded directly (no thresholding), so
the whole chain stays differentiable when recorded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError, UsageError
from .model import DescriptorSegmenter, DescriptorSet, MaskSet, initial_mask_channels
from .tensor import Tensor, concat, no_grad


class TemporalHistory:
    """Bounded FIFO of the last `capacity` frames' descriptor sets."""

    def __init__(self, capacity: int = 7):
        if capacity < 1:
            raise UsageError("history capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[DescriptorSet] = []

    def push(self, entry: DescriptorSet) -> None:
        self.entries.append(entry)
        if len(self.entries) > self.capacity:
            del self.entries[0]

    def __len__(self) -> int:
        return len(self.entries)

    def state_bytes(self) -> bytes:
        return b"".join(e.state_bytes() for e in self.entries)

    def bytes_per_frame(self) -> int:
        if not self.entries:
            return 0
        return len(self.entries[0].state_bytes())


@dataclass
class ClipResult:
    """Per-frame outputs of one propagation run (index 0 = the given frame)."""

    mask_sets: list
    descriptor_sets: list
    frame_seconds: list
    # reverse-leg predictions of a cyclic pass; empty for a plain forward run
    reverse_mask_sets: list = field(default_factory=list)
    reverse_descriptor_sets: list = field(default_factory=list)


def _first_frame_mask_set(model: DescriptorSegmenter, mask_channels: Tensor, n_obj: int) -> MaskSet:
    cfg = model.config
    channels = mask_channels
    if cfg.use_catch_all:
        zero = Tensor(np.zeros((1,) + mask_channels.data.shape[1:]))
        channels = concat([mask_channels, zero], axis=0)
    return MaskSet(channels=channels, num_objects=n_obj, bg_grid=cfg.bg_grid, has_catch_all=cfg.use_catch_all)


def _check_clip(frames: Sequence[Tensor], first_masks: Tensor) -> None:
    if not frames:
        raise UsageError("clip must contain at least one frame")
    if first_masks.data.ndim != 3:
        raise ShapeError(f"first masks must be NxHxW, got {first_masks.data.shape}")
    fh, fw = frames[0].data.shape[1:]
    if first_masks.data.shape[1:] != (fh, fw):
        raise ShapeError(
            f"first masks {first_masks.data.shape[1:]} do not match frame size {(fh, fw)}"
        )
    for t, fr in enumerate(frames):
        if fr.data.shape != frames[0].data.shape:
            raise ContractError(f"frame {t} shape {fr.data.shape} differs from frame 0")
    lo, hi = first_masks.data.min(), first_masks.data.max()
    if lo < -1e-9 or hi > 1 + 1e-9:
        raise ContractError(f"first masks out of [0,1]: min={lo!r}, max={hi!r}")


def propagate_clip(
    model: DescriptorSegmenter,
    frames: Sequence[Tensor],
    first_masks: Tensor,
    window: int = 7,
    detach_masks: bool = False,
) -> ClipResult:
    """Encode frame 1 from ground truth, then decode/re-encode frames 2..T.

    With `detach_masks` the predicted masks are cut from the graph before
    re-encoding (the stop-gradient ablation); otherwise gradients flow through
    every intermediate soft mask.
    """
    _check_clip(frames, first_masks)
    cfg = model.config
    n_obj = first_masks.data.shape[0]
    history = TemporalHistory(window)

    t0 = time.perf_counter()
    feats = model.extract_features(frames[0])
    chans = initial_mask_channels(first_masks, cfg.bg_grid)
    ds = model.encode(feats, chans, frame_index=0)
    history.push(ds)
    mask_sets = [_first_frame_mask_set(model, chans, n_obj)]
    descriptor_sets = [ds]
    seconds = [time.perf_counter() - t0]

    for t in range(1, len(frames)):
        t0 = time.perf_counter()
        feats = model.extract_features(frames[t])
        pred = model.decode(feats, history.entries)
        carried = pred.propagated_channels()
        if detach_masks:
            carried = carried.detach()
        ds = model.encode(feats, carried, frame_index=t)
        history.push(ds)
        mask_sets.append(pred)
        descriptor_sets.append(ds)
        seconds.append(time.perf_counter() - t0)
    return ClipResult(mask_sets, descriptor_sets, seconds)


def cyclic_pass(
    model: DescriptorSegmenter,
    frames: Sequence[Tensor],
    first_masks: Tensor,
    window: int = 7,
    detach_masks: bool = False,
):
    """Propagate 1..T, then back T..1 from a fresh history seeded at frame T.

    Returns the final frame-1 prediction (the only supervised output) and the
    intermediate results; the reverse-leg predictions are stored on the
    result's reverse_* fields.
    """
    if len(frames) < 2:
        raise UsageError(f"cyclic pass needs at least 2 frames, got {len(frames)}")
    forward = propagate_clip(model, frames, first_masks, window, detach_masks)

    history = TemporalHistory(window)
    history.push(forward.descriptor_sets[-1])
    reverse_masks: list = []
    reverse_descs: list = []
    pred_first = None
    for t in range(len(frames) - 2, -1, -1):
        feats = model.extract_features(frames[t])
        pred = model.decode(feats, history.entries)
        reverse_masks.append(pred)
        if t == 0:
            pred_first = pred
            break
        carried = pred.propagated_channels()
        if detach_masks:
            carried = carried.detach()
        ds = model.encode(feats, carried, frame_index=t)
        history.push(ds)
        reverse_descs.append(ds)
    forward.reverse_mask_sets = reverse_masks
    forward.reverse_descriptor_sets = reverse_descs
    return pred_first, forward


def throughput_probe(
    model: DescriptorSegmenter,
    frames: Sequence[Tensor],
    first_masks: Tensor,
    window_list: Sequence[int],
    runs: int = 5,
) -> list:
    """Median frames/s and history byte counts for each history length.

    Rows are dicts with keys window, fps, bytes_per_frame; timing is the
    median over `runs` full-clip propagations in no-gradient mode.
    """
    rows = []
    with no_grad():
        propagate_clip(model, frames, first_masks, max(window_list))  # warm-up
        for w in window_list:
            times = []
            bytes_per_frame = 0
            for _ in range(runs):
                t0 = time.perf_counter()
                result = propagate_clip(model, frames, first_masks, w)
                times.append(time.perf_counter() - t0)
                bytes_per_frame = len(result.descriptor_sets[0].state_bytes())
            med = float(np.median(times))
            rows.append(
                {"window": w, "fps": len(frames) / med, "bytes_per_frame": bytes_per_frame}
            )
    return rows
