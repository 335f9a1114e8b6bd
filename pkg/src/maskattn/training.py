"""Training configuration, the two training regimes, and evaluation helpers.

Regime fake_sequence supervises every propagated frame of a warped clip
against its warped ground truth; regime cyclic supervises only the frame-1
prediction returned by the forward/backward propagation cycle. One clip per
iteration; all randomness is derived from (seed, iteration).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .augment import AugmentationRanges, ClipFrame, make_fake_sequence
from .analysis import MetricsReport, j_and_f
from .checkpoint import save_checkpoint
from .errors import ConfigError, NumericError
from .losses import build_gt_channels, total_loss
from .model import DescriptorSegmenter, ModelConfig
from .optim import Adam, lr_at
from .propagation import cyclic_pass, propagate_clip
from .rng import derive_rng
from .synthetic import generate_scene
from .tensor import Tensor, backward, no_grad, record

REGIMES = ("fake_sequence", "cyclic")

METRICS_HEADER = ("iter", "lr", "loss", "ce", "dice", "grad_norm")


@dataclass(frozen=True)
class TrainConfig:
    # run control
    iterations: int = 2000
    warmup_iters: int = 200
    peak_lr: float = 1e-4
    decay_iter: int = 1500
    decayed_lr: float = 1e-5
    clip_length: int = 3
    history: int = 7
    seed: int = 0
    regime: str = "fake_sequence"
    catch_all: bool = True
    attention_mode: str = "soft"
    detach_masks: bool = False
    checkpoint_every: int = 0
    # model
    model_dim: int = 64
    num_heads: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    bg_grid: int = 3
    height: int = 64
    width: int = 64
    # data
    n_objects: int = 2
    # augmentation bounds
    aug_translation: float = 0.25
    aug_rotation: float = 10.0
    aug_shear: float = 10.0
    aug_crop_min: float = 0.60
    aug_crop_max: float = 0.90
    aug_hue: float = 0.12
    aug_saturation: float = 0.12
    aug_contrast: float = 0.05
    aug_brightness: float = 0.25

    def __post_init__(self):
        if not 0 <= self.warmup_iters <= self.decay_iter <= self.iterations:
            raise ConfigError(
                "need warmup_iters <= decay_iter <= iterations "
                f"(got {self.warmup_iters}, {self.decay_iter}, {self.iterations})"
            )
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.regime == "cyclic" and self.clip_length < 2:
            raise ConfigError("cyclic regime needs clip_length >= 2")
        if self.clip_length < 1 or self.history < 1:
            raise ConfigError("clip_length and history must be >= 1")
        self.ranges()  # validates augmentation bounds
        self.model_config()  # validates model fields

    def ranges(self) -> AugmentationRanges:
        return AugmentationRanges(
            translation=self.aug_translation,
            rotation=self.aug_rotation,
            shear=self.aug_shear,
            crop_min=self.aug_crop_min,
            crop_max=self.aug_crop_max,
            hue=self.aug_hue,
            saturation=self.aug_saturation,
            contrast=self.aug_contrast,
            brightness=self.aug_brightness,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            model_dim=self.model_dim,
            num_heads=self.num_heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            bg_grid=self.bg_grid,
            input_size=(self.height, self.width),
            attention_mode=self.attention_mode,
            use_catch_all=self.catch_all,
        )


_BOOL_WORDS = {"true": True, "on": True, "1": True, "false": False, "off": False, "0": False}


def parse_train_config(text: str, overrides: dict | None = None) -> TrainConfig:
    """Parse key=value lines ('#' comments); unknown keys are rejected."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kv: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        kv[key] = value
    if overrides:
        kv.update({k: str(v) for k, v in overrides.items() if v is not None})
    coerced: dict = {}
    defaults = TrainConfig.__dataclass_fields__
    for key, value in kv.items():
        kind = type(defaults[key].default)
        if kind is bool:
            if value.lower() not in _BOOL_WORDS:
                raise ConfigError(f"config key {key!r}: expected on/off, got {value!r}")
            coerced[key] = _BOOL_WORDS[value.lower()]
        elif kind is int:
            coerced[key] = int(value)
        elif kind is float:
            coerced[key] = float(value)
        else:
            coerced[key] = value
    return TrainConfig(**coerced)


def format_train_config(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "on" if value else "off"
        elif isinstance(value, float):
            value = f"{value:.17g}"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


# -- data ------------------------------------------------------------------------


def _training_clip(config: TrainConfig, iteration: int, data_source=None) -> list:
    """One clip of ClipFrames for this iteration, seeded by (seed, iteration)."""
    rng = derive_rng(config.seed, f"train/{iteration}")
    if data_source:
        clip = data_source[iteration % len(data_source)]
        if config.regime == "cyclic" and len(clip.frames) >= config.clip_length:
            frames = [
                ClipFrame(clip.frames[t], clip.gt_masks.get(t, clip.first_masks if t == 0 else None))
                for t in range(config.clip_length)
            ]
            frames[0] = ClipFrame(clip.frames[0], clip.first_masks)
            return frames
        scene_image, scene_masks = clip.frames[0], clip.first_masks
        from .synthetic import SyntheticScene

        scene = SyntheticScene(image=scene_image, object_masks=scene_masks)
        return make_fake_sequence(scene, config.clip_length, config.ranges(), rng)
    scene = generate_scene(rng, config.height, config.width, config.n_objects)
    return make_fake_sequence(scene, config.clip_length, config.ranges(), rng)


def _gt_channels_for(config: TrainConfig, masks: np.ndarray) -> Tensor:
    binary = (np.asarray(masks) > 0.5).astype(np.float64)
    return build_gt_channels(binary, config.bg_grid, config.catch_all)


# -- the loop ---------------------------------------------------------------------


def _clip_loss(model: DescriptorSegmenter, clip, config: TrainConfig):
    frames = [Tensor(f.image) for f in clip]
    first = Tensor(clip[0].masks)
    if config.regime == "fake_sequence":
        result = propagate_clip(model, frames, first, config.history, config.detach_masks)
        total = None
        ce_total = None
        dice_total = None
        count = 0
        for t in range(1, len(clip)):
            gt = _gt_channels_for(config, clip[t].masks)
            loss, ce, dice = total_loss(result.mask_sets[t], gt)
            total = loss if total is None else total + loss
            ce_total = ce if ce_total is None else ce_total + ce
            dice_total = dice if dice_total is None else dice_total + dice
            count += 1
        if total is None:
            raise ConfigError("fake_sequence regime needs clip_length >= 2 for supervision")
        return total * (1.0 / count), ce_total * (1.0 / count), dice_total * (1.0 / count)
    pred_first, _ = cyclic_pass(model, frames, first, config.history, config.detach_masks)
    gt = _gt_channels_for(config, clip[0].masks)
    loss, ce, dice = total_loss(pred_first, gt)
    return loss, ce, dice


def train(config: TrainConfig, out_dir=None, data_source=None):
    """Run the configured regime; returns (model, metrics rows).

    With out_dir set, writes metrics.csv, the final checkpoint model.ckpt,
    periodic checkpoints, and a resolved copy of the config.
    """
    model = DescriptorSegmenter(config.model_config(), seed=config.seed)
    opt = Adam(model.parameters())
    rows = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
            fh.write(format_train_config(config))
    for it in range(config.iterations):
        clip = _training_clip(config, it, data_source)
        lr = lr_at(it, config.warmup_iters, config.peak_lr, config.decay_iter, config.decayed_lr)
        with record():
            loss, ce, dice = _clip_loss(model, clip, config)
            loss_val = float(loss.data)
            ce_val, dice_val = float(ce.data), float(dice.data)
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss at iteration {it} (data seed label 'train/{it}', "
                    f"seed {config.seed}): loss={loss_val!r} ce={ce_val!r} dice={dice_val!r}"
                )
            backward(loss)
        gnorm = opt.grad_norm()
        opt.step(lr)
        opt.zero_grad()
        rows.append((it, lr, loss_val, ce_val, dice_val, gnorm))
        if out_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"model_{it + 1:06d}.ckpt"), model)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), model)
        _write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    return model, rows


def _write_metrics_csv(path, rows) -> None:
    from .analysis import export_csv

    export_csv(path, METRICS_HEADER, rows)


# -- evaluation ---------------------------------------------------------------------


def eval_clips(config: TrainConfig, n_clips: int, label: str = "eval") -> list:
    """Held-out fake-sequence clips drawn from the same generator as training."""
    clips = []
    for i in range(n_clips):
        rng = derive_rng(config.seed, f"{label}/{i}")
        scene = generate_scene(rng, config.height, config.width, config.n_objects)
        clips.append(make_fake_sequence(scene, config.clip_length, config.ranges(), rng))
    return clips


def predict_clip(model: DescriptorSegmenter, clip, window: int) -> list:
    """Binary object masks per frame (threshold 0.5), frame 0 = the given masks."""
    frames = [Tensor(f.image) for f in clip]
    first = Tensor(clip[0].masks)
    with no_grad():
        result = propagate_clip(model, frames, first, window)
    preds = [np.asarray(clip[0].masks) > 0.5]
    for ms in result.mask_sets[1:]:
        preds.append(ms.object_channels().data > 0.5)
    return preds


def evaluate_model(model: DescriptorSegmenter, clips, window: int) -> MetricsReport:
    """Mean J and boundary F over all clips (first frames excluded).

    Clips may have different object counts; rows are stacked when counts
    match and flattened to one score per (frame, object) sample otherwise.
    """
    all_j, all_f = [], []
    for clip in clips:
        preds = predict_clip(model, clip, window)
        gts = [np.asarray(f.masks) > 0.5 for f in clip]
        report = j_and_f(preds, gts)
        all_j.append(report.per_frame_j)
        all_f.append(report.per_frame_f)
    counts = {a.shape[1] for a in all_j}
    if len(counts) == 1:
        stacked_j, stacked_f = np.concatenate(all_j), np.concatenate(all_f)
    else:
        stacked_j = np.concatenate([a.reshape(-1) for a in all_j]).reshape(-1, 1)
        stacked_f = np.concatenate([a.reshape(-1) for a in all_f]).reshape(-1, 1)
    return MetricsReport(
        per_frame_j=stacked_j,
        per_frame_f=stacked_f,
        mean_j=float(stacked_j.mean()),
        mean_f=float(stacked_f.mean()),
    )
