"""Encoder-decoder model: frames + masks -> descriptors -> re-segmented masks.

The encoder pools per-channel mask-weighted features into one descriptor per
object / background grid cell and refines them with mask-conditioned
cross-attention over pixel features. The decoder refines pixel features by
attending to descriptors, takes per-pixel dot products against them, appends
a convolutional catch-all background logit, and softmaxes over channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attention import AttentionConfig, AttentionLayer, default_alpha_init, multi_head_attention
from .errors import ConfigError, ContractError, ShapeError, UsageError
from .rng import derive_rng
from .tensor import Parameter, Tensor, concat, conv2d, layer_norm, matmul, softmax, upsample_bilinear

DESCRIPTOR_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 64
    num_heads: int = 8
    encoder_layers: int = 5
    decoder_layers: int = 2
    bg_grid: int = 3
    input_size: tuple = (64, 64)
    alpha_init: tuple = field(default=None)  # type: ignore[assignment]
    attention_mode: str = "soft"
    use_catch_all: bool = True

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        h, w = self.input_size
        if h % 8 or w % 8:
            raise ConfigError(f"input size {self.input_size} must be a multiple of 8")
        if h < 32 or w < 32:
            raise ConfigError(f"configured input size {self.input_size} must be at least 32x32")
        if self.bg_grid < 1:
            raise ConfigError("bg_grid must be >= 1")
        if self.encoder_layers < 0 or self.decoder_layers < 1:
            raise ConfigError("need encoder_layers >= 0 and decoder_layers >= 1")
        if self.attention_mode not in ("soft", "hard", "none"):
            raise ConfigError(f"unknown attention mode {self.attention_mode!r}")
        alphas = self.alpha_init if self.alpha_init is not None else default_alpha_init(self.num_heads)
        object.__setattr__(self, "alpha_init", tuple(float(a) for a in alphas))
        object.__setattr__(self, "input_size", (int(h), int(w)))

    @property
    def num_bg_cells(self) -> int:
        return self.bg_grid * self.bg_grid

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.num_heads, self.alpha_init)


def ablate_catch_all(config: ModelConfig) -> ModelConfig:
    """Config variant whose decoder omits the catch-all background channel."""
    return replace(config, use_catch_all=False)


@dataclass
class FeaturePyramid:
    """Stride-8 and stride-4 feature maps of one frame."""

    f8: Tensor
    f4: Tensor

    def __post_init__(self):
        c8, h8, w8 = self.f8.data.shape
        c4, h4, w4 = self.f4.data.shape
        if c8 != c4 or h4 != 2 * h8 or w4 != 2 * w8:
            raise ShapeError(f"inconsistent pyramid shapes {self.f8.data.shape} vs {self.f4.data.shape}")


@dataclass
class DescriptorSet:
    """Per-frame foreground and background-cell descriptors."""

    foreground: Tensor
    background: Tensor
    frame_index: int = 0

    def __post_init__(self):
        if self.foreground.data.ndim != 2 or self.background.data.ndim != 2:
            raise ShapeError("descriptors must be NxC matrices")
        if self.foreground.data.shape[1] != self.background.data.shape[1]:
            raise ShapeError("foreground/background descriptor widths disagree")
        if self.foreground.data.shape[0] < 1:
            raise ContractError("need at least one foreground descriptor")

    @property
    def num_objects(self) -> int:
        return self.foreground.data.shape[0]

    @property
    def count(self) -> int:
        return self.foreground.data.shape[0] + self.background.data.shape[0]

    @property
    def dim(self) -> int:
        return self.foreground.data.shape[1]

    def all_descriptors(self) -> Tensor:
        return concat([self.foreground, self.background], axis=0)

    def state_bytes(self) -> bytes:
        """Exactly the retained cross-frame state: (N_obj + g^2) * C doubles."""
        return (
            self.foreground.data.astype("<f8").tobytes()
            + self.background.data.astype("<f8").tobytes()
        )


@dataclass
class MaskSet:
    """Per-frame soft segmentation channels: objects, grid cells, catch-all last."""

    channels: Tensor
    num_objects: int
    bg_grid: int
    has_catch_all: bool = True

    def __post_init__(self):
        expected = self.num_objects + self.bg_grid * self.bg_grid + (1 if self.has_catch_all else 0)
        if self.channels.data.shape[0] != expected:
            raise ShapeError(
                f"mask set has {self.channels.data.shape[0]} channels, expected {expected}"
            )

    @property
    def height(self) -> int:
        return self.channels.data.shape[1]

    @property
    def width(self) -> int:
        return self.channels.data.shape[2]

    def object_channels(self) -> Tensor:
        return self.channels[: self.num_objects]

    def propagated_channels(self) -> Tensor:
        """Object + grid-cell channels; the catch-all is never carried forward."""
        return self.channels[: self.num_objects + self.bg_grid * self.bg_grid]


def grid_bounds(n: int, g: int) -> list:
    """g near-equal integer extents; remainder pixels go to the last cell."""
    step = n // g
    edges = [i * step for i in range(g)] + [n]
    return edges


def split_background_grid(object_masks: Tensor, grid: int) -> Tensor:
    """Partition the non-object region into g x g rectangular cells.

    The background map is clip(1 - sum of object masks, 0, 1); each cell is
    that map restricted to one rectangle, so cells are disjoint and sum back
    to the background map exactly. Differentiable in the object masks.
    """
    if object_masks.data.ndim != 3:
        raise ShapeError(f"object masks must be NxHxW, got {object_masks.data.shape}")
    _, h, w = object_masks.data.shape
    bg = (1.0 - object_masks.sum(axis=0)).clamp(0.0, 1.0)
    ys, xs = grid_bounds(h, grid), grid_bounds(w, grid)
    cells = []
    for i in range(grid):
        for j in range(grid):
            region = np.zeros((h, w))
            region[ys[i] : ys[i + 1], xs[j] : xs[j + 1]] = 1.0
            cells.append((bg * Tensor(region)).reshape(1, h, w))
    return concat(cells, axis=0)


def initial_mask_channels(object_masks: Tensor, grid: int) -> Tensor:
    """Object masks plus their background grid cells, stacked channel-wise."""
    return concat([object_masks, split_background_grid(object_masks, grid)], axis=0)


def downsample_mask(masks: Tensor, factor: int) -> Tensor:
    """Area-average NxHxW masks down by an integer factor; stays in [0,1]."""
    n, h, w = masks.data.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask size {h}x{w} not divisible by {factor}")
    return masks.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def init_descriptors(f8: Tensor, masks: Tensor) -> Tensor:
    """Mask-weighted average pooling of stride-8 features, one row per mask."""
    c, h, w = f8.data.shape
    n, hm, wm = masks.data.shape
    if (hm, wm) != (h, w):
        raise ShapeError(f"masks {masks.data.shape} do not match features {f8.data.shape}")
    feats = f8.reshape(c, h * w).T
    flat = masks.reshape(n, h * w)
    pooled = matmul(flat, feats)
    denom = flat.sum(axis=1, keepdims=True) + DESCRIPTOR_EPS
    return pooled / denom


def _he_conv(rng, cout, cin, k, name):
    std = math.sqrt(2.0 / (cin * k * k))
    return Parameter(rng.normal(0.0, std, (cout, cin, k, k)), f"{name}.weight")


class _ConvBlock:
    def __init__(self, rng, cout, cin, k, name):
        self.weight = _he_conv(rng, cout, cin, k, name)
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")

    def __call__(self, x, stride=1, padding=0):
        return conv2d(x, self.weight.tensor, self.bias.tensor, stride=stride, padding=padding)

    def parameters(self):
        return [self.weight, self.bias]


class Backbone:
    """Small strided conv stack producing stride-8 and stride-4 feature maps."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config.model_dim
        c1 = max(c // 2, 8)
        self.conv1 = _ConvBlock(rng, c1, 3, 3, "backbone.conv1")
        self.conv2 = _ConvBlock(rng, c, c1, 3, "backbone.conv2")
        self.conv3 = _ConvBlock(rng, c, c, 3, "backbone.conv3")
        self.conv4 = _ConvBlock(rng, c, c, 3, "backbone.conv4")
        self.tap4 = _ConvBlock(rng, c, c, 1, "backbone.tap4")

    def __call__(self, image: Tensor) -> FeaturePyramid:
        if image.data.ndim != 3 or image.data.shape[0] != 3:
            raise ShapeError(f"image must be 3xHxW, got {image.data.shape}")
        _, h, w = image.data.shape
        if h % 8 or w % 8:
            raise ConfigError(f"image size {h}x{w} must be a multiple of 8")
        x1 = self.conv1(image, stride=2, padding=1).gelu()
        x2 = self.conv2(x1, stride=2, padding=1).gelu()
        x3 = self.conv3(x2, stride=2, padding=1).gelu()
        f8 = self.conv4(x3, stride=1, padding=1)
        f4 = self.tap4(x2)
        return FeaturePyramid(f8=f8, f4=f4)

    def parameters(self):
        out = []
        for blk in (self.conv1, self.conv2, self.conv3, self.conv4, self.tap4):
            out.extend(blk.parameters())
        return out


class _FeedForward:
    def __init__(self, config: ModelConfig, rng, name):
        c = config.model_dim
        hidden = 2 * c
        self.w1 = Parameter(rng.normal(0.0, math.sqrt(2.0 / c), (c, hidden)), f"{name}.w1")
        self.b1 = Parameter(np.zeros(hidden), f"{name}.b1")
        self.w2 = Parameter(rng.normal(0.0, math.sqrt(2.0 / hidden), (hidden, c)), f"{name}.w2")
        self.b2 = Parameter(np.zeros(c), f"{name}.b2")
        self.ln_gamma = Parameter(np.ones(c), f"{name}.ln_gamma")
        self.ln_beta = Parameter(np.zeros(c), f"{name}.ln_beta")

    def __call__(self, x: Tensor) -> Tensor:
        h = layer_norm(x, self.ln_gamma.tensor, self.ln_beta.tensor)
        h = (matmul(h, self.w1.tensor) + self.b1.tensor).gelu()
        return x + (matmul(h, self.w2.tensor) + self.b2.tensor)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.ln_gamma, self.ln_beta]


class EncoderLayer:
    """Mask-conditioned cross-attention, descriptor self-attention, feed-forward."""

    def __init__(self, config: ModelConfig, rng, name):
        acfg = config.attention_config()
        self.cross = AttentionLayer(acfg, rng, f"{name}.cross")
        self.self_attn = AttentionLayer(acfg, rng, f"{name}.self")
        self.ffn = _FeedForward(config, rng, f"{name}.ffn")

    def __call__(self, desc: Tensor, pixel_tokens: Tensor, mask: Tensor, mode: str) -> Tensor:
        desc = multi_head_attention(self.cross, desc, pixel_tokens, mask, mode)
        desc = multi_head_attention(self.self_attn, desc, desc, None, "none")
        return self.ffn(desc)

    def parameters(self):
        return self.cross.parameters() + self.self_attn.parameters() + self.ffn.parameters()


class DecoderLayer:
    """Pixel-to-descriptor cross-attention (always unmasked) plus feed-forward."""

    def __init__(self, config: ModelConfig, rng, name):
        self.cross = AttentionLayer(config.attention_config(), rng, f"{name}.cross")
        self.ffn = _FeedForward(config, rng, f"{name}.ffn")

    def __call__(self, pixels: Tensor, descriptors: Tensor) -> Tensor:
        pixels = multi_head_attention(self.cross, pixels, descriptors, None, "none")
        return self.ffn(pixels)

    def parameters(self):
        return self.cross.parameters() + self.ffn.parameters()


class DescriptorSegmenter:
    """The full encode/decode model with deterministic seeded initialization."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = derive_rng(seed, "model-init")
        c = config.model_dim
        self.backbone = Backbone(config, rng)
        self.encoder = [EncoderLayer(config, rng, f"encoder.{i}") for i in range(config.encoder_layers)]
        self.decoder = [DecoderLayer(config, rng, f"decoder.{i}") for i in range(config.decoder_layers)]
        self.fuse = _ConvBlock(rng, c, c, 3, "decoder.fuse")
        self.catch_all_conv3 = _ConvBlock(rng, c, c, 3, "decoder.catch_all3")
        self.catch_all_conv1 = _ConvBlock(rng, 1, c, 1, "decoder.catch_all1")
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate parameter names in model")

    def parameters(self) -> list:
        out = self.backbone.parameters()
        for layer in self.encoder:
            out.extend(layer.parameters())
        for layer in self.decoder:
            out.extend(layer.parameters())
        for blk in (self.fuse, self.catch_all_conv3, self.catch_all_conv1):
            out.extend(blk.parameters())
        return out

    def extract_features(self, image: Tensor) -> FeaturePyramid:
        return self.backbone(image)

    # -- encoding ---------------------------------------------------------------

    def encode(self, features: FeaturePyramid, mask_channels: Tensor, frame_index: int = 0) -> DescriptorSet:
        """Masks (objects + grid cells, no catch-all) to one descriptor each."""
        cfg = self.config
        c, h8, w8 = features.f8.data.shape
        n_desc = mask_channels.data.shape[0]
        n_obj = n_desc - cfg.num_bg_cells
        if n_obj < 1:
            raise ContractError(
                f"{n_desc} mask channels cannot hold {cfg.num_bg_cells} grid cells plus >=1 object"
            )
        factor = mask_channels.data.shape[1] // h8
        if mask_channels.data.shape[1] != factor * h8 or mask_channels.data.shape[2] != factor * w8:
            raise ShapeError(
                f"mask size {mask_channels.data.shape[1:]} is not a multiple of feature size {(h8, w8)}"
            )
        masks8 = downsample_mask(mask_channels, factor) if factor > 1 else mask_channels
        desc = init_descriptors(features.f8, masks8)
        if cfg.encoder_layers:
            tokens = features.f8.reshape(c, h8 * w8).T
            attn_mask = masks8.reshape(n_desc, h8 * w8)
            for layer in self.encoder:
                desc = layer(desc, tokens, attn_mask, cfg.attention_mode)
        return DescriptorSet(
            foreground=desc[:n_obj], background=desc[n_obj:], frame_index=frame_index
        )

    # -- decoding ---------------------------------------------------------------

    def decode(
        self,
        features: FeaturePyramid,
        history: Sequence[DescriptorSet],
        return_logits: bool = False,
    ):
        """Descriptor history + frame features to a normalized mask set.

        Per-frame dot-product logit maps are averaged over the history (the
        dot product is linear, so this equals a dot product with the mean
        descriptor); the catch-all logit is computed fresh from this frame.
        """
        cfg = self.config
        history = list(history)
        if not history:
            raise UsageError("decode needs at least one descriptor set in history")
        counts = {(d.num_objects, d.background.data.shape[0]) for d in history}
        if len(counts) != 1:
            raise ContractError(f"history descriptor counts disagree: {sorted(counts)}")
        n_obj = history[0].num_objects
        c, h8, w8 = features.f8.data.shape

        all_desc = concat([d.all_descriptors() for d in history], axis=0)
        mean_desc = history[0].all_descriptors()
        for d in history[1:]:
            mean_desc = mean_desc + d.all_descriptors()
        mean_desc = mean_desc * (1.0 / len(history))

        pixels = features.f8.reshape(c, h8 * w8).T
        for layer in self.decoder:
            pixels = layer(pixels, all_desc)
        f8l = pixels.T.reshape(c, h8, w8)

        f4l = self.fuse(features.f4 + upsample_bilinear(f8l, 2), padding=1)
        h4, w4 = f4l.data.shape[1:]
        dot = matmul(f4l.reshape(c, h4 * w4).T, mean_desc.T)
        logit_maps = dot.T.reshape(mean_desc.data.shape[0], h4, w4)
        if cfg.use_catch_all:
            catch = self.catch_all_conv1(self.catch_all_conv3(f4l, padding=1))
            logit_maps = concat([logit_maps, catch], axis=0)
        masks = softmax(upsample_bilinear(logit_maps, 4), axis=0)
        out = MaskSet(
            channels=masks, num_objects=n_obj, bg_grid=cfg.bg_grid, has_catch_all=cfg.use_catch_all
        )
        if return_logits:
            return out, logit_maps
        return out
