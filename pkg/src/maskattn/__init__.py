"""Soft-masked attention and descriptor-based video object re-segmentation."""

from .tensor import (
    Graph,
    Parameter,
    Tensor,
    backward,
    concat,
    conv2d,
    finite_diff_check,
    layer_norm,
    matmul,
    no_grad,
    record,
    softmax,
    upsample_bilinear,
)
from .attention import (
    AttentionConfig,
    AttentionLayer,
    attention,
    attention_logits,
    export_attention_weights,
    hard_masked_attention,
    multi_head_attention,
    soft_masked_attention,
)
from .model import (
    DescriptorSegmenter,
    DescriptorSet,
    FeaturePyramid,
    MaskSet,
    ModelConfig,
    ablate_catch_all,
    init_descriptors,
    initial_mask_channels,
    split_background_grid,
)
from .propagation import ClipResult, TemporalHistory, cyclic_pass, propagate_clip, throughput_probe
from .training import TrainConfig, evaluate_model, parse_train_config, train

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionLayer",
    "ClipResult",
    "DescriptorSegmenter",
    "DescriptorSet",
    "FeaturePyramid",
    "Graph",
    "MaskSet",
    "ModelConfig",
    "Parameter",
    "TemporalHistory",
    "Tensor",
    "TrainConfig",
    "ablate_catch_all",
    "attention",
    "attention_logits",
    "backward",
    "concat",
    "conv2d",
    "cyclic_pass",
    "evaluate_model",
    "export_attention_weights",
    "finite_diff_check",
    "hard_masked_attention",
    "init_descriptors",
    "initial_mask_channels",
    "layer_norm",
    "matmul",
    "multi_head_attention",
    "no_grad",
    "parse_train_config",
    "propagate_clip",
    "record",
    "softmax",
    "soft_masked_attention",
    "split_background_grid",
    "throughput_probe",
    "train",
    "upsample_bilinear",
]
