"""Single- and multi-head attention: unmasked, hard-masked, and soft-masked.

The soft variant adds a learnable positive scale times a [0,1] mask to the
query-key logits before the softmax, so gradients flow through the mask
itself. The hard variant overwrites masked-out logits with -1e30 and is, by
construction, not differentiable through the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DegenerateRowError, ShapeError
from .tensor import Parameter, Tensor, _apply, concat, layer_norm, matmul, no_grad, softmax

MODES = ("soft", "hard", "none")

#: per-head soft-mask scale initialization (8 heads)
DEFAULT_ALPHA_INIT = (32.0, 32.0, 16.0, 16.0, 8.0, 8.0, 4.0, 4.0)

#: post-step clamp that keeps the mask scales strictly positive
ALPHA_MIN = 1e-4


def default_alpha_init(num_heads: int) -> tuple:
    """The 8-head ladder, or a geometric 32..4 ladder for other head counts."""
    if num_heads == 8:
        return DEFAULT_ALPHA_INIT
    if num_heads == 1:
        return (8.0,)
    return tuple(np.geomspace(32.0, 4.0, num_heads))


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int = 64
    num_heads: int = 8
    alpha_init: tuple = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0:
            raise ConfigError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        alphas = self.alpha_init if self.alpha_init is not None else default_alpha_init(self.num_heads)
        alphas = tuple(float(a) for a in alphas)
        if len(alphas) != self.num_heads:
            raise ConfigError(f"need {self.num_heads} alpha inits, got {len(alphas)}")
        if any(a <= 0 for a in alphas):
            raise ConfigError("alpha inits must be strictly positive")
        object.__setattr__(self, "alpha_init", alphas)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class AttentionLayer:
    """Projections, per-head mask scales, and the pre-norm residual wrapper.

    Layer normalization is applied to the query and key/value streams before
    the projections (pre-norm); the residual connection adds the raw query
    input to the projected attention output.
    """

    def __init__(self, config: AttentionConfig, rng: np.random.Generator, name: str = "attn"):
        self.config = config
        c = config.model_dim
        std = 1.0 / math.sqrt(c)
        self.w_q = Parameter(rng.normal(0.0, std, (c, c)), f"{name}.w_q")
        self.w_k = Parameter(rng.normal(0.0, std, (c, c)), f"{name}.w_k")
        self.w_v = Parameter(rng.normal(0.0, std, (c, c)), f"{name}.w_v")
        self.w_o = Parameter(rng.normal(0.0, std, (c, c)), f"{name}.w_o")
        self.ln_q_gamma = Parameter(np.ones(c), f"{name}.ln_q_gamma")
        self.ln_q_beta = Parameter(np.zeros(c), f"{name}.ln_q_beta")
        self.ln_kv_gamma = Parameter(np.ones(c), f"{name}.ln_kv_gamma")
        self.ln_kv_beta = Parameter(np.zeros(c), f"{name}.ln_kv_beta")
        self.alphas = [
            Parameter(np.asarray(a, dtype=np.float64), f"{name}.alpha{h}", clamp_min=ALPHA_MIN)
            for h, a in enumerate(config.alpha_init)
        ]

    def parameters(self) -> list:
        return [
            self.w_q, self.w_k, self.w_v, self.w_o,
            self.ln_q_gamma, self.ln_q_beta, self.ln_kv_gamma, self.ln_kv_beta,
            *self.alphas,
        ]


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError(f"attention expects 2-D Q/K/V, got {q.shape}, {k.shape}, {v.shape}")
    if q.data.shape[1] != k.data.shape[1]:
        raise ShapeError(f"query/key dims disagree: {q.shape} vs {k.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"key/value counts disagree: {k.shape} vs {v.shape}")


def _check_mask_shape(mask: Tensor, n_q: int, n_k: int) -> None:
    if mask.data.shape != (n_q, n_k):
        raise ShapeError(f"mask shape {mask.data.shape} does not match (queries, keys)=({n_q}, {n_k})")


def attention_logits(q: Tensor, k: Tensor) -> Tensor:
    """Unscaled dot-product logits L[i,j] = <q_i, k_j>."""
    if q.data.shape[1:] != k.data.shape[1:]:
        raise ShapeError(f"query/key dims disagree: {q.shape} vs {k.shape}")
    return matmul(q, k.T)


def _finish(logits: Tensor, v: Tensor, return_weights: bool):
    weights = softmax(logits, axis=1)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Plain scaled dot-product attention."""
    _check_qkv(q, k, v)
    scale = 1.0 / math.sqrt(q.data.shape[1])
    return _finish(matmul(q, k.T) * scale, v, return_weights)


def soft_masked_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Tensor,
    alpha,
    return_weights: bool = False,
):
    """softmax((QK^T + alpha * mask) / sqrt(dim)) V, differentiable in everything.

    `mask` must lie in [0, 1] (1e-9 slack); `alpha` is a positive scalar,
    either a Tensor (learnable) or a float.
    """
    _check_qkv(q, k, v)
    _check_mask_shape(mask, q.data.shape[0], k.data.shape[0])
    lo, hi = float(mask.data.min(initial=0.0)), float(mask.data.max(initial=0.0))
    if lo < -1e-9 or hi > 1 + 1e-9:
        raise ContractError(f"soft mask out of [0,1]: min={lo!r}, max={hi!r}")
    if not isinstance(alpha, Tensor):
        alpha = Tensor(np.asarray(alpha, dtype=np.float64))
    if float(alpha.data) <= 0.0:
        raise ContractError(f"alpha must be positive, got {float(alpha.data)!r}")
    scale = 1.0 / math.sqrt(q.data.shape[1])
    logits = (matmul(q, k.T) + alpha * mask) * scale
    return _finish(logits, v, return_weights)


def hard_masked_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Tensor,
    return_weights: bool = False,
):
    """Attention restricted to keys with mask 1; masked logits become -1e30.

    The mask must be exactly binary with at least one active key per query
    row; no gradient reaches the mask.
    """
    _check_qkv(q, k, v)
    _check_mask_shape(mask, q.data.shape[0], k.data.shape[0])
    md = mask.data
    if not np.all((md == 0.0) | (md == 1.0)):
        raise ContractError("hard mask must be exactly binary")
    row_counts = md.sum(axis=1)
    if (row_counts == 0).any():
        raise DegenerateRowError(int(np.argmin(row_counts)))
    keep = md == 1.0
    scale = 1.0 / math.sqrt(q.data.shape[1])
    logits = matmul(q, k.T) * scale
    masked = _apply(np.where(keep, logits.data, -1e30), (logits,), lambda g: (g * keep,))
    return _finish(masked, v, return_weights)


def _head_slices(c: int, num_heads: int):
    d = c // num_heads
    return [slice(h * d, (h + 1) * d) for h in range(num_heads)]


def multi_head_attention(
    layer: AttentionLayer,
    queries: Tensor,
    keys_values: Tensor,
    mask: Tensor | None,
    mode: str = "soft",
) -> Tensor:
    """Pre-norm residual multi-head attention in one of three masking modes.

    soft: each head adds its own learnable alpha times the mask to the logits.
    hard: the mask is thresholded at 0.5; rows left empty fall back to
    attending everywhere (the direct hard op instead rejects such rows).
    none: the mask is ignored.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown attention mode {mode!r}; expected one of {MODES}")
    if mode != "none" and mask is None:
        raise ConfigError(f"mode {mode!r} requires a mask")
    cfg = layer.config
    qn = layer_norm(queries, layer.ln_q_gamma.tensor, layer.ln_q_beta.tensor)
    kvn = layer_norm(keys_values, layer.ln_kv_gamma.tensor, layer.ln_kv_beta.tensor)
    q = matmul(qn, layer.w_q.tensor)
    k = matmul(kvn, layer.w_k.tensor)
    v = matmul(kvn, layer.w_v.tensor)

    hard_mask = None
    if mode == "hard":
        binary = (mask.data >= 0.5).astype(np.float64)
        empty = binary.sum(axis=1) == 0
        if empty.any():
            binary[empty] = 1.0
        hard_mask = Tensor(binary)

    heads = []
    for h, sl in enumerate(_head_slices(cfg.model_dim, cfg.num_heads)):
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        if mode == "soft":
            heads.append(soft_masked_attention(qh, kh, vh, mask, layer.alphas[h].tensor))
        elif mode == "hard":
            heads.append(hard_masked_attention(qh, kh, vh, hard_mask))
        else:
            heads.append(attention(qh, kh, vh))
    out = matmul(concat(heads, axis=1) if len(heads) > 1 else heads[0], layer.w_o.tensor)
    return queries + out


def export_attention_weights(
    layer: AttentionLayer,
    queries: Tensor,
    keys_values: Tensor,
    mask: Tensor,
    head: int,
) -> Tensor:
    """Scaled logits (QK^T + alpha*mask)/sqrt(d) of one head, before softmax.

    Runs without recording gradients; the caller reshapes the [queries, keys]
    matrix into image geometry for heatmap export.
    """
    cfg = layer.config
    if not 0 <= head < cfg.num_heads:
        raise ConfigError(f"head {head} out of range [0, {cfg.num_heads})")
    with no_grad():
        qn = layer_norm(queries, layer.ln_q_gamma.tensor, layer.ln_q_beta.tensor)
        kvn = layer_norm(keys_values, layer.ln_kv_gamma.tensor, layer.ln_kv_beta.tensor)
        sl = _head_slices(cfg.model_dim, cfg.num_heads)[head]
        qh = matmul(qn, layer.w_q.tensor)[:, sl]
        kh = matmul(kvn, layer.w_k.tensor)[:, sl]
        _check_mask_shape(mask, qh.data.shape[0], kh.data.shape[0])
        scale = 1.0 / math.sqrt(qh.data.shape[1])
        logits = (matmul(qh, kh.T) + layer.alphas[head].tensor * mask) * scale
    return logits.detach()
