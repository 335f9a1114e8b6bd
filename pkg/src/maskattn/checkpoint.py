"""Versioned binary model checkpoints.

Layout: 8-byte magic, u32 config length + key=value text, then one block per
parameter: u32 name length, name bytes, u32 rank, u64 dims, little-endian
float64 payload. Blocks run until EOF; anything short is rejected.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from .errors import CheckpointError
from .model import DescriptorSegmenter, ModelConfig

MAGIC = b"HODORCK1"


def _config_to_text(config: ModelConfig) -> str:
    lines = [
        f"model_dim={config.model_dim}",
        f"num_heads={config.num_heads}",
        f"encoder_layers={config.encoder_layers}",
        f"decoder_layers={config.decoder_layers}",
        f"bg_grid={config.bg_grid}",
        f"input_size={config.input_size[0]}x{config.input_size[1]}",
        "alpha_init=" + ",".join(repr(a) for a in config.alpha_init),
        f"attention_mode={config.attention_mode}",
        f"use_catch_all={'on' if config.use_catch_all else 'off'}",
    ]
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key] = value
    try:
        h, _, w = kv["input_size"].partition("x")
        return ModelConfig(
            model_dim=int(kv["model_dim"]),
            num_heads=int(kv["num_heads"]),
            encoder_layers=int(kv["encoder_layers"]),
            decoder_layers=int(kv["decoder_layers"]),
            bg_grid=int(kv["bg_grid"]),
            input_size=(int(h), int(w)),
            alpha_init=tuple(float(a) for a in kv["alpha_init"].split(",")),
            attention_mode=kv["attention_mode"],
            use_catch_all=kv["use_catch_all"] == "on",
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint config: {exc}") from exc


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def save_checkpoint(path, model: DescriptorSegmenter) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = _config_to_text(model.config).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for p in model.parameters():
        name = p.name.encode("utf-8")
        arr = p.data
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    """Return (ModelConfig, dict name -> float64 array)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"unknown checkpoint magic {magic!r}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = _config_from_text(_read_exact(fh, cfg_len).decode("utf-8"))
        params = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint: partial block header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            count = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 8 * count)
            params[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    return config, params


def load_model(path) -> DescriptorSegmenter:
    """Rebuild a model from a checkpoint; parameter names must match exactly."""
    config, params = read_checkpoint(path)
    model = DescriptorSegmenter(config, seed=0)
    own = {p.name: p for p in model.parameters()}
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        raise CheckpointError(f"parameter names disagree: missing={missing}, extra={extra}")
    for name, arr in params.items():
        p = own[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(f"parameter {name} shape {arr.shape} != expected {p.data.shape}")
        p.tensor.data = arr
    return model
