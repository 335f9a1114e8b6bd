"""Minimal binary PGM (P5) and PPM (P6) readers/writers.

Quantization is round-half-up (floor(255*x + 0.5)) so written bytes are a
bit-exact contract.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def quantize(values: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8 with round-half-up."""
    v = np.asarray(values, dtype=np.float64)
    if v.min(initial=0.0) < 0.0 or v.max(initial=0.0) > 1.0:
        raise ContractError(
            f"values out of [0,1]: min={v.min()!r}, max={v.max()!r}"
        )
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a 2-D uint8 array (or [0,1] floats, quantized) as binary PGM."""
    arr = np.asarray(gray)
    if arr.ndim != 2:
        raise ContractError(f"PGM wants a 2-D array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = quantize(arr)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write a 3xHxW [0,1] float image as binary PPM."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"PPM wants 3xHxW, got shape {arr.shape}")
    data = quantize(arr).transpose(1, 2, 0)  # HxWx3 interleaved
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise ContractError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok:
            raise ContractError("truncated header")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ContractError(f"only maxval 255 supported, got {maxval}")
    return w, h


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a 2-D uint8 array."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        payload = fh.read(w * h)
    if len(payload) != w * h:
        raise ContractError("truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a 3xHxW float image in [0,1]."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        payload = fh.read(3 * w * h)
    if len(payload) != 3 * w * h:
        raise ContractError("truncated PPM payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return data.transpose(2, 0, 1).astype(np.float64) / 255.0
