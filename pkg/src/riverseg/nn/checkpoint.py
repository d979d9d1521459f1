"""RSWT weight checkpoints.

Layout (all integers little-endian):

* magic ``RSWT``, u16 version (currently 1)
* spec block: u8-length-prefixed family string, four u8 stage block
  counts, u32 base_width, u16 in_bands
* u32 tensor count, then per tensor: u16-length-prefixed name, u8 ndim,
  u32 dims, raw float32 payload (C order)
* u32 CRC32 of everything before the trailer

Tensors cover trainable parameters *and* normalisation running
statistics, so a reloaded model is inference-ready.  Payloads are always
float32; saving a float64 model narrows it.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import ArgumentError, FormatError
from .models import Model, ModelSpec, build_model

__all__ = ["CHECKPOINT_MAGIC", "CHECKPOINT_VERSION", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_MAGIC = b"RSWT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    """Write the model's spec and all weight tensors to ``path``."""
    spec = model.spec
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    fam = spec.family.encode("utf-8")
    parts.append(struct.pack("<B", len(fam)))
    parts.append(fam)
    parts.append(struct.pack("<4B", *spec.backbone_blocks))
    parts.append(struct.pack("<IH", spec.base_width, spec.in_bands))
    tensors = list(model.named_arrays())
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> Model:
    """Rebuild a model from an RSWT file; raises FormatError on damage."""
    blob = Path(path).read_bytes()
    if len(blob) < 10:
        raise FormatError("checkpoint truncated")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise FormatError("checkpoint checksum mismatch")
    body = memoryview(blob)[: len(blob) - 4]
    pos = 4

    def need(n: int) -> int:
        nonlocal pos
        if pos + n > len(body):
            raise FormatError("checkpoint truncated")
        start = pos
        pos += n
        return start

    (version,) = struct.unpack_from("<H", body, need(2))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (fam_len,) = struct.unpack_from("<B", body, need(1))
    family = bytes(body[need(fam_len) : pos]).decode("utf-8")
    blocks = struct.unpack_from("<4B", body, need(4))
    base_width, in_bands = struct.unpack_from("<IH", body, need(6))
    try:
        spec = ModelSpec(family, blocks, base_width, in_bands)
    except ArgumentError as exc:
        raise FormatError(f"invalid spec in checkpoint: {exc}") from exc

    (n_tensors,) = struct.unpack_from("<I", body, need(4))
    weights: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", body, need(2))
        name = bytes(body[need(name_len) : pos]).decode("utf-8")
        (ndim,) = struct.unpack_from("<B", body, need(1))
        if not 1 <= ndim <= 4:
            raise FormatError(f"tensor {name!r} has unsupported rank {ndim}")
        shape = struct.unpack_from(f"<{ndim}I", body, need(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        payload = body[need(4 * count) : pos]
        weights[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if pos != len(body):
        raise FormatError("trailing bytes in checkpoint")

    model = build_model(spec, np.random.default_rng(0))
    try:
        model.set_weights(weights)
    except ArgumentError as exc:
        raise FormatError(f"checkpoint does not match its spec: {exc}") from exc
    return model
