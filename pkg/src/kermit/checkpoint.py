"""Binary checkpoint format for scorer parameters.

Layout, all integers little-endian:

    magic   4 bytes  b"KRMT"
    version u16      currently 1
    config  u32 length prefix, then that many bytes of UTF-8 JSON
    count   u32      number of tensors
    tensor  repeated count times, sorted by name:
        name  u16 length prefix, then UTF-8 bytes
        rank  u8
        dims  u32 per axis
        data  float64 little-endian, C order

Loading validates the tensor set against the shapes the config
implies, so a truncated or mismatched file fails loudly instead of
producing a scorer with silently wrong weights. Save then load is
bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from .scorer import Parameters, ScorerConfig, parameter_shapes

MAGIC = b"KRMT"
VERSION = 1


def save_checkpoint(params: Parameters, path: str | Path) -> None:
    config_blob = json.dumps(
        {
            "vocab_size": params.config.vocab_size,
            "d_model": params.config.d_model,
            "n_layers": params.config.n_layers,
            "n_heads": params.config.n_heads,
            "d_ff": params.config.d_ff,
            "max_len": params.config.max_len,
            "dropout": params.config.dropout,
        },
        sort_keys=True,
    ).encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    chunks.append(struct.pack("<I", len(config_blob)))
    chunks.append(config_blob)
    names = sorted(params.tensors)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"needed {n} bytes at offset {self.pos}, file ends at {len(self.blob)}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Parameters:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a scorer checkpoint")
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
    (config_len,) = reader.unpack("<I")
    try:
        fields = json.loads(reader.take(config_len).decode("utf-8"))
        config = ScorerConfig(**fields)
    except CheckpointTruncatedError:
        raise
    except (ValueError, TypeError, ConfigError) as exc:
        raise CheckpointFormatError(f"{path}: bad config block: {exc}") from exc

    expected = parameter_shapes(config)
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I")
        want = expected.get(name)
        if want is None:
            raise CheckpointShapeError(f"{path}: unexpected tensor {name!r}")
        if shape != want:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {shape}, config implies {want}"
            )
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8")
        tensors[name] = data.astype(np.float64).reshape(shape)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointShapeError(f"{path}: missing tensors {missing}")
    if reader.pos != len(reader.blob):
        raise CheckpointFormatError(
            f"{path}: {len(reader.blob) - reader.pos} trailing bytes"
        )
    return Parameters(config=config, tensors=tensors)
