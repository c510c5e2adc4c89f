"""
Checkpoint container.

Layout (all integers u32 little-endian):

    b"CFLD" | version | metadata length | metadata (UTF-8 JSON) | tensor count |
    per tensor: name length | name (UTF-8) | rank | extents... | data ('<f4', row-major)

Metadata carries the config snapshot, the parameter partition, step count, seed and RNG
state. Writes go to a temporary file in the target directory and are renamed into place.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from cfld.common.errors import CheckpointError

MAGIC = b"CFLD"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def partition(self) -> dict[str, list[str]] | None:
        return self.metadata.get("partition")

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under `prefix.`, with the prefix stripped."""
        start = len(prefix) + 1
        return {name[start:]: t for name, t in self.tensors.items() if name.startswith(prefix + ".")}


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def encode(checkpoint: Checkpoint) -> bytes:
    meta = json.dumps(checkpoint.metadata, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _u32(VERSION), _u32(len(meta)), meta, _u32(len(checkpoint.tensors))]
    for name, array in checkpoint.tensors.items():
        encoded_name = name.encode("utf-8")
        array = np.ascontiguousarray(array, dtype="<f4")
        parts += [_u32(len(encoded_name)), encoded_name, _u32(array.ndim)]
        parts += [_u32(extent) for extent in array.shape]
        parts.append(array.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise CheckpointError(f"Truncated checkpoint at byte {self.offset} (wanted {n} more)")
        chunk = self.payload[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(payload: bytes) -> Checkpoint:
    reader = _Reader(payload)
    if reader.take(4) != MAGIC:
        raise CheckpointError("Not a CFLD checkpoint (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version: {version}. Supported versions: [{VERSION}]")
    try:
        metadata = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"Malformed checkpoint metadata: {err}") from err
    tensors = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if reader.offset != len(payload):
        raise CheckpointError(f"Trailing bytes after tensor table: {len(payload) - reader.offset}")
    return Checkpoint(tensors=tensors, metadata=metadata)


def atomic_write(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    atomic_write(path, encode(checkpoint))
    return Path(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return decode(path.read_bytes())


def check_partition(checkpoint: Checkpoint, expected: dict[str, list[str]]) -> None:
    """Reject a checkpoint whose recorded partition differs from `expected`."""
    recorded = checkpoint.partition
    if recorded is None:
        raise CheckpointError("Partition mismatch: checkpoint records no partition metadata")
    for key in ("trainable", "frozen"):
        if sorted(recorded.get(key, [])) != sorted(expected.get(key, [])):
            diff = set(recorded.get(key, [])) ^ set(expected.get(key, []))
            raise CheckpointError(
                f"Partition mismatch in {key} set: {len(diff)} names differ, e.g. {sorted(diff)[:3]}"
            )
