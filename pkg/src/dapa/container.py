"""Binary container shared by prefix and backbone checkpoints.

Layout: 8-byte ASCII magic, u32 little-endian format version, u32 metadata
byte length, the metadata itself (UTF-8 "key=value" lines, key-sorted), then
raw little-endian float32 array payloads in a declared order.  Writers emit
to a temp file and rename, so a crash never leaves a partial artifact.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import CheckpointFormatError

FORMAT_VERSION = 1


def encode_metadata(metadata: dict[str, str]) -> bytes:
    for key, value in metadata.items():
        if "\n" in key or "=" in key or "\n" in str(value):
            raise ValueError(f"metadata entry not encodable: {key!r}={value!r}")
    lines = [f"{k}={metadata[k]}" for k in sorted(metadata)]
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_metadata(raw: bytes) -> dict[str, str]:
    meta: dict[str, str] = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"malformed metadata line: {line!r}")
        key, value = line.split("=", 1)
        meta[key] = value
    return meta


def atomic_write_bytes(path: str, blob: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def serialize(magic: bytes, metadata: dict[str, str],
              arrays: list[np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError(f"magic must be exactly 8 bytes, got {len(magic)}")
    meta_blob = encode_metadata(metadata)
    parts = [magic, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(meta_blob)), meta_blob]
    for arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def write_container(path: str, magic: bytes, metadata: dict[str, str],
                    arrays: list[np.ndarray]) -> None:
    atomic_write_bytes(path, serialize(magic, metadata, arrays))


class ContainerReader:
    """Sequential reader: header checks up front, then take() per declared array."""

    def __init__(self, blob: bytes, expected_magic: bytes):
        if len(blob) < 16:
            raise CheckpointFormatError(f"container truncated: {len(blob)} bytes")
        if blob[:8] != expected_magic:
            raise CheckpointFormatError(
                f"bad magic: expected {expected_magic!r}, found {blob[:8]!r}")
        version = struct.unpack("<I", blob[8:12])[0]
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported container version {version}")
        meta_len = struct.unpack("<I", blob[12:16])[0]
        if 16 + meta_len > len(blob):
            raise CheckpointFormatError(
                f"metadata length {meta_len} overruns file of {len(blob)} bytes")
        self.metadata = decode_metadata(blob[16:16 + meta_len])
        self._payload = blob[16 + meta_len:]
        self._offset = 0

    def take(self, shape: tuple[int, ...]) -> np.ndarray:
        """Consume one float32 array of the given shape, returned as float64."""
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if self._offset + nbytes > len(self._payload):
            raise CheckpointFormatError(
                f"payload truncated: need {nbytes} bytes at offset {self._offset}, "
                f"have {len(self._payload) - self._offset}")
        flat = np.frombuffer(self._payload, dtype="<f4", count=count,
                             offset=self._offset)
        self._offset += nbytes
        return flat.reshape(shape).astype(np.float64)

    def finish(self) -> None:
        if self._offset != len(self._payload):
            raise CheckpointFormatError(
                f"{len(self._payload) - self._offset} unread payload bytes remain")


def read_container(path: str, expected_magic: bytes) -> ContainerReader:
    with open(path, "rb") as fh:
        blob = fh.read()
    return ContainerReader(blob, expected_magic)
