"""Binary weight archive.

Layout, all little-endian:
    magic "CURV" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims... | f32 payload (row-major)

Loading then saving reproduces the file byte for byte; applying an archive to
a network is strict (missing, unknown, and shape-mismatched tensors are each
distinct errors).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CURV"
VERSION = 1


class ArchiveError(Exception):
    """Base class for weight-archive failures."""


class ArchiveFormatError(ArchiveError):
    """Bad magic, truncated stream, or malformed record."""


class ArchiveVersionError(ArchiveError):
    """The archive was written by an incompatible format version."""


class MissingTensorError(ArchiveError):
    """The archive lacks a tensor the network requires."""


class UnknownTensorError(ArchiveError):
    """The archive names a tensor the network does not have."""


class ShapeMismatchError(ArchiveError):
    """An archived tensor's shape differs from the network parameter."""


def save_archive(path, tensors: dict) -> None:
    """Write named float32 arrays; insertion order is preserved on disk."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.ascontiguousarray(array, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    path.write_bytes(b"".join(chunks))


def load_archive(path) -> dict:
    """Read an archive back into an ordered {name: float32 array} mapping."""
    path = Path(path)
    blob = path.read_bytes()
    view = memoryview(blob)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise ArchiveFormatError(f"{path}: truncated archive at byte {offset}")
        piece = view[offset:offset + n]
        offset += n
        return piece

    if bytes(take(4)) != MAGIC:
        raise ArchiveFormatError(f"{path}: bad magic, not a weight archive")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ArchiveVersionError(f"{path}: archive version {version}, expected {VERSION}")

    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = data.copy()
    if offset != len(view):
        raise ArchiveFormatError(f"{path}: {len(view) - offset} trailing bytes after last tensor")
    return tensors


def network_tensors(network) -> dict:
    return {name: tensor.data for name, tensor in network.named_parameters()}


def save_weights(path, network) -> None:
    save_archive(path, network_tensors(network))


def apply_tensors(network, tensors: dict, context: str = "archive") -> None:
    params = dict(network.named_parameters())
    for name in tensors:
        if name not in params:
            raise UnknownTensorError(f"{context}: unknown tensor {name!r}")
    for name, tensor in params.items():
        if name not in tensors:
            raise MissingTensorError(f"{context}: missing tensor {name!r}")
        loaded = tensors[name]
        if tuple(loaded.shape) != tuple(tensor.data.shape):
            raise ShapeMismatchError(f"{context}: tensor {name!r} has shape {loaded.shape}, expected {tensor.data.shape}")
        tensor.data = loaded.astype(tensor.data.dtype)


def load_weights(path, network) -> None:
    apply_tensors(network, load_archive(path), context=str(path))
