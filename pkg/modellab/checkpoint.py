"""Binary model checkpoints.

Layout, all integers little-endian u32:

    b"MLAB"  version  json_length  json_bytes  count  record*

where the JSON blob holds {"config": ..., "meta": ...} with sorted keys and
each record is

    name_length  name_bytes  rank  extent*rank  float32 payload

Records are written in name order, so the same model always produces the
same bytes.
"""
import json
import logging
import pathlib
import struct
from typing import Any

import numpy as np

from modellab.lib import utils
from modellab.mllm import MllmModel, ModelConfig, init_model
from modellab.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"MLAB"
VERSION = 1

_U32 = struct.Struct("<I")


class CheckpointVersionError(ValueError):
    """The checkpoint was written in a format version we cannot read."""

    def __init__(self, expected: int, found: int) -> None:
        super().__init__(
            f"Unsupported checkpoint version: expected {expected}, "
            f"found {found}")
        self.expected = expected
        self.found = found


def encode(model: MllmModel, meta: dict[str, Any] | None = None) -> bytes:
    """Serialise a model.

    :param MllmModel model: the model to store
    :param dict meta: JSON-friendly run metadata (seed, variant, stage)
    :returns: the checkpoint bytes
    :rtype: bytes
    """
    blob = json.dumps(
        {"config": model.cfg.to_dict(), "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    named = model.named()
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(blob)), blob,
              _U32.pack(len(named))]

    for name, tensor in named.items():
        raw_name = name.encode("utf-8")
        chunks.append(_U32.pack(len(raw_name)))
        chunks.append(raw_name)
        chunks.append(_U32.pack(tensor.data.ndim))
        chunks.extend(_U32.pack(extent) for extent in tensor.shape)
        chunks.append(tensor.data.astype("<f4").tobytes())

    return b"".join(chunks)


class _Reader:
    """Cursor over checkpoint bytes that fails loudly on truncation."""

    def __init__(self, payload: bytes) -> None:
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise ValueError(
                f"Truncated checkpoint: wanted {size} bytes at offset "
                f"{self.offset}, file has {len(self.payload)}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]


def decode(payload: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Parse checkpoint bytes.

    :returns: the JSON blob and the arrays by name
    :raises CheckpointVersionError: on an unknown version
    :raises ValueError: on a bad magic, truncation or trailing bytes
    """
    reader = _Reader(payload)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"Not a modellab checkpoint (magic {magic!r})")

    version = reader.u32()
    if version != VERSION:
        raise CheckpointVersionError(VERSION, version)

    blob = json.loads(reader.take(reader.u32()).decode("utf-8"))

    arrays: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) * 4
        arrays[name] = np.frombuffer(
            reader.take(size), dtype="<f4").reshape(shape).astype(np.float32)

    if reader.offset != len(payload):
        raise ValueError(
            f"Trailing bytes after checkpoint records: "
            f"{len(payload) - reader.offset}")

    return blob, arrays


def save(
    filepath: pathlib.Path,
    model: MllmModel,
    meta: dict[str, Any] | None = None,
) -> None:
    """Write a checkpoint atomically."""
    utils.atomic_write(filepath, encode(model, meta))
    logger.info("Wrote checkpoint %s", filepath)


def load(filepath: pathlib.Path) -> tuple[MllmModel, dict[str, Any]]:
    """Rebuild a model from a checkpoint.

    :returns: the model and the stored metadata
    :raises CheckpointVersionError: on an unknown version
    :raises ValueError: if the records do not match the stored config
    """
    blob, arrays = decode(pathlib.Path(filepath).read_bytes())
    cfg = ModelConfig.from_dict(blob["config"])
    model = init_model(cfg, seed=0)

    named = model.named()
    if set(named) != set(arrays):
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        raise ValueError(
            f"Checkpoint does not match its config. Missing: {missing}, "
            f"unexpected: {extra}")

    for name, tensor in named.items():
        if arrays[name].shape != tensor.shape:
            raise ValueError(
                f"Checkpoint tensor {name} has shape {arrays[name].shape}, "
                f"the config needs {tensor.shape}")
        # goes through Tensor so non-finite payloads are rejected
        tensor.data = Tensor(arrays[name], name=name).data

    return model, blob.get("meta", {})
