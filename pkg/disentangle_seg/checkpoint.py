"""Versioned binary checkpoints of a continual run.

Layout, all integers little-endian::

    magic "DSEGCKPT" | u16 version | u32 step | u32 meta length | meta JSON
    u32 blob count | blobs | sha256 of everything before it

Each blob is ``u16 name length, name, u8 dtype length, dtype, u8 ndim,
u64 dims..., u64 byte length, bytes``.
"""

import hashlib
import json
import logging
import struct
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union

import numpy as np
import torch

from .config import ExperimentConfig, build_model
from .exceptions import CheckpointFormatError
from .protocol import ClassPartition, ContinualState
from .text_bank import PromptContext

logger = logging.getLogger(__name__)

MAGIC = b"DSEGCKPT"
VERSION = 1
HEADER = struct.Struct("<8sHII")
DIGEST_SIZE = hashlib.sha256().digest_size


@dataclass
class CheckpointPayload:
    step: int
    metadata: dict[str, Any]
    tensors: dict[str, torch.Tensor]


def _encode_blob(name: str, tensor: torch.Tensor) -> bytes:
    array = tensor.detach().cpu().contiguous().numpy()
    array = array.astype(array.dtype.newbyteorder("<"), copy=False)
    name_b = name.encode("utf-8")
    dtype_b = array.dtype.str.encode("ascii")
    parts = [
        struct.pack("<H", len(name_b)),
        name_b,
        struct.pack("<B", len(dtype_b)),
        dtype_b,
        struct.pack("<B", array.ndim),
        struct.pack(f"<{array.ndim}Q", *array.shape),
        struct.pack("<Q", array.nbytes),
        array.tobytes(),
    ]
    return b"".join(parts)


def save_checkpoint(
    state: ContinualState,
    path: Union[str, Path],
    config: ExperimentConfig,
) -> Path:
    """Serialise weights, prompt ownership and run metadata of ``state``."""
    model = state.model
    store = model.text_bank.prompts
    metadata = {
        "partition": state.partition.to_dict(),
        "config": config.explicit(),
        "class_names": {str(c): n for c, n in model.text_bank.class_names.items()},
        "prompts": {
            "classes": store.class_owners(),
            "frozen": sorted(store.frozen),
        },
    }
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    weights = model.state_dict()
    body = [HEADER.pack(MAGIC, VERSION, state.step, len(meta)), meta]
    body.append(struct.pack("<I", len(weights)))
    body.extend(_encode_blob(name, tensor) for name, tensor in weights.items())
    data = b"".join(body)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data + hashlib.sha256(data).digest())
    logger.info("saved step %d checkpoint to %s", state.step, path)
    return path


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if size < 0 or self.offset + size > len(self.data):
            raise CheckpointFormatError(self.path, self.offset, f"truncated {what}")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_blob(reader: _Reader) -> tuple[str, torch.Tensor]:
    start = reader.offset
    (name_len,) = reader.unpack("<H", "blob name length")
    name = reader.take(name_len, "blob name").decode("utf-8")
    (dtype_len,) = reader.unpack("<B", "dtype length")
    dtype_text = reader.take(dtype_len, "dtype").decode("ascii")
    try:
        dtype = np.dtype(dtype_text)
    except TypeError:
        raise CheckpointFormatError(reader.path, start, f"unknown dtype {dtype_text!r}") from None
    (ndim,) = reader.unpack("<B", "rank")
    shape = reader.unpack(f"<{ndim}Q", "shape")
    (nbytes,) = reader.unpack("<Q", "blob length")
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if nbytes != expected:
        raise CheckpointFormatError(
            reader.path, reader.offset, f"blob {name!r} holds {nbytes} bytes, shape needs {expected}"
        )
    raw = reader.take(nbytes, f"blob {name!r}")
    array = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return name, torch.from_numpy(array)


def load_checkpoint(path: Union[str, Path]) -> CheckpointPayload:
    """Verify and decode a checkpoint without building a model."""
    path = Path(path)
    data = path.read_bytes()
    source = str(path)
    if len(data) < HEADER.size + DIGEST_SIZE:
        raise CheckpointFormatError(source, len(data), "file too short")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointFormatError(source, len(body), "checksum mismatch")

    reader = _Reader(body, source)
    magic, version, step, meta_len = reader.unpack(HEADER.format, "header")
    if magic != MAGIC:
        raise CheckpointFormatError(source, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(source, len(MAGIC), f"unsupported version {version}")
    meta_offset = reader.offset
    try:
        metadata = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except ValueError:
        raise CheckpointFormatError(source, meta_offset, "metadata is not JSON") from None
    (count,) = reader.unpack("<I", "blob count")
    tensors = dict(_decode_blob(reader) for _ in range(count))
    if reader.offset != len(body):
        raise CheckpointFormatError(source, reader.offset, "trailing bytes after blobs")
    return CheckpointPayload(step, metadata, tensors)


def _floating_dtype(tensors: Mapping[str, torch.Tensor]) -> torch.dtype:
    for tensor in tensors.values():
        if tensor.is_floating_point():
            return tensor.dtype
    return torch.get_default_dtype()


def restore(path: Union[str, Path]) -> tuple[ContinualState, ExperimentConfig]:
    """Rebuild the model and state a checkpoint was written from."""
    payload = load_checkpoint(path)
    meta = payload.metadata
    try:
        config = ExperimentConfig(meta["config"])
        partition = ClassPartition.from_dict(meta["partition"])
        class_names = {int(c): n for c, n in meta["class_names"].items()}
        class_owners = [int(c) for c in meta["prompts"]["classes"]]
        frozen = list(meta["prompts"]["frozen"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(str(path), HEADER.size, f"incomplete metadata: {exc}") from None

    model = build_model(config, class_names)
    dtype = _floating_dtype(payload.tensors)
    model.to(dtype)
    bank = model.text_bank
    for class_id in class_owners:
        values = torch.zeros(bank.context_length, bank.dim, dtype=dtype)
        bank.prompts.add(PromptContext(values, class_id))
    try:
        model.load_state_dict(payload.tensors, strict=True)
    except RuntimeError as exc:
        raise CheckpointFormatError(str(path), HEADER.size, str(exc).splitlines()[0]) from None
    for key in frozen:
        bank.prompts.freeze(key)
    state = ContinualState(model, partition, step=payload.step)
    return state, config
