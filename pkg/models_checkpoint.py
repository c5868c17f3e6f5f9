"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MGAN" | u16 version | u32 len | metadata JSON | u32 count | tensor records | u32 CRC32

Each tensor record is ``u32 name length | name (utf-8) | u32 rank | rank x u32 dims |
float32 data``. The CRC covers every byte before it. Metadata JSON is written with
sorted keys and no whitespace, so equal checkpoints serialize to equal bytes.
"""
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from models_networks import AdamState, ModelParams, roles_for
from models_schemas import (
    DiscriminatorConfig,
    Direction,
    GeneratorConfig,
    LossHistory,
    Task,
    TrainConfig,
)
from services_autodiff import DTYPE

logger = logging.getLogger(__name__)

MAGIC = b"MGAN"
FORMAT_VERSION = 1
MAX_RANK = 8

_HEADER = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")
_MIN_SIZE = _HEADER.size + _U32.size + _U32.size


class CheckpointError(ValueError):
    """Base class for checkpoint problems."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic, bad length, bad checksum or undecodable contents."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class TaskMismatchError(CheckpointError):
    """Checkpoint was trained for a different task or direction."""


@dataclass
class Checkpoint:
    """Everything a run produced: parameters, optimizer state and metadata."""
    config: TrainConfig
    models: Dict[str, ModelParams]
    optimizers: Dict[str, AdamState] = field(default_factory=dict)
    history: LossHistory = field(default_factory=LossHistory)
    format_version: int = FORMAT_VERSION

    @property
    def task(self) -> Task:
        return self.config.task

    @property
    def image_size(self) -> int:
        return self.config.image_size

    @property
    def data_seed(self) -> int:
        return self.config.split.seed if self.config.split is not None else self.config.seed

    @property
    def epochs_trained(self) -> int:
        return len(self.history)

    def require_task(self, task: Task) -> "Checkpoint":
        if self.task != Task(task):
            raise TaskMismatchError(f"Checkpoint was trained for {self.task.value}, not {Task(task).value}")
        return self

    def generator(self, direction: Direction = Direction.A2B) -> ModelParams:
        """Generator for image->mask (a2b) or, on CycleGAN checkpoints, mask->image (b2a)."""
        direction = Direction(direction)
        if self.task == Task.CGAN:
            if direction != Direction.A2B:
                raise TaskMismatchError("Only CycleGAN checkpoints carry a mask->image (b2a) generator")
            return self.models["generator"]
        return self.models["gen_ab" if direction == Direction.A2B else "gen_ba"]


# ---------- Encoding ----------

def _metadata(ckpt: Checkpoint) -> Dict:
    return {
        "task": ckpt.task.value,
        "config": ckpt.config.model_dump(mode="json"),
        "history": ckpt.history.model_dump(mode="json"),
        "data_seed": ckpt.data_seed,
        "image_size": ckpt.image_size,
        "models": {
            role: {"kind": params.kind, "config": params.config.model_dump(mode="json")}
            for role, params in ckpt.models.items()
        },
        "optimizers": {role: {"t": state.t} for role, state in ckpt.optimizers.items()},
    }


def _tensor_records(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    records = []
    for role, params in ckpt.models.items():
        records += [(f"model/{role}/{name}", t.data) for name, t in params.items()]
    for role, state in ckpt.optimizers.items():
        records += [(f"adam/{role}/m/{name}", array) for name, array in state.m.items()]
        records += [(f"adam/{role}/v/{name}", array) for name, array in state.v.items()]
    return records


def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    encoded_name = name.encode("utf-8")
    parts = [_U32.pack(len(encoded_name)), encoded_name, _U32.pack(array.ndim)]
    parts.append(np.asarray(array.shape, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(_metadata(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    records = _tensor_records(ckpt)
    body = b"".join(
        [_HEADER.pack(MAGIC, ckpt.format_version, len(meta)), meta, _U32.pack(len(records))]
        + [_encode_tensor(name, array) for name, array in records]
    )
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write atomically: a crash mid-write never leaves a half file at ``path``."""
    target = Path(path)
    payload = encode_checkpoint(ckpt)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, target)
    logger.info(f"Saved {ckpt.task.value} checkpoint ({len(payload)} bytes, {ckpt.epochs_trained} epochs) to {target}")
    return target


# ---------- Decoding ----------

class _Reader:
    def __init__(self, data: bytes, offset: int, end: int):
        self.data, self.offset, self.end = data, offset, end

    def take(self, n: int) -> bytes:
        if n < 0 or self.offset + n > self.end:
            raise CorruptCheckpointError("Checkpoint ends inside a record")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]


def _decode_tensors(reader: _Reader) -> Dict[str, np.ndarray]:
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        if rank > MAX_RANK:
            raise CorruptCheckpointError(f"Tensor {name} has implausible rank {rank}")
        shape = tuple(int(d) for d in np.frombuffer(reader.take(4 * rank), dtype="<u4"))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").astype(DTYPE).reshape(shape)
        if name in tensors:
            raise CorruptCheckpointError(f"Duplicate tensor record {name}")
        tensors[name] = data
    if reader.offset != reader.end:
        raise CorruptCheckpointError(f"{reader.end - reader.offset} unexpected bytes after the tensor records")
    return tensors


def _group(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {name[len(prefix):]: array for name, array in tensors.items() if name.startswith(prefix)}


def _build(meta: Dict, tensors: Dict[str, np.ndarray], version: int) -> Checkpoint:
    config = TrainConfig.model_validate(meta["config"])
    if meta["task"] != config.task.value or set(meta["models"]) != set(roles_for(config.task)):
        raise CorruptCheckpointError("Checkpoint metadata is inconsistent with its task")

    models: Dict[str, ModelParams] = {}
    for role in roles_for(config.task):
        entry = meta["models"][role]
        config_type = GeneratorConfig if entry["kind"] == "generator" else DiscriminatorConfig
        models[role] = ModelParams.from_arrays(
            entry["kind"], config_type.model_validate(entry["config"]), _group(tensors, f"model/{role}/")
        )

    optimizers: Dict[str, AdamState] = {}
    for role in roles_for(config.task):
        if role not in meta["optimizers"]:
            continue
        optimizers[role] = AdamState(
            m={k: v.copy() for k, v in _group(tensors, f"adam/{role}/m/").items()},
            v={k: v.copy() for k, v in _group(tensors, f"adam/{role}/v/").items()},
            t=int(meta["optimizers"][role]["t"]),
        )

    return Checkpoint(
        config=config,
        models=models,
        optimizers=optimizers,
        history=LossHistory.model_validate(meta["history"]),
        format_version=version,
    )


def decode_checkpoint(data: bytes, expected_task: Optional[Task] = None) -> Checkpoint:
    if len(data) < _MIN_SIZE:
        raise CorruptCheckpointError(f"Checkpoint is truncated ({len(data)} bytes)")
    magic, version, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"Bad magic bytes {magic!r}")

    body_end = len(data) - _U32.size
    stored_crc = _U32.unpack_from(data, body_end)[0]
    if zlib.crc32(data[:body_end]) & 0xFFFFFFFF != stored_crc:
        raise CorruptCheckpointError("Checksum mismatch")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"Checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")

    reader = _Reader(data, _HEADER.size, body_end)
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
        ckpt = _build(meta, _decode_tensors(reader), version)
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise CorruptCheckpointError(f"Undecodable checkpoint contents: {e}") from e

    if expected_task is not None:
        ckpt.require_task(expected_task)
    return ckpt


def load_checkpoint(path: Union[str, Path], expected_task: Optional[Task] = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e.strerror or e}") from e
    ckpt = decode_checkpoint(data, expected_task)
    logger.info(f"Loaded {ckpt.task.value} checkpoint from {path} ({ckpt.epochs_trained} epochs)")
    return ckpt
