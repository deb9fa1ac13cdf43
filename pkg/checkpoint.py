"""
Checkpoint container (little-endian):

    8s   magic  b"SSMLABCK"
    u32  format version
    u32  metadata length, then that many bytes of UTF-8 JSON
    u32  tensor count
    per tensor:
         u16 name length, name (UTF-8)
         u8  element size (4 = float32, 8 = float64)
         u8  ndim, then ndim × u32 dims
         u64 payload offset (from the start of the payload section)
         u64 payload size in bytes
    payload section: raw little-endian tensor bytes in table order

Model tensors are named by their layer path (`head.fc1.weight`); optimizer
velocities are stored as `optim.velocity.<parameter path>`.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from data import NormalizationStats
from errors import CheckpointError, ContractError, ShapeError
from nn_layers import Module
from training import SGDState

logger = logging.getLogger(__name__)

MAGIC = b"SSMLABCK"
FORMAT_VERSION = 1
OPTIM_PREFIX = "optim."

_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: Dict[str, str]
    tensors: Dict[str, np.ndarray]
    epoch: int = 0
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    rng: Dict[str, int] = field(default_factory=dict)
    input_shape: Tuple[int, ...] = ()
    stats: Optional[NormalizationStats] = None
    best_metric: Optional[float] = None
    version: int = FORMAT_VERSION

    def sgd_state(self) -> SGDState:
        return SGDState.from_state_dict(self.optimizer)


# ═══════════════════════════════════════════════════════════════════════════════
# ENCODING
# ═══════════════════════════════════════════════════════════════════════════════

def _encode(checkpoint: Checkpoint) -> bytes:
    meta = {
        "config": checkpoint.config,
        "epoch": checkpoint.epoch,
        "rng": checkpoint.rng,
        "input_shape": list(checkpoint.input_shape),
        "stats": checkpoint.stats.to_dict() if checkpoint.stats else None,
        "best_metric": checkpoint.best_metric,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    entries: List[Tuple[str, np.ndarray]] = list(checkpoint.tensors.items())
    entries += [(OPTIM_PREFIX + name, value) for name, value in checkpoint.optimizer.items()]

    table, payloads = [], []
    offset = 0
    for name, value in entries:
        value = np.asarray(value)
        if value.dtype.itemsize not in _DTYPES or value.dtype.kind != "f":
            raise ContractError(f"checkpoint tensor '{name}' has unsupported dtype {value.dtype}")
        data = np.ascontiguousarray(value, dtype=_DTYPES[value.dtype.itemsize]).tobytes()
        encoded = name.encode("utf-8")
        table.append(struct.pack("<H", len(encoded)) + encoded
                     + struct.pack("<BB", value.dtype.itemsize, value.ndim)
                     + struct.pack(f"<{value.ndim}I", *value.shape)
                     + struct.pack("<QQ", offset, len(data)))
        payloads.append(data)
        offset += len(data)

    header = MAGIC + struct.pack("<II", checkpoint.version, len(meta_bytes)) + meta_bytes
    return header + struct.pack("<I", len(entries)) + b"".join(table) + b"".join(payloads)


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode(raw: bytes, path: Path) -> Checkpoint:
    reader = _Reader(raw, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata ({e})")

    (count,) = reader.unpack("<I")
    table = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        itemsize, ndim = reader.unpack("<BB")
        if itemsize not in _DTYPES:
            raise CheckpointError(f"{path}: tensor '{name}' has unknown element size {itemsize}")
        dims = reader.unpack(f"<{ndim}I")
        offset, nbytes = reader.unpack("<QQ")
        table.append((name, _DTYPES[itemsize], dims, offset, nbytes))

    base = reader.pos
    tensors, optimizer = {}, {}
    for name, dtype, dims, offset, nbytes in table:
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{path}: tensor '{name}' size {nbytes} does not match shape {dims}")
        if base + offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for '{name}'")
        value = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=base + offset)
        value = value.reshape(dims).astype(dtype.newbyteorder("="))
        if name.startswith(OPTIM_PREFIX):
            optimizer[name[len(OPTIM_PREFIX):]] = value
        else:
            tensors[name] = value

    stats = meta.get("stats")
    return Checkpoint(
        config=meta.get("config", {}),
        tensors=tensors,
        epoch=int(meta.get("epoch", 0)),
        optimizer=optimizer,
        rng=meta.get("rng", {}),
        input_shape=tuple(meta.get("input_shape", ())),
        stats=NormalizationStats.from_dict(stats) if stats else None,
        best_metric=meta.get("best_metric"),
        version=version,
    )


# ═══════════════════════════════════════════════════════════════════════════════
# FILE API
# ═══════════════════════════════════════════════════════════════════════════════

def write_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    """Write to a temporary sibling, then rename into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(_encode(checkpoint))
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"cannot write checkpoint {path}: {e}")
    logger.debug("wrote checkpoint %s (%d tensors)", path, len(checkpoint.tensors))


def save_checkpoint(path: Union[str, Path], model: Module, state: Optional[SGDState] = None,
                    config: Optional[Dict[str, str]] = None, **meta) -> Checkpoint:
    """
    Save model parameters and buffers, optimizer velocities and metadata.

    `meta` may carry epoch, rng, input_shape, stats and best_metric.
    """
    checkpoint = Checkpoint(
        config=dict(config or {}),
        tensors=model.state_dict(),
        optimizer=state.state_dict() if state is not None else {},
        **meta,
    )
    write_checkpoint(path, checkpoint)
    return checkpoint


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    return _decode(raw, path)


def restore_model(model: Module, checkpoint: Checkpoint) -> Module:
    """Load the checkpoint tensors into `model`; mismatches become CheckpointError naming the shapes."""
    try:
        model.load_state_dict(checkpoint.tensors)
    except (ContractError, ShapeError) as e:
        raise CheckpointError(f"checkpoint does not fit the model: {e}")
    return model
