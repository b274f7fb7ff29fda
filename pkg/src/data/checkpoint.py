"""
Checkpoint Persistence

Single-file, little-endian checkpoint container. Byte layout:

    magic            8 bytes  b"TVLMCKPT"
    version          <H
    header length    <I
    header           canonical JSON (sorted keys, no whitespace):
                     config, seed, step, has_gates, has_lagrangian, has_projection
    tensor count     <I
    tensor records   <H name length, UTF-8 name, <B rank, <I per extent, <f8 payload
    gate record      (if has_gates) <I JSON length, JSON {stretch_lo, stretch_hi,
                     threshold}, then one tensor record 'gates.logit'
    lagrangian       (if has_lagrangian) <I JSON length, JSON list of
                     {group, target_size, active}, then <f8 lam1, <f8 lam2 per entry
    projection       (if has_projection) one tensor record 'projection.weight'
    checksum         32-byte SHA-256 of every preceding byte

Tensors are written in canonical parameter order, so saving the same state
twice produces identical bytes. Files are written to a temporary sibling and
renamed into place.
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np

from ..errors import (
    BadMagicError,
    CheckpointError,
    CheckpointIOError,
    CheckpointShapeError,
    ChecksumError,
    VersionMismatchError,
)
from ..models.config import VlmConfig, parameter_shapes
from ..models.trimodel import VlmModel
from ..numcore import tensor as tc
from ..training.l0prune import GateSet, LagrangianState, iter_units

logger = logging.getLogger(__name__)

MAGIC = b"TVLMCKPT"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 32

Controllers = Dict[str, LagrangianState]


class Checkpoint(NamedTuple):
    model: VlmModel
    gates: Optional[GateSet]
    lagrangian: Optional[Controllers]
    seed: int
    step: int


def _canonical_json(value) -> bytes:
    return json.dumps(value, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensor_record(name: str, data: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", data.ndim)]
    parts.extend(struct.pack("<I", extent) for extent in data.shape)
    parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(parts)


def _json_record(value) -> bytes:
    body = _canonical_json(value)
    return struct.pack("<I", len(body)) + body


def encode(
    model: VlmModel,
    gates: Optional[GateSet] = None,
    lagrangian: Union[None, LagrangianState, Mapping[str, LagrangianState]] = None,
    seed: int = 0,
    step: int = 0,
) -> bytes:
    """Checkpoint bytes for a model and its optional pruning state."""
    if isinstance(lagrangian, LagrangianState):
        lagrangian = {lagrangian.group: lagrangian}
    header = {
        "config": model.config.to_dict(),
        "seed": int(seed),
        "step": int(step),
        "has_gates": gates is not None,
        "has_lagrangian": lagrangian is not None,
        "has_projection": model.projection is not None,
    }
    parts: List[bytes] = [MAGIC, struct.pack("<H", FORMAT_VERSION), _json_record(header)]
    parts.append(struct.pack("<I", len(model.params)))
    parts.extend(_tensor_record(name, p.data) for name, p in model.params.items())

    if gates is not None:
        parts.append(_json_record({
            "stretch_lo": gates.stretch_lo,
            "stretch_hi": gates.stretch_hi,
            "threshold": gates.threshold,
        }))
        parts.append(_tensor_record("gates.logit", gates.gate_logit.data))

    if lagrangian is not None:
        groups = sorted(lagrangian)
        parts.append(_json_record([
            {"group": g, "target_size": lagrangian[g].target_size, "active": lagrangian[g].active}
            for g in groups
        ]))
        for g in groups:
            lam1, lam2 = lagrangian[g].values()
            parts.append(struct.pack("<dd", lam1, lam2))

    if model.projection is not None:
        parts.append(_tensor_record("projection.weight", model.projection.data))

    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save(
    path: Union[str, Path],
    model: VlmModel,
    gates: Optional[GateSet] = None,
    lagrangian: Union[None, LagrangianState, Mapping[str, LagrangianState]] = None,
    seed: int = 0,
    step: int = 0,
) -> Path:
    """
    Write a checkpoint atomically (temporary file, then rename).

    Raises:
        CheckpointIOError: If the file cannot be written
    """
    path = Path(path)
    payload = encode(model, gates, lagrangian, seed, step)
    tmp_name = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", delete=False) as tmp:
            tmp_name = tmp.name
            tmp.write(payload)
            tmp.flush()
            os.fsync(tmp.fileno())
        os.replace(tmp_name, path)
    except OSError as e:
        if tmp_name and os.path.exists(tmp_name):
            os.unlink(tmp_name)
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise CheckpointIOError(path, str(e)) from e

    logger.info(f"Checkpoint written: {path} ({len(payload):,} bytes)")
    return path


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError("record runs past the end of the payload")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (length,) = self.unpack("<I")
        return json.loads(self.take(length).decode("utf-8"))

    def tensor(self) -> Tuple[str, np.ndarray]:
        (name_len,) = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        (rank,) = self.unpack("<B")
        shape = tuple(self.unpack(f"<{rank}I")) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, data


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        BadMagicError: Unknown magic bytes
        VersionMismatchError: Unsupported format version
        ChecksumError: Corrupt or truncated payload
        CheckpointShapeError: A tensor disagrees with the embedded config
    """
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{source}: not a checkpoint (magic {data[:len(MAGIC)]!r})")
    if len(data) < len(MAGIC) + 2:
        raise ChecksumError(f"{source}: truncated before the version field")
    (version,) = struct.unpack("<H", data[len(MAGIC):len(MAGIC) + 2])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    body, stored = data[:-CHECKSUM_BYTES], data[-CHECKSUM_BYTES:]
    if len(data) < len(MAGIC) + 2 + CHECKSUM_BYTES or hashlib.sha256(body).digest() != stored:
        raise ChecksumError(f"{source}: checksum mismatch (file corrupt or truncated)")

    reader = _Reader(body, len(MAGIC) + 2)
    header = reader.json()
    config = VlmConfig.from_dict(header["config"])
    expected = parameter_shapes(config)

    (count,) = reader.unpack("<I")
    if count != len(expected):
        raise CheckpointShapeError(f"{source}: {count} tensors stored, config implies {len(expected)}")
    arrays = {}
    for _ in range(count):
        name, array = reader.tensor()
        if name not in expected:
            raise CheckpointShapeError(f"{source}: unexpected tensor '{name}'")
        if name in arrays:
            raise CheckpointShapeError(f"{source}: tensor '{name}' stored twice")
        if array.shape != tuple(expected[name]):
            raise CheckpointShapeError(
                f"{source}: tensor {name} has shape {array.shape}, config implies {tuple(expected[name])}"
            )
        arrays[name] = array

    gates = None
    if header["has_gates"]:
        meta = reader.json()
        name, logits = reader.tensor()
        units = list(iter_units(config))
        if name != "gates.logit" or logits.shape != (len(units),):
            raise CheckpointShapeError(f"{source}: gate record {name} {logits.shape} for {len(units)} units")
        gates = GateSet(units, tc.parameter(logits, "gates.logit"),
                        meta["stretch_lo"], meta["stretch_hi"], meta["threshold"])

    lagrangian = None
    if header["has_lagrangian"]:
        lagrangian = {}
        for entry in reader.json():
            lam1, lam2 = reader.unpack("<dd")
            lagrangian[entry["group"]] = LagrangianState.create(
                entry["target_size"], lam1, lam2, entry["group"], entry["active"]
            )

    projection = None
    if header["has_projection"]:
        name, array = reader.tensor()
        d = config.model_dim
        if array.shape != (d, d):
            raise CheckpointShapeError(f"{source}: projection has shape {array.shape}, expected {(d, d)}")
        projection = tc.parameter(array, name)

    if reader.offset != len(body):
        raise CheckpointShapeError(f"{source}: {len(body) - reader.offset} unexpected bytes after the last record")

    params = {name: tc.parameter(arrays[name], name) for name in expected}
    model = VlmModel(config, params, gates, projection)
    return Checkpoint(model, gates, lagrangian, int(header["seed"]), int(header["step"]))


def load(path: Union[str, Path]) -> Checkpoint:
    """
    Read and validate a checkpoint file.

    Raises:
        CheckpointIOError: If the file cannot be read
        CheckpointError: Subclass naming the decoding failure
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        logger.error(f"Failed to read checkpoint {path}: {e}")
        raise CheckpointIOError(path, str(e)) from e
    checkpoint = decode(data, str(path))
    logger.info(f"Loaded checkpoint {path}: layers {checkpoint.model.config.layer_counts}, step {checkpoint.step}")
    return checkpoint
