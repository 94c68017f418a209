"""
manage_checkpoint.py
Named-tensor checkpoint container and the manager of a run's checkpoint directory
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from adaptors.lowrank import LowRankAdaptor
from models.backbone import LMAModel, MultimodalModel
from utils.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"LMACK1"
CHECKPOINT_SUFFIX = ".lmack"
FINAL_NAME = "final"
RNG_ALGORITHM = "PCG64"

KIND_FLOAT64 = 0
KIND_MASK = 1
KIND_BYTES = 2


@dataclass
class CheckpointData:
    """Decoded checkpoint: float64 tensors, boolean masks and opaque byte blobs by name"""
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    blobs: Dict[str, bytes] = field(default_factory=dict)

    def json_blob(self, name: str) -> Any:
        if name not in self.blobs:
            raise CheckpointError(f"checkpoint has no {name!r} entry")
        return json.loads(self.blobs[name].decode("utf-8"))

    def put_json(self, name: str, value: Any) -> None:
        self.blobs[name] = json.dumps(value, sort_keys=True).encode("utf-8")

    def prefixed(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under `prefix/`, with the prefix stripped"""
        start = len(prefix) + 1
        return {k[start:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}


def encode(data: CheckpointData) -> bytes:
    """
    Serialize to the container layout.

    Header: magic, entry count. Each entry: name length, name, kind byte,
    rank, extents (little-endian int32), then the payload: little-endian
    float64 values, one byte per mask value, or raw bytes.
    """
    entries = (
        [(n, KIND_FLOAT64, a) for n, a in sorted(data.tensors.items())]
        + [(n, KIND_MASK, a) for n, a in sorted(data.masks.items())]
        + [(n, KIND_BYTES, b) for n, b in sorted(data.blobs.items())]
    )
    parts = [MAGIC, struct.pack("<i", len(entries))]
    for name, kind, value in entries:
        encoded = name.encode("utf-8")
        if kind == KIND_FLOAT64:
            array = np.ascontiguousarray(value, dtype="<f8")
            payload = array.tobytes()
            shape = array.shape
        elif kind == KIND_MASK:
            array = np.ascontiguousarray(value, dtype=np.uint8)
            payload = array.tobytes()
            shape = array.shape
        else:
            payload = bytes(value)
            shape = (len(payload),)
        parts.append(struct.pack("<i", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<Bi", kind, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}i", *shape))
        parts.append(payload)
    return b"".join(parts)


def decode(raw: bytes, source: str = "<bytes>") -> CheckpointData:
    data = CheckpointData()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    offset = len(MAGIC)
    try:
        (count,) = struct.unpack_from("<i", raw, offset)
        offset += 4
        for _ in range(count):
            (name_len,) = struct.unpack_from("<i", raw, offset)
            offset += 4
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            kind, ndim = struct.unpack_from("<Bi", raw, offset)
            offset += 5
            shape = struct.unpack_from(f"<{ndim}i", raw, offset)
            offset += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if kind not in (KIND_FLOAT64, KIND_MASK, KIND_BYTES):
                raise CheckpointError(f"{source}: entry {name!r} has unknown kind {kind} at byte offset {offset}")
            size = 8 * n if kind == KIND_FLOAT64 else n
            if n < 0 or offset + size > len(raw):
                raise CheckpointError(f"{source}: entry {name!r} truncated at byte offset {offset}")
            if kind == KIND_FLOAT64:
                array = np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
                data.tensors[name] = array.reshape(shape).astype(np.float64)
            elif kind == KIND_MASK:
                array = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset)
                data.masks[name] = array.reshape(shape).astype(bool)
            else:
                data.blobs[name] = raw[offset:offset + size]
            offset += size
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{source}: malformed entry near byte offset {offset}: {e}") from e
    if offset != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - offset} trailing bytes at byte offset {offset}")
    return data


def model_state(model: MultimodalModel, data: CheckpointData) -> None:
    """Add every named parameter and adaptor mask of `model` to `data`"""
    for name, tensor in model.parameters().items():
        data.tensors[f"param/{name}"] = tensor.data
    for _, adaptor in model.adaptor_entries():
        data.masks[f"mask/{adaptor.name}"] = adaptor.mask


def load_model_state(model: MultimodalModel, data: CheckpointData) -> None:
    """
    Overwrite `model` with checkpointed values.

    Adaptors are rebuilt from their stored arrays, so compacted ranks come back as saved.
    """
    if isinstance(model, LMAModel):
        for layer in model.stack.layers:
            for m, adaptor in list(layer.adaptors.items()):
                name = adaptor.name
                try:
                    layer.adaptors[m] = LowRankAdaptor.from_arrays(
                        layer.geometry,
                        data.tensors[f"param/{name}.P"].copy(),
                        data.tensors[f"param/{name}.Lambda"].copy(),
                        data.tensors[f"param/{name}.Q"].copy(),
                        data.masks[f"mask/{name}"],
                        name=name,
                    )
                except KeyError as e:
                    raise CheckpointError(f"checkpoint misses adaptor entry {e}") from e
    for name, tensor in model.parameters().items():
        key = f"param/{name}"
        if key not in data.tensors:
            raise CheckpointError(f"checkpoint misses parameter {name!r}")
        stored = data.tensors[key]
        if stored.shape != tensor.shape:
            raise CheckpointError(f"{name}: checkpoint shape {stored.shape} != model shape {tensor.shape}")
        tensor.data = stored.copy()


def rng_state(rng: np.random.Generator, data: CheckpointData) -> None:
    state = rng.bit_generator.state
    if state["bit_generator"] != RNG_ALGORITHM:
        raise CheckpointError(f"unsupported RNG {state['bit_generator']}")
    data.put_json(f"rng/{RNG_ALGORITHM}", state)


def restore_rng(data: CheckpointData) -> np.random.Generator:
    bit_generator = np.random.PCG64()
    bit_generator.state = data.json_blob(f"rng/{RNG_ALGORITHM}")
    return np.random.Generator(bit_generator)


class CheckpointManager:
    """Manage the checkpoint files of one run directory"""

    def __init__(self, directory: str):
        """
        Initialize CheckpointManager.

        Args:
            directory: the run's checkpoint directory (created on first save)
        """
        self.directory = directory

    def path_for(self, name: str) -> Path:
        return Path(self.directory) / f"{name}{CHECKPOINT_SUFFIX}"

    def save(self, name: str, data: CheckpointData) -> Path:
        os.makedirs(self.directory, exist_ok=True)
        path = self.path_for(name)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(encode(data))
        os.replace(tmp, path)
        logger.info("Saved checkpoint %s", path)
        return path

    @staticmethod
    def load(path: str) -> CheckpointData:
        """
        Load a checkpoint file.

        Raises:
            FileNotFoundError: If the file doesn't exist
            CheckpointError: If the container is malformed
        """
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"Checkpoint not found at {path}. "
                "Please run `train` first to create it."
            )
        return decode(Path(path).read_bytes(), source=str(path))

    def list_checkpoints(self) -> List[Path]:
        if not os.path.isdir(self.directory):
            return []
        return sorted(Path(self.directory).glob(f"*{CHECKPOINT_SUFFIX}"))

    def latest(self) -> Optional[Path]:
        """The final checkpoint if present, else the highest-numbered epoch checkpoint"""
        final = self.path_for(FINAL_NAME)
        if final.exists():
            return final
        epochs = [p for p in self.list_checkpoints() if p.stem.startswith("epoch_")]
        return epochs[-1] if epochs else None
