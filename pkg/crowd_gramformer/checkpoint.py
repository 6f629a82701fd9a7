"""
GRMF checkpoint format

    magic "GRMF" | version u16 | tensor count u32 |
    per tensor: name length u16, UTF-8 name, rank u8, dims u32 each,
                payload little-endian float64
"""
import struct
from collections import OrderedDict
from typing import Dict

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"GRMF"
VERSION = 1


def encode_checkpoint(arrays: Dict[str, np.ndarray]) -> bytes:
    """Serialize name -> array in insertion order"""
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array, dtype=np.float64)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


class _Reader:
    """Bounds-checked cursor over checkpoint bytes"""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int, where: str) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise CheckpointError(f"unexpected end of file at {where}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, where: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), where))


def decode_checkpoint(payload: bytes) -> Dict[str, np.ndarray]:
    """Parse checkpoint bytes into name -> array"""
    reader = _Reader(payload)
    if reader.take(len(MAGIC), "header") != MAGIC:
        raise CheckpointError("bad magic: not a GRMF checkpoint")
    version, count = reader.unpack("<HI", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")

    arrays: Dict[str, np.ndarray] = OrderedDict()
    for position in range(count):
        (name_length,) = reader.unpack("<H", f"tensor #{position}")
        try:
            name = reader.take(name_length, f"tensor #{position}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor #{position} has a name that is not UTF-8")
        where = f"tensor {name}"
        (rank,) = reader.unpack("<B", where)
        dims = reader.unpack(f"<{rank}I", where) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        raw = reader.take(8 * size, where)
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)

    if reader.offset != len(payload):
        raise CheckpointError(f"{len(payload) - reader.offset} trailing bytes after the last tensor")
    return arrays


def save_checkpoint(path: str, model):
    """Write every model parameter"""
    with open(path, "wb") as handle:
        handle.write(encode_checkpoint(model.state_arrays()))


def read_checkpoint(path: str) -> Dict[str, np.ndarray]:
    try:
        with open(path, "rb") as handle:
            payload = handle.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    return decode_checkpoint(payload)


def load_checkpoint(path: str, model):
    """Load a checkpoint into a model whose config must match tensor for tensor"""
    arrays = read_checkpoint(path)
    expected = model.parameters()
    for name, array in arrays.items():
        if name not in expected:
            raise CheckpointError(f"unknown tensor '{name}' in checkpoint")
        if array.shape != expected[name].shape:
            raise CheckpointError(
                f"shape mismatch for tensor '{name}': checkpoint {array.shape} vs model {expected[name].shape}")
    missing = [name for name in expected if name not in arrays]
    if missing:
        raise CheckpointError(f"missing tensor '{missing[0]}' in checkpoint ({len(missing)} missing)")
    model.load_arrays(arrays)
    return model
