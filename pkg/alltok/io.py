"""Binary tensor files, checkpoints and previews.

Raw tensor: ``b"AITT"``, u8 dtype code, u8 ndim, ndim x u32 dims (little
endian), then the little-endian payload.

Checkpoint: ``b"AITK"``, u32 manifest length, manifest JSON, u32 record
count, then per record a u16 name length, the UTF-8 name and a raw tensor.
"""

import io
import json
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Tuple

import numpy as np

from alltok.exceptions import CheckpointFormatError
from alltok.utils import atomic_write_bytes

TENSOR_MAGIC = b"AITT"
CHECKPOINT_MAGIC = b"AITK"
DTYPE_CODES: Dict[int, Any] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
    4: np.dtype("<i4"),
}
BOOL_CODE = 5


def _dtype_code(array: np.ndarray) -> int:
    if array.dtype == np.bool_:
        return BOOL_CODE
    for code, dtype in DTYPE_CODES.items():
        if (array.dtype.kind, array.dtype.itemsize) == (dtype.kind, dtype.itemsize):
            return code
    raise CheckpointFormatError(f"Unsupported tensor dtype {array.dtype}")


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _dtype_code(array)
    header = TENSOR_MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    storage = np.dtype("u1") if code == BOOL_CODE else DTYPE_CODES[code]
    return header + np.ascontiguousarray(array.astype(storage, copy=False)).tobytes()


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise CheckpointFormatError(f"Unexpected end of file: wanted {size} bytes, got {len(data)}")
    return data


def read_tensor(stream: BinaryIO) -> np.ndarray:
    if _read_exact(stream, 4) != TENSOR_MAGIC:
        raise CheckpointFormatError("Missing AITT tensor magic")
    code, ndim = struct.unpack("<BB", _read_exact(stream, 2))
    if code != BOOL_CODE and code not in DTYPE_CODES:
        raise CheckpointFormatError(f"Unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim)) if ndim else ()
    storage = np.dtype("u1") if code == BOOL_CODE else DTYPE_CODES[code]
    count = int(np.prod(shape)) if shape else 1
    array = np.frombuffer(_read_exact(stream, count * storage.itemsize), dtype=storage).reshape(shape)
    array = array.astype(storage.newbyteorder("="))
    return array.astype(bool) if code == BOOL_CODE else array


def save_tensor(path: Path, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path: Path) -> np.ndarray:
    with path.open("rb") as stream:
        return read_tensor(stream)


def encode_checkpoint(records: List[Tuple[str, np.ndarray]], manifest: Dict[str, Any]) -> bytes:
    buffer = io.BytesIO()
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<I", len(manifest_bytes)))
    buffer.write(manifest_bytes)
    buffer.write(struct.pack("<I", len(records)))
    for name, array in records:
        name_bytes = name.encode("utf-8")
        buffer.write(struct.pack("<H", len(name_bytes)))
        buffer.write(name_bytes)
        buffer.write(encode_tensor(array))
    return buffer.getvalue()


def save_checkpoint(path: Path, records: List[Tuple[str, np.ndarray]], manifest: Dict[str, Any]) -> None:
    atomic_write_bytes(path, encode_checkpoint(records, manifest))


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint {path} does not exist.")
    with path.open("rb") as stream:
        if _read_exact(stream, 4) != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path} is not an alltok checkpoint")
        (manifest_length,) = struct.unpack("<I", _read_exact(stream, 4))
        manifest = json.loads(_read_exact(stream, manifest_length).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(stream, 4))
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_length,) = struct.unpack("<H", _read_exact(stream, 2))
            name = _read_exact(stream, name_length).decode("utf-8")
            tensors[name] = read_tensor(stream)
    return tensors, manifest


def write_pgm(path: Path, array: np.ndarray, low: float, high: float) -> None:
    """8-bit binary greyscale preview of a 2D array."""
    scaled = np.clip((np.asarray(array, dtype=np.float64) - low) / max(high - low, 1e-12), 0, 1)
    pixels = np.round(scaled * 255).astype(np.uint8)
    height, width = pixels.shape
    atomic_write_bytes(path, f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())
