"""Self-describing checkpoint container: named arrays plus a JSON header.

Layout: 8-byte magic with version, little-endian uint32 header length,
UTF-8 JSON header, then the raw little-endian array payloads in header
order. The header carries per-array dtype, shape, and CRC32, so a
truncated or corrupted file is reported with the offending array name.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

_MAGIC = b"NNCKPT01"
_LEN = struct.Struct("<I")

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


def save_checkpoint(
    path: str | Path,
    kind: str,
    arrays: dict[str, np.ndarray],
    meta: dict,
) -> None:
    """Write arrays and metadata atomically to ``path``."""
    entries = []
    payloads = []
    for name, array in arrays.items():
        array = np.ascontiguousarray(array)
        dtype_name = array.dtype.name
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"array {name!r} has unsupported dtype {dtype_name}")
        blob = array.astype(_DTYPES[dtype_name]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(array.shape),
                "crc32": zlib.crc32(blob),
            }
        )
        payloads.append(blob)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries}).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(
    path: str | Path,
    expect_kind: str | None = None,
) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; returns (arrays, meta).

    Raises CheckpointError on bad magic, kind mismatch, truncation (with
    the first missing array named), or checksum mismatch.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint file not found: {path}") from None
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container (bad magic)")
    offset = len(_MAGIC)
    if len(blob) < offset + _LEN.size:
        raise CheckpointError(f"{path} is truncated inside the header length")
    (header_len,) = _LEN.unpack_from(blob, offset)
    offset += _LEN.size
    if len(blob) < offset + header_len:
        raise CheckpointError(f"{path} is truncated inside the JSON header")
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt JSON header: {exc}") from None
    offset += header_len

    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path} holds a {kind!r} checkpoint, expected {expect_kind!r}")

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        name = entry["name"]
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: array {name!r} has unsupported dtype {entry['dtype']}")
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * np.dtype(dtype).itemsize
        if len(blob) < offset + nbytes:
            raise CheckpointError(f"{path} is truncated: array {name!r} is missing or incomplete")
        raw = blob[offset : offset + nbytes]
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch on array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
        offset += nbytes
    return arrays, header.get("meta", {})
