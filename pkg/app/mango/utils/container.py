"""
container.py

Reader/writer for the "MNGO" tensor container shared by checkpoints,
datasets, compressors and sample dumps.

Layout (all little-endian):
    4 bytes   magic b"MNGO"
    uint32    format version (1)
    uint64    header length in bytes
    header    UTF-8 JSON: {"kind": ..., ..., "tensors": [{name, shape, offset}]}
    payload   raw float64 tensors; offsets are relative to the payload start
"""

import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np

from mango.errors import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"MNGO"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPE = np.dtype("<f8")


def encode_container(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize a header and named float64 tensors to bytes."""
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        array = np.ascontiguousarray(value, dtype=_DTYPE)
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        raw = array.tobytes()
        chunks.append(raw)
        offset += len(raw)
    document = dict(header)
    document["tensors"] = entries
    header_bytes = json.dumps(document, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)


def decode_container(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse container bytes; every structural problem raises FormatError."""
    if len(blob) < _PREFIX.size:
        raise FormatError("file shorter than the fixed prefix", len(blob))
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    header_end = _PREFIX.size + header_len
    if header_end > len(blob):
        raise FormatError(f"header of {header_len} bytes runs past end of file", _PREFIX.size)
    try:
        header = json.loads(blob[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}", _PREFIX.size) from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise FormatError("header has no tensor table", _PREFIX.size)

    tensors = {}
    payload = memoryview(blob)[header_end:]
    for entry in header["tensors"]:
        try:
            name, shape, offset = entry["name"], tuple(int(s) for s in entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"malformed tensor entry {entry!r}", _PREFIX.size) from None
        if any(s < 0 for s in shape) or offset < 0:
            raise FormatError(f"tensor {name!r} has a negative shape or offset", _PREFIX.size)
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(payload):
            raise FormatError(f"tensor {name!r} is truncated", header_end + offset)
        tensors[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPE).reshape(shape).astype(np.float64)
    header.pop("tensors")
    return header, tensors


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> str:
    """Write a container and return the sha256 of its bytes."""
    blob = encode_container(header, tensors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    logger.info("Wrote %s container %s (%d bytes, sha256 %s)", header.get("kind", "?"), path, len(blob), digest[:12])
    return digest


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container, optionally insisting on its `kind` tag."""
    header, tensors = decode_container(Path(path).read_bytes())
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} container, found {header.get('kind')!r}", _PREFIX.size)
    return header, tensors


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
