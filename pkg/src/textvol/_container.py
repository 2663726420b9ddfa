"""Binary container shared by volume, target-cache, feature-cache, and model files.

Byte layout (all integers little-endian):

* 64-byte header: 8-byte magic ``b"TEXTVOL\\0"``, 8-byte ASCII kind tag
  (space-padded), uint32 format version (currently 1), 44 zero bytes.
* uint32 byte length of the metadata block, then that many bytes of UTF-8
  JSON (object with at least an ``"arrays"`` list describing the payload).
* Raw array payloads, concatenated in ``"arrays"`` order, each exactly
  ``prod(shape) * itemsize`` bytes, little-endian.

The JSON metadata is serialized with sorted keys and no whitespace so that
identical inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"TEXTVOL\x00"
HEADER_SIZE = 64
VERSION = 1

_ALLOWED_DTYPES = ("<f4", "<f8", "<i4", "<i8")


class ContainerError(ValueError):
    """Raised for malformed headers, dtype mismatches, or truncated payloads."""


def _encode_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(
    path: str | Path,
    kind: str,
    meta: dict,
    arrays: list[tuple[str, np.ndarray, str]],
) -> None:
    """Write ``arrays`` (list of (name, values, dtype tag)) under ``kind``."""
    if len(kind) > 8:
        raise ValueError(f"kind tag too long: {kind!r}")
    descriptors = []
    blobs = []
    for name, values, dtype in arrays:
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype tag {dtype!r}")
        arr = np.ascontiguousarray(values, dtype=np.dtype(dtype))
        descriptors.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    full_meta = dict(meta)
    full_meta["arrays"] = descriptors
    meta_bytes = _encode_meta(full_meta)

    header = bytearray(HEADER_SIZE)
    header[0:8] = MAGIC
    header[8:16] = kind.encode("ascii").ljust(8)
    header[16:20] = VERSION.to_bytes(4, "little")

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(len(meta_bytes).to_bytes(4, "little"))
        fh.write(meta_bytes)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container written by :func:`write_container`, checking ``kind``."""
    with open(path, "rb") as fh:
        header = fh.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE or header[0:8] != MAGIC:
            raise ContainerError(f"{path}: not a textvol container (bad magic)")
        found_kind = header[8:16].decode("ascii", errors="replace").strip()
        if found_kind != kind:
            raise ContainerError(f"{path}: expected kind {kind!r}, found {found_kind!r}")
        version = int.from_bytes(header[16:20], "little")
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported container version {version}")
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise ContainerError(f"{path}: truncated metadata length")
        meta_len = int.from_bytes(raw_len, "little")
        meta_bytes = fh.read(meta_len)
        if len(meta_bytes) < meta_len:
            raise ContainerError(f"{path}: truncated metadata block")
        try:
            meta = json.loads(meta_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: unreadable metadata ({exc})") from exc
        if "arrays" not in meta:
            raise ContainerError(f"{path}: metadata lacks an 'arrays' descriptor")

        arrays: dict[str, np.ndarray] = {}
        for desc in meta["arrays"]:
            dtype = desc["dtype"]
            if dtype not in _ALLOWED_DTYPES:
                raise ContainerError(f"{path}: dtype mismatch, unsupported tag {dtype!r}")
            shape = tuple(int(s) for s in desc["shape"])
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * np.dtype(dtype).itemsize
            blob = fh.read(nbytes)
            if len(blob) < nbytes:
                raise ContainerError(f"{path}: truncated payload for array {desc['name']!r}")
            arrays[desc["name"]] = np.frombuffer(blob, dtype=np.dtype(dtype)).reshape(shape)
    return meta, arrays


def sha256_hex(*chunks: bytes) -> str:
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(chunk)
    return digest.hexdigest()
