"""Manifest + blob container used for every on-disk artifact.

A record is a UTF-8 JSON manifest (magic, metadata, tensor index, blob
digest) plus a raw little-endian blob holding the tensors back to back in
manifest order.
"""
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError

_DTYPES = {"f64": np.dtype("<f8"), "i64": np.dtype("<i8")}


def _dtype_tag(arr):
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "i64"
    return "f64"


def encode_record(magic: str, meta: dict, tensors: dict):
    """Return ``(manifest_bytes, blob_bytes)``."""
    index = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        index.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"magic": magic, **meta, "tensors": index, "blob_bytes": len(blob),
                "blob_sha256": hashlib.sha256(blob).hexdigest()}
    return (json.dumps(manifest, indent=2) + "\n").encode("utf-8"), blob


def decode_record(manifest_bytes: bytes, blob: bytes, magic: str):
    """Inverse of :func:`encode_record`; returns ``(manifest, tensors)``."""
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("magic") != magic:
        raise FormatError(f"expected magic {magic!r}, got {manifest.get('magic') if isinstance(manifest, dict) else None!r}")
    try:
        index = manifest["tensors"]
        declared = int(manifest["blob_bytes"])
        digest = manifest["blob_sha256"]
        expected = 0
        for entry in index:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            if entry["nbytes"] != count * 8 or entry["offset"] != expected:
                raise FormatError(f"tensor {entry['name']!r}: inconsistent index entry")
            expected += entry["nbytes"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest missing field: {exc}") from exc
    if declared != expected or len(blob) != expected:
        raise FormatError(f"blob length {len(blob)} does not match manifest ({expected} bytes)")
    if hashlib.sha256(blob).hexdigest() != digest:
        raise IntegrityError("blob SHA-256 does not match manifest")
    tensors = {}
    for entry in index:
        raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64 if entry["dtype"] == "f64" else np.int64)
    return manifest, tensors


def blob_path(path) -> Path:
    return Path(path).with_suffix(".bin")


def write_record(path, magic: str, meta: dict, tensors: dict) -> Path:
    path = Path(path)
    manifest, blob = encode_record(magic, {**meta, "blob": blob_path(path).name}, tensors)
    path.write_bytes(manifest)
    blob_path(path).write_bytes(blob)
    return path


def read_record(path, magic: str):
    path = Path(path)
    try:
        manifest_bytes = path.read_bytes()
        blob = blob_path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing record file: {exc.filename}") from exc
    return decode_record(manifest_bytes, blob, magic)
