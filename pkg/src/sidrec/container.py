"""Binary artifact container: JSON header + little-endian array payloads.

Layout: 4-byte little-endian header length, UTF-8 JSON header, then raw
array bytes. The header records magic, version, scheme, per-array
payload offsets and a 64-bit content digest so downstream artifacts can
detect stale inputs. Floats are stored as float32, ids as uint32.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from .core import DataError, SemanticScheme, StalenessError

FORMAT_VERSION = 1

_DTYPE_TAGS = {
    "f4": np.dtype("<f4"),
    "u4": np.dtype("<u4"),
    "i8": np.dtype("<i8"),
}


def _storage_dtype(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "f4"
    if np.issubdtype(arr.dtype, np.unsignedinteger):
        return "u4"
    if np.issubdtype(arr.dtype, np.integer):
        return "i8"
    raise DataError(f"unsupported array dtype {arr.dtype}")


def content_digest(magic: str, scheme: SemanticScheme | None, meta: dict,
                   arrays: dict[str, np.ndarray]) -> str:
    """64-bit content hash over everything except the digest field itself."""
    h = hashlib.blake2b(digest_size=8)
    head = {
        "magic": magic,
        "scheme": scheme.to_dict() if scheme is not None else None,
        "meta": {k: v for k, v in meta.items() if k != "digest"},
    }
    h.update(json.dumps(head, sort_keys=True).encode())
    for name in sorted(arrays):
        arr = arrays[name]
        tag = _storage_dtype(arr)
        h.update(name.encode())
        h.update(tag.encode())
        h.update(json.dumps(list(arr.shape)).encode())
        h.update(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())
    return h.hexdigest()


def write_container(path, magic: str, scheme: SemanticScheme | None,
                    arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Atomically write an artifact; returns its content digest."""
    meta = dict(meta or {})
    stored = {
        name: np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[_storage_dtype(np.asarray(arr))])
        for name, arr in arrays.items()
    }
    digest = content_digest(magic, scheme, meta, stored)
    meta["digest"] = digest

    entries = []
    offset = 0
    for name in sorted(stored):
        arr = stored[name]
        entries.append({
            "name": name,
            "dtype": _storage_dtype(arr),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes

    header = {
        "magic": magic,
        "version": FORMAT_VERSION,
        "scheme": scheme.to_dict() if scheme is not None else None,
        "meta": meta,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(len(header_bytes).to_bytes(4, "little"))
            f.write(header_bytes)
            for name in sorted(stored):
                f.write(stored[name].tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return digest


def read_container(path, expect_magic: str | None = None):
    """Read an artifact; returns (scheme, arrays, meta).

    Raises DataError for missing/corrupt files and magic mismatches.
    """
    if not os.path.exists(path):
        raise DataError(f"artifact not found: {path}")
    with open(path, "rb") as f:
        raw = f.read(4)
        if len(raw) < 4:
            raise DataError(f"truncated artifact: {path}")
        header_len = int.from_bytes(raw, "little")
        header_bytes = f.read(header_len)
        if len(header_bytes) < header_len:
            raise DataError(f"truncated artifact header: {path}")
        try:
            header = json.loads(header_bytes)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise DataError(f"corrupt artifact header: {path}") from e
        magic = header.get("magic")
        if expect_magic is not None and magic != expect_magic:
            raise DataError(
                f"bad artifact magic in {path}: expected {expect_magic!r}, got {magic!r}"
            )
        if header.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported artifact version in {path}")
        payload = f.read()

    arrays = {}
    for entry in header["arrays"]:
        dtype = _DTYPE_TAGS.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"unknown dtype tag {entry['dtype']!r} in {path}")
        start, nbytes = entry["offset"], entry["nbytes"]
        chunk = payload[start:start + nbytes]
        if len(chunk) < nbytes:
            raise DataError(f"truncated payload for array {entry['name']!r} in {path}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"])

    scheme = None
    if header.get("scheme") is not None:
        scheme = SemanticScheme.from_dict(header["scheme"])
    meta = header.get("meta", {})

    stored_digest = meta.get("digest")
    actual = content_digest(header["magic"], scheme, meta, arrays)
    if stored_digest is not None and stored_digest != actual:
        raise DataError(f"artifact payload does not match its digest: {path}")
    return scheme, arrays, meta


def require_digest(meta: dict, key: str, expected: str, what: str) -> None:
    """Check a recorded upstream digest against the loaded upstream artifact."""
    got = meta.get(key)
    if got != expected:
        raise StalenessError(
            f"{what}: recorded {key}={got!r} does not match loaded digest {expected!r}; "
            "rebuild the downstream artifact"
        )
