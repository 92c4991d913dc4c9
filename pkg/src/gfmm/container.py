"""Self-describing binary container for named arrays.

Layout::

    b"GFMMPACK"                  8-byte magic
    <u8 little-endian>           manifest length in bytes
    manifest                     UTF-8 JSON, sorted keys
    payload                      raw little-endian array bytes

The manifest carries ``format``, ``version``, free-form ``meta`` and a
``tensors`` directory with name, shape, dtype, offset, size and sha256 of
each array (offsets relative to the payload start). Writing is
deterministic, so equal inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .errors import IntegrityError, VersionError

MAGIC = b"GFMMPACK"
_ALLOWED = {"<f4", "<f8", "<i8", "<i4", "<i1", "|i1", "|u1"}


def _le(arr):
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
    arr = arr.astype(dt, copy=False)
    if arr.dtype.str not in _ALLOWED:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return arr


def write_container(path, arrays, fmt, version, meta=None):
    """Write ``arrays`` (name -> ndarray, order preserved) to ``path``."""
    directory, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = _le(arr)
        raw = arr.tobytes()
        directory.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": fmt, "version": version, "meta": meta or {}, "tensors": directory}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_manifest(path):
    with open(path, "rb") as fh:
        return _read_head(fh, path)[0]


def _read_head(fh, path):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise IntegrityError(f"{path}: not a container file (bad magic)")
    size = fh.read(8)
    if len(size) != 8:
        raise IntegrityError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", size)
    head = fh.read(n)
    if len(head) != n:
        raise IntegrityError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable manifest ({exc})") from None
    return manifest, len(MAGIC) + 8 + n


def read_container(path, fmt, version):
    """Return ``(manifest, arrays)``; every tensor is checksum-verified."""
    with open(path, "rb") as fh:
        manifest, start = _read_head(fh, path)
        if manifest.get("format") != fmt:
            raise IntegrityError(f"{path}: expected a {fmt!r} container, found {manifest.get('format')!r}")
        if manifest.get("version") != version:
            raise VersionError(f"{path}: format version {manifest.get('version')} is not supported "
                               f"(this build reads version {version})")
        payload = fh.read()
    arrays = {}
    try:
        entries = manifest["tensors"]
        for e in entries:
            lo, n = int(e["offset"]), int(e["nbytes"])
            raw = payload[lo:lo + n]
            if len(raw) != n:
                raise IntegrityError(f"{path}: tensor {e['name']!r} is truncated")
            if hashlib.sha256(raw).hexdigest() != e["sha256"]:
                raise IntegrityError(f"{path}: checksum mismatch for tensor {e['name']!r}")
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            arrays[e["name"]] = arr.copy()
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"{path}: malformed tensor directory ({exc})") from None
    expected = sum(int(e["nbytes"]) for e in entries)
    if len(payload) != expected:
        raise IntegrityError(f"{path}: payload has {len(payload)} bytes, manifest declares {expected}")
    return manifest, arrays
