"""Versioned binary container shared by dataset and checkpoint files.

Layout::

    magic      8 bytes
    version    uint32 little-endian
    hlen       uint64 little-endian, length of the header
    header     UTF-8 JSON
    payload    float64 little-endian, row-major
    checksum   8-byte BLAKE2b digest of header + payload
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .errors import ChecksumError, FormatError

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _digest(header: bytes, payload: bytes) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    h.update(header)
    h.update(payload)
    return h.digest()


def write_container(path, magic: bytes, header: dict, payload: np.ndarray) -> None:
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    pbytes = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(pbytes)
        fh.write(_digest(hbytes, pbytes))
    os.replace(tmp, path)


def read_container(path, magic: bytes) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise FormatError(f"{path}: file too short for a header")
    got_magic, version, hlen = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    if len(blob) < start + hlen + 8:
        raise FormatError(f"{path}: truncated before end of header")
    hbytes = blob[start : start + hlen]
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    pbytes = blob[start + hlen : -8]
    if _digest(hbytes, pbytes) != blob[-8:]:
        raise ChecksumError(f"{path}: checksum mismatch (corrupted or truncated payload)")
    if len(pbytes) % 8:
        raise FormatError(f"{path}: payload length {len(pbytes)} is not a whole number of float64")
    return header, np.frombuffer(pbytes, dtype="<f8").astype(np.float64)
