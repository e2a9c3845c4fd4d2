"""Shared container for trained artifacts: JSON descriptor + raw weight blob.

Layout: magic (4 bytes), version u32, json_len u64, UTF-8 JSON, then the
float32 blob. The JSON carries a section table of (name, offset, shape)
entries indexing into the blob, offsets counted in floats.
"""

import json
import struct

import numpy as np

from .errors import FormatError

_HEAD = struct.Struct("<4sIQ")
VERSION = 1


def pack(magic, descriptor, arrays, path):
    """Write descriptor + named float arrays (stored as little-endian f32)."""
    sections = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        sections.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
        offset += arr.size
    desc = dict(descriptor)
    desc["sections"] = sections
    raw = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(magic, VERSION, len(raw)))
        fh.write(raw)
        fh.write(b"".join(chunks))


def unpack(magic, path):
    """Read back (descriptor, {name: float64 array})."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEAD.size:
        raise FormatError("truncated artifact header")
    got_magic, version, json_len = _HEAD.unpack_from(buf, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported artifact version {version}")
    start = _HEAD.size
    if len(buf) < start + json_len:
        raise FormatError("truncated artifact descriptor")
    desc = json.loads(buf[start : start + json_len].decode("utf-8"))
    blob = np.frombuffer(buf, dtype="<f4", offset=start + json_len)
    arrays = {}
    for sec in desc.pop("sections", []):
        size = int(np.prod(sec["shape"])) if sec["shape"] else 1
        off = sec["offset"]
        if off + size > blob.size:
            raise FormatError(f"section {sec['name']} overruns the blob")
        arrays[sec["name"]] = (
            blob[off : off + size].astype(np.float64).reshape(sec["shape"])
        )
    return desc, arrays
