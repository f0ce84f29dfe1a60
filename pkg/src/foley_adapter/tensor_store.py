"""Binary tensor container ("CAFT") with an optional JSON manifest section.

Layout: magic ``CAFT``, format version u32, then per tensor: name length
u32, UTF-8 name, rank u32, dims u32 each, float32 little-endian data.
When a manifest is attached the tensor records are followed by canonical
JSON bytes, their length as u32, and the trailer magic ``CAFJ`` so a
reader can find the boundary from the end of the file.  Manifests get a
``_tensor_sha256`` digest of the tensor region, which load verifies, so
a single flipped byte anywhere in the payload is caught.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import CorruptionError, StoreError, UnsupportedVersionError

MAGIC = b"CAFT"
TRAILER = b"CAFJ"
FORMAT_VERSION = 1

_MAX_NAME = 4096
_MAX_RANK = 32
_MAX_DIM = 2**31

DIGEST_KEY = "_tensor_sha256"


def _u32(value):
    return struct.pack("<I", value)


def tensor_section_bytes(tensors):
    """Serialize tensors (sorted by name) to the record byte layout."""
    parts = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > _MAX_NAME:
            raise StoreError("tensor name too long: %r" % name[:50])
        parts.append(_u32(len(encoded)))
        parts.append(encoded)
        parts.append(_u32(arr.ndim))
        for dim in arr.shape:
            parts.append(_u32(dim))
        parts.append(arr.tobytes())
    return b"".join(parts)


def write_tensors(path, tensors, manifest=None):
    """Write the container; byte output is a pure function of the inputs."""
    section = tensor_section_bytes(tensors)
    blob = MAGIC + _u32(FORMAT_VERSION) + section
    if manifest is not None:
        manifest = dict(manifest)
        manifest[DIGEST_KEY] = hashlib.sha256(section).hexdigest()
        payload = json.dumps(
            manifest, sort_keys=True, separators=(",", ":")
        ).encode("utf-8")
        blob += payload + _u32(len(payload)) + TRAILER
    with open(path, "wb") as fh:
        fh.write(blob)


def read_tensors(path):
    """Read back (tensors, manifest_or_None) with a structural audit."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptionError("%s: missing container magic" % path)
    (version,) = struct.unpack_from("<I", data, 4)
    if version > FORMAT_VERSION:
        raise UnsupportedVersionError(
            "%s: format version %d is newer than supported %d"
            % (path, version, FORMAT_VERSION)
        )
    end = len(data)
    manifest = None
    if end >= 16 and data[end - 4:end] == TRAILER:
        (jlen,) = struct.unpack_from("<I", data, end - 8)
        jstart = end - 8 - jlen
        if jstart < 8:
            raise CorruptionError("%s: manifest length exceeds file" % path)
        try:
            manifest = json.loads(data[jstart:end - 8].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptionError("%s: manifest is not valid JSON" % path) from exc
        end = jstart

    tensors = {}
    offset = 8
    while offset < end:
        offset, name, arr = _read_record(path, data, offset, end)
        if name in tensors:
            raise CorruptionError("%s: duplicate tensor %r" % (path, name))
        tensors[name] = arr
    if manifest is not None and DIGEST_KEY in manifest:
        actual = hashlib.sha256(data[8:end]).hexdigest()
        if actual != manifest[DIGEST_KEY]:
            raise CorruptionError(
                "%s: tensor bytes do not match the stored digest" % path
            )
    return tensors, manifest


def _need(path, data, offset, count, end):
    if offset + count > end:
        raise CorruptionError("%s: truncated record at byte %d" % (path, offset))


def _read_record(path, data, offset, end):
    _need(path, data, offset, 4, end)
    (name_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if name_len == 0 or name_len > _MAX_NAME:
        raise CorruptionError(
            "%s: implausible name length %d" % (path, name_len)
        )
    _need(path, data, offset, name_len, end)
    try:
        name = data[offset:offset + name_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptionError("%s: tensor name is not UTF-8" % path) from exc
    offset += name_len
    _need(path, data, offset, 4, end)
    (rank,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if rank > _MAX_RANK:
        raise CorruptionError("%s: implausible rank %d" % (path, rank))
    dims = []
    for _ in range(rank):
        _need(path, data, offset, 4, end)
        (dim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if dim == 0 or dim > _MAX_DIM:
            raise CorruptionError("%s: implausible dimension %d" % (path, dim))
        dims.append(dim)
    count = 1
    for dim in dims:
        count *= dim
    _need(path, data, offset, 4 * count, end)
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    offset += 4 * count
    return offset, name, arr.reshape(dims).copy()
