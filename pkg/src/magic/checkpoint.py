"""On-disk checkpoint format shared by every trainable module.

Layout (all integers little-endian):
  magic bytes "MGK1"
  u32 version (currently 1)
  u32 tensor count, then per tensor:
    u32 name length, utf-8 name,
    u8 dtype tag (0=f32, 1=f64, 2=i64),
    u32 rank, rank * u64 extents,
    raw little-endian values
  u32 metadata pair count, then per pair:
    u32 key length, utf-8 key, u32 value length, utf-8 value

Round-trips are bit-exact; `digest` hashes the tensor section so frozen
parameters can be compared at the bit level.
"""

import hashlib
import io
import struct

import numpy as np

MAGIC = b"MGK1"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def _write_tensors(buf, tensors):
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        # asarray keeps 0-d shapes (ascontiguousarray would promote to 1-d)
        arr = np.asarray(arr, order="C")
        dt = arr.dtype.newbyteorder("<")
        if np.dtype(dt) not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", _DTYPE_TAGS[np.dtype(dt)]))
        buf.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(arr.astype(dt, copy=False).tobytes())


def save(path, tensors, metadata):
    """Write named arrays plus a string->string metadata block."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_tensors(buf, tensors)
    buf.write(struct.pack("<I", len(metadata)))
    for key, value in metadata.items():
        kb, vb = str(key).encode("utf-8"), str(value).encode("utf-8")
        buf.write(struct.pack("<I", len(kb)))
        buf.write(kb)
        buf.write(struct.pack("<I", len(vb)))
        buf.write(vb)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load(path):
    """Return (tensors, metadata)."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", buf.read(4))
        name = buf.read(nlen).decode("utf-8")
        (tag,) = struct.unpack("<B", buf.read(1))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        (rank,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{rank}Q", buf.read(8 * rank)) if rank else ()
        dt = _TAG_DTYPES[tag]
        n = int(np.prod(shape)) if shape else 1
        raw = buf.read(n * dt.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    (mcount,) = struct.unpack("<I", buf.read(4))
    metadata = {}
    for _ in range(mcount):
        (klen,) = struct.unpack("<I", buf.read(4))
        key = buf.read(klen).decode("utf-8")
        (vlen,) = struct.unpack("<I", buf.read(4))
        metadata[key] = buf.read(vlen).decode("utf-8")
    return tensors, metadata


def digest(tensors):
    """Content hash of named arrays (order-insensitive by sorted name)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
