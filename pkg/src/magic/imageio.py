"""Binary PGM (P5) and PPM (P6) image files, 8-bit, byte-exact."""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def to_u8(values):
    """[0,1] floats to rounded uint8."""
    arr = np.asarray(values, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def from_u8(raw):
    return raw.astype(np.float32) / np.float32(255.0)


def write_pgm(path, image):
    """image: [S,S] or [1,S,S] values in [0,1]."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ImageFormatError(f"PGM wants one channel, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ImageFormatError(f"expected a 2-d image, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_u8(arr).tobytes())


def write_ppm(path, image):
    """image: [3,S,S] values in [0,1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ImageFormatError(f"PPM wants [3,S,S], got {arr.shape}")
    _, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_u8(arr).transpose(1, 2, 0).tobytes())


def _read_header(f, magic):
    if f.read(2) != magic:
        raise ImageFormatError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise ImageFormatError("truncated header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(v) for v in text.split())
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}")
    return w, h


def read_pgm(path):
    """Returns [1,S,S] float32 in [0,1]."""
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5")
        raw = np.frombuffer(f.read(w * h), dtype=np.uint8)
    if raw.size != w * h:
        raise ImageFormatError("truncated pixel data")
    return from_u8(raw.reshape(1, h, w))


def read_ppm(path):
    """Returns [3,S,S] float32 in [0,1]."""
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6")
        raw = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ImageFormatError("truncated pixel data")
    return from_u8(raw.reshape(h, w, 3).transpose(2, 0, 1))
