"""Shared binary/text file primitives: images and model weights.

All format errors raise :class:`FormatError` carrying the file and the
line (text formats) or byte offset (binary formats) of the problem.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "FormatError",
    "write_pgm",
    "write_ppm",
    "read_image",
    "save_weights",
    "load_weights",
]

MODEL_MAGIC = b"epmodel v1\n"


class FormatError(ValueError):
    """Malformed file content, with location information."""

    def __init__(self, message: str, path=None, line=None, offset=None):
        self.path = path
        self.line = line
        self.offset = offset
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            elif offset is not None:
                where += f" (byte {offset})"
            where += ": "
        super().__init__(where + message)


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM (P6)."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("PPM writer expects an (H, W, 3) uint8 array")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_image(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) image; returns uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PGM/PPM file (magic {magic!r})", path=path, line=1)
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed through end of line
    tokens = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(data):
            raise FormatError("truncated header", path=path, line=1)
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"non-numeric header tokens {tokens}", path=path, line=1) from None
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}", path=path, line=1)
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    body = data[pos : pos + need]
    if len(body) != need:
        raise FormatError(
            f"pixel data truncated: expected {need} bytes, got {len(body)}",
            path=path,
            offset=pos,
        )
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3))


def save_weights(path, named_arrays) -> None:
    """Versioned binary dump: (name, shape, float32 little-endian values).

    ``named_arrays`` is an iterable of (name, array). Byte-exact round
    trip; arrays are stored as float32.
    """
    items = list(named_arrays)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            raw = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise ValueError(f"parameter name too long: {name[:40]}...")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", raw.ndim))
            fh.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
            fh.write(raw.tobytes())


def load_weights(path) -> dict:
    """Read a weights file back into {name: float32 array}."""
    with open(path, "rb") as fh:
        data = fh.read()

    def fail(msg, offset):
        raise FormatError(msg, path=path, offset=offset)

    if not data.startswith(MODEL_MAGIC):
        fail(f"bad magic {data[:11]!r}, expected {MODEL_MAGIC!r}", 0)
    pos = len(MODEL_MAGIC)
    if len(data) < pos + 4:
        fail("truncated parameter count", pos)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for i in range(count):
        if len(data) < pos + 2:
            fail(f"truncated name length for parameter {i}", pos)
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if len(data) < pos + nlen:
            fail(f"truncated name for parameter {i}", pos)
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        if len(data) < pos + 1:
            fail(f"truncated ndim for {name!r}", pos)
        ndim = data[pos]
        pos += 1
        if len(data) < pos + 4 * ndim:
            fail(f"truncated shape for {name!r}", pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = 4 * size
        if len(data) < pos + nbytes:
            fail(f"truncated values for {name!r}", pos)
        arr = np.frombuffer(data[pos : pos + nbytes], dtype="<f4").reshape(shape)
        pos += nbytes
        if name in out:
            fail(f"duplicate parameter {name!r}", pos)
        out[name] = arr.astype(np.float32)
    if pos != len(data):
        fail(f"{len(data) - pos} trailing bytes after last parameter", pos)
    return out
