"""TEN tensor container: ASCII header ``TEN d1 d2 ... dk\\n`` then little-endian float64, row-major."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class TensorFormatError(ValueError):
    pass


def dumps(arr) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f8")
    if a.ndim == 0:
        a = a.reshape(1)
    header = "TEN " + " ".join(str(d) for d in a.shape) + "\n"
    return header.encode("ascii") + a.tobytes(order="C")


def loads(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    nl = buf.find(b"\n")
    if nl < 0:
        raise TensorFormatError(f"{source}: byte 0: missing header newline")
    try:
        header = buf[:nl].decode("ascii")
    except UnicodeDecodeError as exc:
        raise TensorFormatError(f"{source}: byte {exc.start}: header is not ASCII") from exc
    parts = header.split()
    if not parts or parts[0] != "TEN":
        raise TensorFormatError(f"{source}: byte 0: expected magic 'TEN', got {header[:16]!r}")
    try:
        shape = tuple(int(p) for p in parts[1:])
    except ValueError as exc:
        raise TensorFormatError(f"{source}: byte 4: bad dimension in header {header!r}") from exc
    if not shape or any(d < 0 for d in shape):
        raise TensorFormatError(f"{source}: byte 4: invalid shape {shape}")
    body = buf[nl + 1:]
    expected = int(np.prod(shape)) * 8
    if len(body) != expected:
        raise TensorFormatError(
            f"{source}: byte {nl + 1}: payload has {len(body)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes(), str(path))
