"""Binary named-tensor container shared by the weight, PCA, and SVM model files.

Layout (all little-endian, no padding):

    magic        4 bytes (``VGGW``, ``PCAM`` or ``SVMM``)
    version      u32, currently 1
    tensor_count u32
    per tensor:
        name_len u16
        name     UTF-8 bytes
        rank     u8
        dims     rank x u32
        values   prod(dims) x f32, row-major

A well-formed file ends exactly at the last tensor's last value.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

VERSION = 1


class ContainerError(Exception):
    """Malformed container file."""


class BadMagicError(ContainerError):
    pass


class VersionUnsupportedError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class TrailingBytesError(ContainerError):
    pass


def write_tensors(path, magic: bytes, tensors) -> None:
    """Write ``tensors`` (an ordered sequence of (name, array)) as f32.

    The on-disk order follows the sequence order, which keeps files
    byte-reproducible for identical inputs.
    """
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors:
            a = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise ValueError(f"tensor name too long: {name!r}")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def read_tensors(path, magic: bytes):
    """Read a container file, returning the ordered list of (name, f32 array).

    Raises BadMagicError / VersionUnsupportedError / TruncatedFileError /
    TrailingBytesError; semantic checks (which tensors should be present,
    with which shapes) are the caller's job.
    """
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, got {buf[:4]!r}")
    if len(buf) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionUnsupportedError(f"{path}: version {version} unsupported")
    pos = 12
    out = []
    for _ in range(count):
        if pos + 2 > len(buf):
            raise TruncatedFileError(f"{path}: tensor header truncated")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + name_len + 1 > len(buf):
            raise TruncatedFileError(f"{path}: tensor name truncated")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rank = buf[pos]
        pos += 1
        if pos + 4 * rank > len(buf):
            raise TruncatedFileError(f"{path}: tensor dims truncated")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n_values = 1
        for d in dims:
            n_values *= d
        nbytes = 4 * n_values
        if pos + nbytes > len(buf):
            raise TruncatedFileError(f"{path}: tensor {name!r} payload truncated")
        values = np.frombuffer(buf, dtype="<f4", count=n_values, offset=pos)
        pos += nbytes
        out.append((name, values.reshape(dims).copy()))
    if pos != len(buf):
        raise TrailingBytesError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
