"""HSC1 cube files and JSON-lines dataset manifests.

Layout (all little-endian)::

    8 bytes   magic "HSCUBE01" ("HSCUBE" + two-digit version)
    3 x u32   height, width, bands
    2 x f64   lo, hi
    u8        1 if wavelengths follow, else 0
    b x f64   wavelengths (optional)
    f32       payload, band-sequential (band, row, column)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cube import HsiCube

MAGIC = b"HSCUBE"
VERSION = b"01"
_HEADER = struct.Struct("<8sIIIddB")
MAX_PAYLOAD_BYTES = 1 << 36


class CubeFormatError(ValueError):
    """Base class for malformed HSC1 files."""


class UnrecognizedFormatError(CubeFormatError):
    pass


class UnsupportedVersionError(CubeFormatError):
    pass


class PayloadLengthError(CubeFormatError):
    pass


class ExtentOverflowError(CubeFormatError):
    pass


def encode_cube(cube: HsiCube) -> bytes:
    payload = np.ascontiguousarray(cube.values, dtype="<f4")
    lo = min(cube.lo, float(payload.min())) if payload.size else cube.lo
    hi = max(cube.hi, float(payload.max())) if payload.size else cube.hi
    has_wl = cube.wavelengths is not None
    parts = [_HEADER.pack(MAGIC + VERSION, cube.height, cube.width, cube.bands, lo, hi, int(has_wl))]
    if has_wl:
        parts.append(np.asarray(cube.wavelengths, dtype="<f8").tobytes())
    parts.append(payload.tobytes())
    return b"".join(parts)


def decode_cube(buf: bytes) -> HsiCube:
    if len(buf) < 8 or buf[:6] != MAGIC:
        raise UnrecognizedFormatError("unrecognized format: missing HSCUBE magic")
    if buf[6:8] != VERSION:
        raise UnsupportedVersionError(f"unsupported HSC version {buf[6:8]!r}")
    if len(buf) < _HEADER.size:
        raise PayloadLengthError("payload length mismatch: header truncated")
    _, h, w, b, lo, hi, flag = _HEADER.unpack_from(buf)
    if flag not in (0, 1):
        raise UnrecognizedFormatError(f"unrecognized format: wavelength flag {flag}")
    n = h * w * b
    if n * 4 > MAX_PAYLOAD_BYTES:
        raise ExtentOverflowError(f"extents {h}x{w}x{b} exceed the {MAX_PAYLOAD_BYTES}-byte payload limit")
    off = _HEADER.size
    wl = None
    expected = off + (8 * b if flag else 0) + 4 * n
    if len(buf) != expected:
        raise PayloadLengthError(f"payload length mismatch: expected {expected} bytes, got {len(buf)}")
    if flag:
        wl = np.frombuffer(buf, dtype="<f8", count=b, offset=off).astype(np.float64)
        off += 8 * b
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(b, h, w).astype(np.float32)
    return HsiCube(values, lo, hi, wl)


def write_cube(cube: HsiCube, path) -> None:
    Path(path).write_bytes(encode_cube(cube))


def read_cube(path) -> HsiCube:
    return decode_cube(Path(path).read_bytes())


def write_manifest(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
