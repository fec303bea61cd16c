"""Binary frame/field formats and key = value sidecar files.

Every file starts with a 16-byte header: 4 ASCII magic bytes, rows and
cols as little-endian uint32, then 4 reserved zero bytes. The payload is
one or more row-major little-endian float32 matrices of that shape.

======  =====================  ========
magic   content                payloads
======  =====================  ========
EFR1    RF frame               1
EDF1    displacement field     2 (axial, lateral)
ESF1    strain field           2 (s_yy, s_xx)
EPF1    EPR field              1
======  =====================  ========
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from .types import (DisplacementField, EprField, RfFrame, StrainTensorField,
                    ValidationError)

HEADER = struct.Struct("<4sIII")
_DTYPE = np.dtype("<f4")

MAGICS = {
    "frame": b"EFR1",
    "displacement": b"EDF1",
    "strain": b"ESF1",
    "epr": b"EPF1",
}
_PAYLOADS = {b"EFR1": 1, b"EDF1": 2, b"ESF1": 2, b"EPF1": 1}
KIND_BY_MAGIC = {v: k for k, v in MAGICS.items()}


class FormatError(ValueError):
    """Malformed binary file; the message names the byte offset."""


def _encode(magic: bytes, matrices) -> bytes:
    rows, cols = matrices[0].shape
    parts = [HEADER.pack(magic, rows, cols, 0)]
    for mat in matrices:
        if mat.shape != (rows, cols):
            raise ValidationError(f"payload shapes differ: {mat.shape} vs {(rows, cols)}")
        with np.errstate(over="ignore"):
            data = np.ascontiguousarray(mat, dtype=_DTYPE)
        if not np.all(np.isfinite(data)):
            raise ValidationError("value not representable as a finite float32")
        parts.append(data.tobytes(order="C"))
    return b"".join(parts)


def _decode(data: bytes, expected: bytes | None = None):
    if len(data) < HEADER.size:
        raise FormatError(f"truncated header at offset {len(data)}: need {HEADER.size} bytes")
    magic, rows, cols, reserved = HEADER.unpack_from(data, 0)
    if magic not in _PAYLOADS or (expected is not None and magic != expected):
        want = expected.decode() if expected else "/".join(m.decode() for m in _PAYLOADS)
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {want}")
    if reserved != 0:
        raise FormatError(f"reserved field is {reserved} at offset 12, expected 0")
    if rows == 0 or cols == 0:
        raise FormatError(f"degenerate shape {rows}x{cols} at offset 4")
    count = _PAYLOADS[magic]
    size = rows * cols * _DTYPE.itemsize
    need = HEADER.size + count * size
    if len(data) < need:
        raise FormatError(f"truncated payload at offset {len(data)}: expected {need} bytes")
    if len(data) > need:
        raise FormatError(f"trailing bytes at offset {need}")
    out = []
    for k in range(count):
        start = HEADER.size + k * size
        mat = np.frombuffer(data, dtype=_DTYPE, count=rows * cols, offset=start)
        bad = np.flatnonzero(~np.isfinite(mat))
        if bad.size:
            off = start + int(bad[0]) * _DTYPE.itemsize
            raise FormatError(f"non-finite value at offset {off}")
        out.append(mat.reshape(rows, cols).astype(np.float64))
    return magic, out


def _read_all(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    return source.read()


def write_frame(frame: RfFrame, sink) -> None:
    """Serialize ``frame`` samples to the binary sink as EFR1.

    Samples are stored as float32; float64 values that are not exactly
    representable are rounded.
    """
    sink.write(_encode(MAGICS["frame"], [frame.samples]))


def read_frame(source, **geometry) -> RfFrame:
    """Read an EFR1 frame; geometry keywords are passed to :class:`RfFrame`."""
    _, (samples,) = _decode(_read_all(source), MAGICS["frame"])
    return RfFrame(samples, **geometry)


def write_field(field, sink) -> None:
    if isinstance(field, DisplacementField):
        payload = _encode(MAGICS["displacement"], [field.axial, field.lateral])
    elif isinstance(field, StrainTensorField):
        payload = _encode(MAGICS["strain"], [field.s_yy, field.s_xx])
    elif isinstance(field, EprField):
        payload = _encode(MAGICS["epr"], [field.nu])
    else:
        raise TypeError(f"cannot serialize {type(field).__name__}")
    sink.write(payload)


def read_field(source, kind: str | None = None, *, validate: bool = True,
               nu_min: float = 0.0, nu_max: float = 0.5):
    """Read a displacement, strain or EPR field.

    ``kind`` ('displacement', 'strain', 'epr') restricts the accepted magic.
    For EPR files ``validate`` enforces the ``[nu_min, nu_max]`` clamp.
    """
    expected = MAGICS[kind] if kind is not None else None
    magic, mats = _decode(_read_all(source), expected)
    if magic == MAGICS["frame"]:
        raise FormatError("offset 0: EFR1 is a frame, not a field")
    if magic == MAGICS["displacement"]:
        return DisplacementField(*mats)
    if magic == MAGICS["strain"]:
        return StrainTensorField(*mats)
    return EprField(mats[0], nu_min=nu_min, nu_max=nu_max, validate=validate)


def dumps(obj) -> bytes:
    buf = io.BytesIO()
    if isinstance(obj, RfFrame):
        write_frame(obj, buf)
    else:
        write_field(obj, buf)
    return buf.getvalue()


def peek_kind(path) -> str:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic not in KIND_BY_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    return KIND_BY_MAGIC[magic]


# --- sidecars -------------------------------------------------------------

def sidecar_path(path) -> str:
    return os.fspath(path) + ".meta"


def write_sidecar(path, values: dict) -> None:
    lines = [f"{key} = {values[key]!r}" if isinstance(values[key], float)
             else f"{key} = {values[key]}" for key in sorted(values)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sidecar(path) -> dict:
    """Parse ``key = value`` lines; numbers are converted when possible."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                out[key] = int(value)
            except ValueError:
                try:
                    out[key] = float(value)
                except ValueError:
                    out[key] = value
    return out


def save_frame(path, frame: RfFrame) -> None:
    with open(path, "wb") as fh:
        write_frame(frame, fh)
    write_sidecar(sidecar_path(path), frame.geometry())


def load_frame(path) -> RfFrame:
    geometry = {}
    meta = sidecar_path(path)
    if os.path.exists(meta):
        known = ("axial_spacing_mm", "lateral_pitch_mm",
                 "center_frequency_mhz", "sampling_frequency_mhz")
        geometry = {k: float(v) for k, v in read_sidecar(meta).items() if k in known}
    with open(path, "rb") as fh:
        return read_frame(fh, **geometry)


def save_field(path, field) -> None:
    with open(path, "wb") as fh:
        write_field(field, fh)


def load_field(path, kind: str | None = None, **kwargs):
    with open(path, "rb") as fh:
        return read_field(fh, kind, **kwargs)
