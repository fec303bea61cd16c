"""8-bit portable image output (binary PGM / PPM) with simple colormaps."""

from __future__ import annotations

import numpy as np

from .types import ValidationError


def _gray(t):
    return t


def _jet(t):
    r = np.clip(1.5 - np.abs(4 * t - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * t - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * t - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def _hot(t):
    r = np.clip(3 * t, 0, 1)
    g = np.clip(3 * t - 1, 0, 1)
    b = np.clip(3 * t - 2, 0, 1)
    return np.stack([r, g, b], axis=-1)


COLORMAPS = {"gray": _gray, "jet": _jet, "hot": _hot}


def normalize(values, value_range=None) -> np.ndarray:
    """Map ``value_range`` linearly onto [0, 1], clamping outside values.

    Without a range the data extent is used; a constant field maps to 0.5.
    """
    v = np.asarray(values, dtype=np.float64)
    lo, hi = (float(v.min()), float(v.max())) if value_range is None else value_range
    if hi == lo:
        return np.full(v.shape, 0.5)
    if hi < lo:
        raise ValidationError(f"bad value range ({lo}, {hi})")
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def to_bytes(levels) -> np.ndarray:
    return np.floor(np.asarray(levels) * 255.0 + 0.5).astype(np.uint8)


def encode(values, colormap="gray", value_range=None) -> bytes:
    """Binary PGM (gray) or PPM (colour) image of a 2D field."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValidationError("can only render 2D fields")
    if colormap not in COLORMAPS:
        raise ValidationError(f"unknown colormap {colormap!r}; expected {sorted(COLORMAPS)}")
    pix = to_bytes(COLORMAPS[colormap](normalize(v, value_range)))
    m, n = v.shape
    magic = b"P5" if colormap == "gray" else b"P6"
    return magic + f"\n{n} {m}\n255\n".encode("ascii") + pix.tobytes()


def write_image(path, values, colormap="gray", value_range=None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(values, colormap, value_range))


def decode(data: bytes) -> np.ndarray:
    """Pixels of a PGM/PPM written by :func:`encode` (no comment support)."""
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] not in (b"P5", b"P6") or parts[2] != b"255":
        raise ValidationError("not a binary PGM/PPM written by this module")
    n, m = (int(x) for x in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8)
    return pix.reshape((m, n)) if parts[0] == b"P5" else pix.reshape((m, n, 3))
