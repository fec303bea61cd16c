"""Separable Catmull-Rom interpolation with analytic derivatives.

The interpolant passes through the samples (integer coordinates return the
stored value exactly) and reproduces linear ramps away from the borders.
Borders are handled by edge replication.
"""

from __future__ import annotations

import numpy as np


def _weights(t):
    t2 = t * t
    t3 = t2 * t
    return (
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    )


def _dweights(t):
    t2 = t * t
    return (
        -1.5 * t2 + 2.0 * t - 0.5,
        4.5 * t2 - 5.0 * t,
        -4.5 * t2 + 4.0 * t + 0.5,
        1.5 * t2 - t,
    )


def _split(coord, size):
    """Clamp ``coord`` into [0, size-1] and split into cell index and offset."""
    c = np.clip(coord, 0.0, size - 1.0)
    if size == 1:
        return np.zeros(c.shape, dtype=np.intp), np.zeros_like(c)
    base = np.minimum(np.floor(c).astype(np.intp), size - 2)
    return base, c - base


def inside(shape, y, x):
    """Mask of coordinates inside the sampled rectangle [0, m-1] x [0, n-1]."""
    m, n = shape
    return (y >= 0) & (y <= m - 1) & (x >= 0) & (x <= n - 1)


def sample(image, y, x, derivatives=False):
    """Evaluate the cubic interpolant of ``image`` at coordinates (y, x).

    Coordinates outside the grid are clamped to it; combine with
    :func:`inside` to mask them. With ``derivatives=True`` returns
    ``(value, d_dy, d_dx)``.
    """
    img = np.asarray(image, dtype=np.float64)
    m, n = img.shape
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y, x = np.broadcast_arrays(y, x)
    iy, ty = _split(y, m)
    ix, tx = _split(x, n)
    padded = np.pad(img, 2, mode="edge")
    wy = _weights(ty)
    wx = _weights(tx)
    # rows of the 4x4 neighbourhood, each already combined along x
    rows = []
    for a in range(4):
        r = iy + a + 1
        rows.append([padded[r, ix + b + 1] for b in range(4)])
    along_x = [sum(wx[b] * rows[a][b] for b in range(4)) for a in range(4)]
    value = sum(wy[a] * along_x[a] for a in range(4))
    if not derivatives:
        return value
    dwy = _dweights(ty)
    dwx = _dweights(tx)
    d_dy = sum(dwy[a] * along_x[a] for a in range(4))
    dx_rows = [sum(dwx[b] * rows[a][b] for b in range(4)) for a in range(4)]
    d_dx = sum(wy[a] * dx_rows[a] for a in range(4))
    return value, d_dy, d_dx


def resample(image, factor: int):
    """Upsample both axes by an integer factor; output is (f(m-1)+1, f(n-1)+1)."""
    m, n = np.shape(image)
    yy = np.arange(factor * (m - 1) + 1) / factor
    xx = np.arange(factor * (n - 1) + 1) / factor
    Y, X = np.meshgrid(yy, xx, indexing="ij")
    return sample(image, Y, X)
