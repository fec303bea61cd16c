"""Least-squares strain estimation and EPR maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .types import DisplacementField, EprField, StrainTensorField, ValidationError

AXES = {"axial": 0, "lateral": 1}
S_FLOOR = 1e-5


@dataclass(frozen=True)
class LsqParams:
    window_axial: int = 43
    window_lateral: int = 9

    def __post_init__(self):
        for name in ("window_axial", "window_lateral"):
            w = getattr(self, name)
            if w < 3 or w % 2 == 0:
                raise ValidationError(f"{name} must be an odd integer >= 3, got {w}")

    def fitted(self, shape) -> "LsqParams":
        """Copy with each window shrunk to the largest odd length that fits."""
        def fit(w, size):
            size = size if size % 2 else size - 1
            return max(3, min(w, size))
        return LsqParams(fit(self.window_axial, shape[0]), fit(self.window_lateral, shape[1]))


def _ols_slope(values, positions):
    """Least-squares slope of ``values`` (last axis) against ``positions``."""
    x = positions - positions.mean()
    return values @ x / np.dot(x, x)


def ls_differentiate(field, axis: str, window: int) -> np.ndarray:
    """Slope of a straight-line fit over a window centred on each sample.

    Near the borders the window is truncated on the outside, keeping at
    least three points.
    """
    data = np.asarray(field, dtype=np.float64)
    ax = AXES[axis]
    size = data.shape[ax]
    if window < 3 or window % 2 == 0:
        raise ValidationError(f"window must be an odd integer >= 3, got {window}")
    if window > size:
        raise ValidationError(f"window {window} exceeds field extent {size} along {axis}")
    work = np.moveaxis(data, ax, -1)
    half = window // 2
    k = np.arange(-half, half + 1, dtype=np.float64)
    kernel = k / np.dot(k, k)
    out = ndimage.correlate1d(work, kernel, axis=-1, mode="constant")
    for idx in list(range(half)) + list(range(size - half, size)):
        lo = max(0, idx - half)
        hi = min(size, idx + half + 1)
        if hi - lo < 3:
            lo, hi = (0, 3) if lo == 0 else (size - 3, size)
        pos = np.arange(lo, hi, dtype=np.float64)
        out[..., idx] = _ols_slope(work[..., lo:hi], pos)
    return np.moveaxis(out, -1, ax)


def compute_strains(d: DisplacementField, p: LsqParams | None = None) -> StrainTensorField:
    """Axial strain from the axial component, lateral strain from the lateral one."""
    p = p or LsqParams()
    return StrainTensorField(
        ls_differentiate(d.axial, "axial", p.window_axial),
        ls_differentiate(d.lateral, "lateral", p.window_lateral),
    )


def epr_ratio(strains: StrainTensorField, previous, s_floor: float = S_FLOOR,
              nu_min: float = 0.0, nu_max: float = 0.5) -> np.ndarray:
    """Clamped ``-s_xx / s_yy``; keeps ``previous`` where ``|s_yy| < s_floor``."""
    s_yy, s_xx = strains.s_yy, strains.s_xx
    prev = np.broadcast_to(np.asarray(previous, dtype=np.float64), s_yy.shape)
    ok = np.abs(s_yy) >= s_floor
    nu = np.array(prev, copy=True)
    nu[ok] = -s_xx[ok] / s_yy[ok]
    return np.clip(nu, nu_min, nu_max)


def epr_map(strains: StrainTensorField, s_floor: float = S_FLOOR,
            clamp: tuple[float, float] = (0.0, 0.5), default: float | None = None,
            smooth: int | None = None) -> EprField:
    """EPR map for reporting.

    Where the axial strain is below ``s_floor`` the value falls back to
    ``default`` (the clamp midpoint when not given). ``smooth`` applies a
    median filter of that size.
    """
    lo, hi = clamp
    fallback = 0.5 * (lo + hi) if default is None else default
    nu = epr_ratio(strains, fallback, s_floor, lo, hi)
    if smooth:
        nu = ndimage.median_filter(nu, size=smooth, mode="nearest")
    return EprField(nu, nu_min=lo, nu_max=hi)
