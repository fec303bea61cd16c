"""Coarse displacement estimates: dynamic-programming initialization and NCC.

``dp_initialize`` gives the integer starting point consumed by the
regularized solvers. ``ncc_track`` is the window-based cross-correlation
baseline used for comparison.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator

from . import interp
from .types import DisplacementField, RfFrame, ValidationError


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class DpParams:
    axial_search: int = 8
    lateral_search: int = 2
    transition_weight: float = 0.2
    patch_half_width: int = 5

    def __post_init__(self):
        if self.axial_search < 1:
            raise ValidationError("axial_search must be >= 1")
        if self.lateral_search < 0:
            raise ValidationError("lateral_search must be >= 0")
        if self.transition_weight < 0:
            raise ValidationError("transition_weight must be >= 0")
        if self.patch_half_width < 0:
            raise ValidationError("patch_half_width must be >= 0")

    def states(self):
        """(axial, lateral) offsets of every DP state, axial-major."""
        da = np.arange(-self.axial_search, self.axial_search + 1)
        dl = np.arange(-self.lateral_search, self.lateral_search + 1)
        A, L = np.meshgrid(da, dl, indexing="ij")
        return A.ravel(), L.ravel()


def node_costs(pre, post, p: DpParams) -> np.ndarray:
    """Mean squared patch difference for every sample and state.

    Returns an (m, n, S) array; entry ``[i, j, s]`` compares the axial patch
    around ``pre[i, j]`` with the one around ``post[i + da_s, j + dl_s]``.
    States pointing outside ``post`` cost infinity; patch samples falling
    outside either frame are left out of the mean.
    """
    I1 = np.asarray(pre, dtype=np.float64)
    I2 = np.asarray(post, dtype=np.float64)
    m, n = I1.shape
    das, dls = p.states()
    h = p.patch_half_width
    out = np.empty((m, n, das.size))
    for s, (da, dl) in enumerate(zip(das, dls)):
        shifted = np.full((m, n), np.nan)
        r0, r1 = max(0, -da), min(m, m - da)
        c0, c1 = max(0, -dl), min(n, n - dl)
        if r0 < r1 and c0 < c1:
            shifted[r0:r1, c0:c1] = I2[r0 + da:r1 + da, c0 + dl:c1 + dl]
        valid = np.isfinite(shifted)
        sq = np.where(valid, (I1 - np.where(valid, shifted, 0.0)) ** 2, 0.0)
        total = ndimage.uniform_filter1d(sq, 2 * h + 1, axis=0, mode="constant") * (2 * h + 1)
        count = ndimage.uniform_filter1d(valid.astype(np.float64), 2 * h + 1, axis=0,
                                         mode="constant") * (2 * h + 1)
        cost = total / np.maximum(np.round(count), 1.0)
        cost[~valid] = np.inf
        out[:, :, s] = cost
    return out


def transition_matrix(p: DpParams) -> np.ndarray:
    das, dls = p.states()
    return p.transition_weight * (np.abs(das[:, None] - das[None, :])
                                  + np.abs(dls[:, None] - dls[None, :]))


def _l1_min_convolve(acc, weight, axis):
    """min over k' of acc[..., k', ...] + weight * |k - k'| along ``axis``."""
    out = np.moveaxis(acc.copy(), axis, 0)
    for k in range(1, out.shape[0]):
        np.minimum(out[k], out[k - 1] + weight, out=out[k])
    for k in range(out.shape[0] - 2, -1, -1):
        np.minimum(out[k], out[k + 1] + weight, out=out[k])
    return np.moveaxis(out, 0, axis)


def dp_paths(costs, p: DpParams) -> np.ndarray:
    """Minimum-cost state path down each column.

    ``costs`` is (m, n, S) with states ordered as :meth:`DpParams.states`.
    The L1 transition penalty is separable over the state grid, so the
    min-plus step is two 1D distance transforms. All columns are solved at
    once; returns the (m, n) array of state indices, ties resolving to the
    lowest index.
    """
    m, n, S = costs.shape
    grid = (n, 2 * p.axial_search + 1, 2 * p.lateral_search + 1)
    w = p.transition_weight
    acc = np.empty_like(costs)
    acc[0] = costs[0]
    for i in range(1, m):
        prev = acc[i - 1].reshape(grid)
        best = _l1_min_convolve(_l1_min_convolve(prev, w, 1), w, 2)
        acc[i] = best.reshape(n, S) + costs[i]
    trans = transition_matrix(p)
    path = np.empty((m, n), dtype=np.intp)
    path[-1] = np.argmin(acc[-1], axis=1)
    for i in range(m - 1, 0, -1):
        path[i - 1] = np.argmin(acc[i - 1] + trans[:, path[i]].T, axis=1)
    return path


def path_cost(costs_line, transition, states) -> float:
    """Total cost of one column's state sequence (node plus transition)."""
    total = sum(costs_line[i, s] for i, s in enumerate(states))
    total += sum(transition[a, b] for a, b in zip(states[:-1], states[1:]))
    return float(total)


def dp_initialize(pre: RfFrame, post: RfFrame, p: DpParams | None = None) -> DisplacementField:
    """Integer displacement estimate by per-A-line dynamic programming.

    Each A-line is solved independently over the (axial, lateral) search
    grid with an L1 transition penalty; the per-line results are then
    fused with a 3x3 median filter.
    """
    p = p or DpParams()
    if pre.shape != post.shape:
        raise ValidationError(f"frame shapes differ: {pre.shape} vs {post.shape}")
    m, n = pre.shape
    if 2 * p.axial_search + 2 * p.patch_half_width + 1 > m:
        raise ParameterError(
            f"axial search {p.axial_search} with patch half-width {p.patch_half_width} "
            f"does not fit in {m} samples")
    if 2 * p.lateral_search + 1 > n:
        raise ParameterError(f"lateral search {p.lateral_search} does not fit in {n} lines")
    costs = node_costs(pre.samples, post.samples, p)
    path = dp_paths(costs, p)
    das, dls = p.states()
    axial = ndimage.median_filter(das[path].astype(np.float64), size=3, mode="nearest")
    lateral = ndimage.median_filter(dls[path].astype(np.float64), size=3, mode="nearest")
    assert np.abs(axial).max() <= p.axial_search and np.abs(lateral).max() <= p.lateral_search
    return DisplacementField(axial, lateral)


# --- normalized cross-correlation baseline ----------------------------------

@dataclass(frozen=True)
class NccParams:
    """Block-matching settings.

    ``window_axial`` is in original samples; ``None`` derives it as five
    wavelengths from the frame metadata (fifteen after 3x upsampling).
    """

    upsample_factor: int = 3
    window_axial: int | None = None
    window_lateral: int = 5
    overlap_fraction: float = 0.86
    search_axial: int = 8
    search_lateral: int = 2
    subsample_fit: bool = True

    def __post_init__(self):
        if self.upsample_factor < 1:
            raise ValidationError("upsample_factor must be >= 1")
        if not 0 <= self.overlap_fraction < 1:
            raise ValidationError("overlap_fraction must lie in [0, 1)")
        if self.window_axial is not None and self.window_axial < 2:
            raise ValidationError("window_axial must be >= 2")
        if self.window_lateral < 1:
            raise ValidationError("window_lateral must be >= 1")
        if self.search_axial < 0 or self.search_lateral < 0:
            raise ValidationError("search ranges must be >= 0")


def _box_sums(img, wy, wx):
    """Sums over every wy x wx window; entry [r, c] covers img[r:r+wy, c:c+wx]."""
    c = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    c[1:, 1:] = img.cumsum(0).cumsum(1)
    return c[wy:, wx:] - c[:-wy, wx:] - c[wy:, :-wx] + c[:-wy, :-wx]


def _window_sums(img, tops, lefts, wy, wx):
    """Window sums at the given top-left corners only."""
    c = np.zeros((img.shape[0] + 1, img.shape[1]))
    np.cumsum(img, axis=0, out=c[1:])
    rows = c[tops + wy] - c[tops]
    r = np.zeros((rows.shape[0], rows.shape[1] + 1))
    np.cumsum(rows, axis=1, out=r[:, 1:])
    return r[:, lefts + wx] - r[:, lefts]


def _parabolic(cm, c0, cp):
    denom = cm - 2 * c0 + cp
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(denom < 0, 0.5 * (cm - cp) / denom, 0.0)
    return np.clip(np.nan_to_num(off), -0.5, 0.5)


def ncc_track(pre: RfFrame, post: RfFrame, p: NccParams | None = None) -> DisplacementField:
    """Window-based NCC tracking on upsampled frames.

    Both frames are upsampled with the cubic interpolant, each window's
    integer NCC peak is found inside the search range and refined by
    1D parabolic fits, and the window-centre estimates are interpolated
    bilinearly back onto the original grid.
    """
    p = p or NccParams()
    if pre.shape != post.shape:
        raise ValidationError(f"frame shapes differ: {pre.shape} vs {post.shape}")
    f = p.upsample_factor
    win_ax = p.window_axial
    if win_ax is None:
        win_ax = int(round(5 * pre.wavelength_samples))
    A = interp.resample(pre.samples, f) if f > 1 else pre.samples.astype(np.float64)
    B = interp.resample(post.samples, f) if f > 1 else post.samples.astype(np.float64)
    M, N = A.shape
    wy = max(2, win_ax * f)
    wx = max(1, (p.window_lateral - 1) * f + 1)
    sy, sx = p.search_axial * f, p.search_lateral * f
    if wy > M or wx > N:
        raise ParameterError(f"window {wy}x{wx} does not fit in upsampled frame {M}x{N}")
    step_y = max(1, int(round(wy * (1 - p.overlap_fraction))))
    step_x = max(1, int(round(wx * (1 - p.overlap_fraction))))
    tops = np.arange(0, M - wy + 1, step_y)
    lefts = np.arange(0, N - wx + 1, step_x)
    count = wy * wx

    sA = _box_sums(A, wy, wx)[np.ix_(tops, lefts)]
    varA = _box_sums(A * A, wy, wx)[np.ix_(tops, lefts)] - sA * sA / count
    boxB = _box_sums(B, wy, wx)
    boxBB = _box_sums(B * B, wy, wx)

    shifts_y = np.arange(-sy, sy + 1)
    shifts_x = np.arange(-sx, sx + 1)
    ncc = np.full((shifts_y.size, shifts_x.size, tops.size, lefts.size), -np.inf)
    T, Lw = np.meshgrid(tops, lefts, indexing="ij")
    for a, dy in enumerate(shifts_y):
        ty = T + dy
        for b, dx in enumerate(shifts_x):
            lx = Lw + dx
            # windows whose shifted copy lies fully inside the post frame
            full = (ty >= 0) & (ty + wy <= M) & (lx >= 0) & (lx + wx <= N)
            tyc = np.clip(ty, 0, M - wy)
            lxc = np.clip(lx, 0, N - wx)
            sB = boxB[tyc, lxc]
            varB = boxBB[tyc, lxc] - sB * sB / count
            r0, r1 = max(0, -dy), min(M, M - dy)
            c0, c1 = max(0, -dx), min(N, N - dx)
            prod = np.zeros_like(A)
            prod[r0:r1, c0:c1] = A[r0:r1, c0:c1] * B[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
            sAB = _window_sums(prod, tops, lefts, wy, wx)
            cov = sAB - sA * sB / count
            denom = np.sqrt(np.maximum(varA, 0) * np.maximum(varB, 0))
            with np.errstate(divide="ignore", invalid="ignore"):
                rho = np.where((denom > 1e-12) & full, cov / denom, -np.inf)
            # clip rounding excursions only; -inf marks unusable windows
            ncc[a, b] = np.where(np.isfinite(rho), np.clip(rho, -1.0, 1.0), -np.inf)

    flat = ncc.reshape(-1, tops.size, lefts.size)
    best = np.argmax(flat, axis=0)
    ia, ib = np.unravel_index(best, (shifts_y.size, shifts_x.size))
    peak = np.take_along_axis(flat, best[None], axis=0)[0]
    disp_y = shifts_y[ia].astype(np.float64)
    disp_x = shifts_x[ib].astype(np.float64)
    if p.subsample_fit:
        T, Lw = np.meshgrid(np.arange(tops.size), np.arange(lefts.size), indexing="ij")
        c0 = peak
        # a perfect match at an integer lag needs no refinement; the fit
        # would otherwise pick up the asymmetry of the neighbouring lags
        exact = peak >= 1.0 - 1e-12
        ok_y = (ia > 0) & (ia < shifts_y.size - 1) & ~exact
        cm = ncc[np.clip(ia - 1, 0, None), ib, T, Lw]
        cp = ncc[np.clip(ia + 1, None, shifts_y.size - 1), ib, T, Lw]
        good = ok_y & np.isfinite(cm) & np.isfinite(cp)
        disp_y = disp_y + np.where(good, _parabolic(np.where(good, cm, 0), c0, np.where(good, cp, 0)), 0)
        ok_x = (ib > 0) & (ib < shifts_x.size - 1) & ~exact
        cm = ncc[ia, np.clip(ib - 1, 0, None), T, Lw]
        cp = ncc[ia, np.clip(ib + 1, None, shifts_x.size - 1), T, Lw]
        good = ok_x & np.isfinite(cm) & np.isfinite(cp)
        disp_x = disp_x + np.where(good, _parabolic(np.where(good, cm, 0), c0, np.where(good, cp, 0)), 0)

    degenerate = ~np.isfinite(peak)
    disp_y = _infill(np.where(degenerate, np.nan, disp_y / f))
    disp_x = _infill(np.where(degenerate, np.nan, disp_x / f))

    # window centres in original sample coordinates
    cy = (tops + (wy - 1) / 2) / f
    cx = (lefts + (wx - 1) / 2) / f
    m, n = pre.shape
    Y, X = np.meshgrid(np.arange(m, dtype=np.float64), np.arange(n, dtype=np.float64),
                       indexing="ij")
    pts = np.stack([np.clip(Y, cy[0], cy[-1]), np.clip(X, cx[0], cx[-1])], axis=-1)
    axial = _bilinear(cy, cx, disp_y, pts)
    lateral = _bilinear(cy, cx, disp_x, pts)
    return DisplacementField(axial, lateral)


def _bilinear(cy, cx, values, pts):
    if cy.size == 1 or cx.size == 1:
        # degenerate grid: interpolate along the remaining axis only
        if cy.size == 1 and cx.size == 1:
            return np.full(pts.shape[:2], values[0, 0])
        if cy.size == 1:
            return np.interp(pts[..., 1], cx, values[0])
        return np.interp(pts[..., 0], cy, values[:, 0])
    return RegularGridInterpolator((cy, cx), values, method="linear")(pts)


def _infill(values):
    """Replace NaNs by the median of finite 3x3 neighbours, repeating as needed."""
    out = np.array(values, dtype=np.float64)
    if np.all(np.isnan(out)):
        return np.zeros_like(out)
    while np.any(np.isnan(out)):
        padded = np.pad(out, 1, mode="constant", constant_values=np.nan)
        stack = np.stack([padded[r:r + out.shape[0], c:c + out.shape[1]]
                          for r in range(3) for c in range(3)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(stack, axis=0)
        holes = np.isnan(out) & np.isfinite(med)
        out[holes] = med[holes]
    return out
