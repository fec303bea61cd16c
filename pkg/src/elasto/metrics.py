"""Accuracy and image-quality metrics for strain and EPR maps.

Standard deviations are population (divide by N) throughout. Degenerate
cases return infinity sentinels instead of raising, so constant synthetic
fields can be evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .types import MetricsReport, ValidationError


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in millimetres: depth range then lateral range."""

    top: float
    left: float
    bottom: float
    right: float

    def __post_init__(self):
        if not (self.bottom > self.top and self.right > self.left):
            raise ValidationError(f"empty rectangle {self}")

    def to_samples(self, spacings) -> tuple[int, int, int, int]:
        """(row0, col0, row1, col1), half-open, for ``(axial_mm, lateral_mm)`` spacings."""
        dy, dx = spacings
        return (int(round(self.top / dy)), int(round(self.left / dx)),
                int(round(self.bottom / dy)), int(round(self.right / dx)))

    def overlaps(self, other: "Rect") -> bool:
        return not (self.bottom <= other.top or other.bottom <= self.top
                    or self.right <= other.left or other.right <= self.left)


@dataclass(frozen=True)
class WindowSweepSpec:
    """Window placement for the SNR/CNR sweep.

    ``window_size_mm`` is (axial, lateral). Background windows are laid out
    on a uniform grid over ``background_region``; each target region gets
    one window centred in it.
    """

    background_region: Rect
    target_regions: tuple[Rect, ...] = ()
    window_size_mm: tuple[float, float] = (3.0, 3.0)
    background_window_count: int = 50

    def __post_init__(self):
        if self.background_window_count < 1:
            raise ValidationError("background_window_count must be >= 1")
        if min(self.window_size_mm) <= 0:
            raise ValidationError("window_size_mm must be positive")
        regions = (self.background_region,) + tuple(self.target_regions)
        for k, a in enumerate(regions):
            for b in regions[k + 1:]:
                if a.overlaps(b):
                    raise ValidationError(f"regions {a} and {b} overlap")


@dataclass
class SweepResult:
    report: MetricsReport
    background_windows: list = field(default_factory=list)
    target_windows: list = field(default_factory=list)


def rmse(estimate, truth, mask=None) -> float:
    """Root-mean-square difference over the samples where ``mask`` is True."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(truth, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValidationError(f"shapes differ: {est.shape} vs {ref.shape}")
    if mask is None:
        mask = np.ones(est.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValidationError("rmse over an empty mask")
    diff = (est - ref)[mask]
    return float(np.sqrt(np.mean(diff * diff)))


def psnr_db(error: float) -> float:
    """PSNR with unit peak, ``-20 log10(rmse)``; +inf when the error is 0."""
    if error < 0:
        raise ValidationError("rmse must be non-negative")
    if error == 0:
        return float("inf")
    return float(-20.0 * np.log10(error))


def _check_values(values, name):
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValidationError(f"{name} needs at least 2 values, got {v.size}")
    return v


def snr(values) -> float:
    """Mean over population standard deviation; +inf for a constant window."""
    v = _check_values(values, "snr")
    # test constancy exactly; std of a constant can round to ~1e-18
    sd = 0.0 if np.ptp(v) == 0 else v.std()
    if sd == 0:
        return float("inf")
    return float(v.mean() / sd)


def cnr(background, target) -> float:
    """``sqrt(2 (mb - mt)^2 / (sb^2 + st^2))``; +inf when both variances vanish."""
    b = _check_values(background, "cnr background")
    t = _check_values(target, "cnr target")
    diff2 = (b.mean() - t.mean()) ** 2
    var = (np.ptp(b) > 0) * b.var() + (np.ptp(t) > 0) * t.var()
    if var == 0:
        return 0.0 if diff2 == 0 else float("inf")
    return float(np.sqrt(2.0 * diff2 / var))


def _grid_shape(count, rows_free, cols_free):
    """Factor ``count`` into r x c with r/c closest to the free-space aspect."""
    aspect = (rows_free + 1) / (cols_free + 1)
    pairs = [(r, count // r) for r in range(1, count + 1) if count % r == 0]
    return min(pairs, key=lambda rc: (abs(np.log(rc[0] / rc[1] / aspect)), rc[0]))


def _region_box(region: Rect, shape, spacings):
    r0, c0, r1, c1 = region.to_samples(spacings)
    m, n = shape
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r1, m), min(c1, n)
    return r0, c0, r1, c1


def window_samples(spec: WindowSweepSpec, spacings) -> tuple[int, int]:
    dy, dx = spacings
    h = max(1, int(round(spec.window_size_mm[0] / dy)))
    w = max(1, int(round(spec.window_size_mm[1] / dx)))
    if h * w < 2:
        raise ValidationError("window covers fewer than 2 samples")
    return h, w


def place_windows(spec: WindowSweepSpec, shape, spacings):
    """Window boxes ``(row0, col0, rows, cols)``: background grid, then targets."""
    h, w = window_samples(spec, spacings)

    def fits(region):
        r0, c0, r1, c1 = _region_box(region, shape, spacings)
        if r1 - r0 < h or c1 - c0 < w:
            raise ValidationError(
                f"region {region} ({r1 - r0}x{c1 - c0} samples) cannot hold a "
                f"{h}x{w} window")
        return r0, c0, r1, c1

    r0, c0, r1, c1 = fits(spec.background_region)
    free_r, free_c = r1 - r0 - h, c1 - c0 - w
    nr, nc = _grid_shape(spec.background_window_count, free_r, free_c)
    tops = np.rint(np.linspace(r0, r0 + free_r, nr)).astype(int)
    lefts = np.rint(np.linspace(c0, c0 + free_c, nc)).astype(int)
    background = [(int(t), int(lf), h, w) for t in tops for lf in lefts]
    targets = []
    for region in spec.target_regions:
        t0, l0, t1, l1 = fits(region)
        targets.append(((t0 + t1 - h) // 2, (l0 + l1 - w) // 2, h, w))
    return background, targets


def _values(field_, box):
    r, c, h, w = box
    return field_[r:r + h, c:c + w]


def sweep(field_, spec: WindowSweepSpec, spacings) -> SweepResult:
    """SNR of every background window and CNR of every background/target pair.

    CNR values are ordered background-major (all targets for the first
    background window, then the next). ``spacings`` is
    ``(axial_mm, lateral_mm)``.
    """
    data = np.asarray(field_, dtype=np.float64)
    background, targets = place_windows(spec, data.shape, spacings)
    snrs = [snr(_values(data, b)) for b in background]
    cnrs = [cnr(_values(data, b), _values(data, t)) for b in background for t in targets]
    report = MetricsReport(snr_values=snrs, cnr_values=cnrs)
    return SweepResult(report, background, targets)


def evaluate(estimate, spec: WindowSweepSpec | None, spacings, truth=None,
             mask=None) -> SweepResult:
    """Sweep (when ``spec`` is given) plus RMSE/PSNR (when ``truth`` is given)."""
    data = np.asarray(estimate, dtype=np.float64)
    result = sweep(data, spec, spacings) if spec is not None else SweepResult(MetricsReport())
    if truth is not None:
        err = rmse(data, truth, mask)
        result.report.rmse = err
        result.report.psnr_db = psnr_db(err)
    return result
