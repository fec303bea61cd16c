"""Domain types shared across the package.

All arrays are stored row-major with the axial index ``i`` on rows and the
lateral index ``j`` on columns. Displacements are in sample units (axial
samples, A-line pitches); conversion to millimetres happens only when
reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""


def _as_matrix(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2D matrix, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} has degenerate shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValidationError(f"{name} has a non-finite value at {tuple(int(k) for k in bad)}")
    arr.setflags(write=False)
    return arr


def _positive(value: float, name: str) -> float:
    value = float(value)
    if not (np.isfinite(value) and value > 0):
        raise ValidationError(f"{name} must be positive and finite, got {value}")
    return value


@dataclass(frozen=True, eq=False)
class RfFrame:
    """A 2D grid of RF samples with its acquisition geometry."""

    samples: np.ndarray
    axial_spacing_mm: float = 0.0154
    lateral_pitch_mm: float = 0.1
    center_frequency_mhz: float = 5.0
    sampling_frequency_mhz: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "samples", _as_matrix(self.samples, "samples"))
        for name in ("axial_spacing_mm", "lateral_pitch_mm",
                     "center_frequency_mhz", "sampling_frequency_mhz"):
            object.__setattr__(self, name, _positive(getattr(self, name), name))

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape

    @property
    def wavelength_samples(self) -> float:
        """Acoustic wavelength in axial samples (pulse-echo: 2 fs / f0)."""
        return 2.0 * self.sampling_frequency_mhz / self.center_frequency_mhz

    def geometry(self) -> dict:
        return {
            "axial_spacing_mm": self.axial_spacing_mm,
            "lateral_pitch_mm": self.lateral_pitch_mm,
            "center_frequency_mhz": self.center_frequency_mhz,
            "sampling_frequency_mhz": self.sampling_frequency_mhz,
        }

    def with_samples(self, samples) -> "RfFrame":
        return RfFrame(samples, **self.geometry())

    def check_solver_ready(self) -> None:
        m, n = self.shape
        if m < 8 or n < 8:
            raise ValidationError(f"frame {m}x{n} is too small; need at least 8x8")

    def __eq__(self, other):
        if not isinstance(other, RfFrame):
            return NotImplemented
        return (self.geometry() == other.geometry()
                and np.array_equal(self.samples, other.samples))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Axial displacement (samples) and lateral displacement (A-line pitches)."""

    axial: np.ndarray
    lateral: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "axial", _as_matrix(self.axial, "axial"))
        object.__setattr__(self, "lateral", _as_matrix(self.lateral, "lateral"))
        if self.axial.shape != self.lateral.shape:
            raise ValidationError(
                f"axial {self.axial.shape} and lateral {self.lateral.shape} differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.axial.shape

    @classmethod
    def zeros(cls, shape) -> "DisplacementField":
        return cls(np.zeros(shape), np.zeros(shape))

    def __eq__(self, other):
        if not isinstance(other, DisplacementField):
            return NotImplemented
        return (np.array_equal(self.axial, other.axial)
                and np.array_equal(self.lateral, other.lateral))


@dataclass(frozen=True, eq=False)
class StrainTensorField:
    """Axial strain ``s_yy`` and lateral strain ``s_xx`` (dimensionless)."""

    s_yy: np.ndarray
    s_xx: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s_yy", _as_matrix(self.s_yy, "s_yy"))
        object.__setattr__(self, "s_xx", _as_matrix(self.s_xx, "s_xx"))
        if self.s_yy.shape != self.s_xx.shape:
            raise ValidationError(
                f"s_yy {self.s_yy.shape} and s_xx {self.s_xx.shape} differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.s_yy.shape

    def __eq__(self, other):
        if not isinstance(other, StrainTensorField):
            return NotImplemented
        return (np.array_equal(self.s_yy, other.s_yy)
                and np.array_equal(self.s_xx, other.s_xx))


@dataclass(frozen=True, eq=False)
class EprField:
    """Per-sample effective Poisson's ratio.

    ``nu_min``/``nu_max`` are the clamp range the values were validated
    against; pass ``validate=False`` to skip the range check (for example
    when reading ground truth produced with a wider clamp).
    """

    nu: np.ndarray
    nu_min: float = 0.0
    nu_max: float = 0.5
    validate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "nu", _as_matrix(self.nu, "nu"))
        if self.nu_min > self.nu_max:
            raise ValidationError(f"nu_min {self.nu_min} > nu_max {self.nu_max}")
        if self.validate:
            lo, hi = float(self.nu.min()), float(self.nu.max())
            if lo < self.nu_min or hi > self.nu_max:
                raise ValidationError(
                    f"EPR values span [{lo}, {hi}], outside [{self.nu_min}, {self.nu_max}]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.nu.shape

    def __eq__(self, other):
        if not isinstance(other, EprField):
            return NotImplemented
        return np.array_equal(self.nu, other.nu)


@dataclass
class MetricsReport:
    """RMSE/PSNR against ground truth plus windowed SNR/CNR values.

    Infinite SNR/CNR values (zero-variance windows) are kept in the raw
    lists and excluded from the summaries; the exclusions are counted.
    """

    rmse: float | None = None
    psnr_db: float | None = None
    snr_values: list[float] = field(default_factory=list)
    cnr_values: list[float] = field(default_factory=list)

    @staticmethod
    def _summary(values):
        finite = [v for v in values if np.isfinite(v)]
        excluded = len(values) - len(finite)
        if not finite:
            return float("nan"), float("nan"), excluded
        return float(np.mean(finite)), float(np.std(finite)), excluded

    @property
    def snr_summary(self) -> tuple[float, float, int]:
        """(mean, std, excluded count) of the SNR values."""
        return self._summary(self.snr_values)

    @property
    def cnr_summary(self) -> tuple[float, float, int]:
        return self._summary(self.cnr_values)
