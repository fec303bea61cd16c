"""Synthetic speckle frames and analytic deformations with exact ground truth.

A pre-compression frame is produced by convolving randomly placed point
scatterers with a separable pulse (cosine carrier under a Gaussian envelope
axially, Gaussian laterally). The post-compression frame is obtained by
warping the pre frame through an analytic displacement field, so the
displacement, strains and EPR of the pair are known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import interp
from .types import (DisplacementField, EprField, RfFrame, StrainTensorField,
                    ValidationError)

DEFORMATION_KINDS = ("uniform_compression", "inclusion", "different_pr",
                     "lateral_boundary")

_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(8)


class WarpError(RuntimeError):
    """Fixed-point inversion of the displacement map did not converge."""


@dataclass(frozen=True)
class PhantomSpec:
    rows: int = 256
    cols: int = 128
    scatterer_density: float = 1.0
    wavelength: float = 10.0
    axial_sigma: float = 5.0
    lateral_sigma: float = 1.5
    rng_seed: int = 0
    noise_snr_db: float | None = None
    axial_spacing_mm: float = 0.0154
    lateral_pitch_mm: float = 0.1
    center_frequency_mhz: float = 5.0
    sampling_frequency_mhz: float = 50.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError(f"bad phantom shape {self.rows}x{self.cols}")
        if not self.scatterer_density > 0:
            raise ValidationError("scatterer_density must be > 0")
        if not (self.axial_sigma > 0 and self.lateral_sigma > 0):
            raise ValidationError("pulse sigmas must be > 0")
        if not self.wavelength >= 2:
            raise ValidationError("wavelength must be at least 2 samples")
        if self.rng_seed < 0:
            raise ValidationError("rng_seed must be non-negative")

    @property
    def shape(self):
        return (self.rows, self.cols)

    def geometry(self) -> dict:
        return {
            "axial_spacing_mm": self.axial_spacing_mm,
            "lateral_pitch_mm": self.lateral_pitch_mm,
            "center_frequency_mhz": self.center_frequency_mhz,
            "sampling_frequency_mhz": self.sampling_frequency_mhz,
        }


@dataclass(frozen=True)
class DeformationSpec:
    """Analytic deformation of the phantom.

    ``applied_strain`` is positive for compression. Inclusion geometry is in
    samples (row, column); ``inclusion_center`` defaults to the frame centre.
    """

    kind: str = "uniform_compression"
    applied_strain: float = 0.02
    background_nu: float = 0.49
    inclusion_center: tuple[float, float] | None = None
    inclusion_radius: float = 30.0
    contrast: float = 2.0
    inclusion_nu: float | None = None
    transition_width: float = 8.0
    taper_width: float = 16.0

    def __post_init__(self):
        if self.kind not in DEFORMATION_KINDS:
            raise ValidationError(f"unknown deformation kind {self.kind!r}")
        if abs(self.applied_strain) > 0.1:
            raise ValidationError("|applied_strain| must be <= 0.1")
        for name in ("background_nu", "inclusion_nu"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v < 0.5:
                raise ValidationError(f"{name} must lie in [0, 0.5), got {v}")
        if not self.contrast > 0:
            raise ValidationError("contrast must be > 0")
        if not (self.inclusion_radius > 0 and self.transition_width > 0
                and self.taper_width > 0):
            raise ValidationError("inclusion radius and transition widths must be > 0")


# --- speckle --------------------------------------------------------------

def _pulse_axial(dy, spec: PhantomSpec):
    return np.cos(2 * np.pi * dy / spec.wavelength) * np.exp(-0.5 * (dy / spec.axial_sigma) ** 2)


def _pulse_lateral(dx, spec: PhantomSpec):
    return np.exp(-0.5 * (dx / spec.lateral_sigma) ** 2)


def _separable_matrix(pos, size, reach, pulse):
    """Sparse (size x count) matrix of ``pulse(k - pos)`` for |k - pos| <= reach."""
    count = pos.size
    base = np.floor(pos).astype(np.int64)
    offsets = np.arange(-reach, reach + 2)
    idx = base[None, :] + offsets[:, None]
    keep = (idx >= 0) & (idx < size)
    vals = pulse(idx - pos[None, :])
    cols = np.broadcast_to(np.arange(count), idx.shape)
    return sparse.coo_matrix((vals[keep], (idx[keep], cols[keep])), shape=(size, count))


def generate_speckle(spec: PhantomSpec) -> RfFrame:
    """Simulate one RF frame of fully developed speckle.

    The scatterer count is Poisson with mean ``density * rows * cols``;
    positions are continuous and amplitudes uniform in [-1, 1]. The frame is
    normalized to unit standard deviation (an empty medium stays zero), and
    optional white noise is added at ``noise_snr_db``.
    """
    m, n = spec.shape
    rng = np.random.default_rng(spec.rng_seed)
    count = rng.poisson(spec.scatterer_density * m * n)
    # scatterers may sit a little outside the frame so edges are not darker
    margin_y = 3 * spec.axial_sigma
    margin_x = 3 * spec.lateral_sigma
    ys = rng.uniform(-margin_y, m - 1 + margin_y, count)
    xs = rng.uniform(-margin_x, n - 1 + margin_x, count)
    amps = rng.uniform(-1.0, 1.0, count)
    noise = rng.standard_normal((m, n)) if spec.noise_snr_db is not None else None

    # pulse truncated at 4 sigma; each scatterer touches a small patch only
    reach_y = int(np.ceil(4 * spec.axial_sigma))
    reach_x = int(np.ceil(4 * spec.lateral_sigma))
    ax = _separable_matrix(ys, m, reach_y, lambda d: _pulse_axial(d, spec) * 1.0)
    lat = _separable_matrix(xs, n, reach_x, lambda d: _pulse_lateral(d, spec))
    out = np.asarray((ax.multiply(amps[None, :]).tocsr() @ lat.T.tocsc()).todense())
    std = out.std()
    if std > 0:
        out = (out - out.mean()) / std
    if noise is not None:
        out = add_noise(out, spec.noise_snr_db, noise)
    return RfFrame(out, **spec.geometry())


def add_noise(samples, snr_db: float, unit_noise):
    """Add white noise scaled so that signal power / noise power = snr_db."""
    samples = np.asarray(samples, dtype=np.float64)
    power = np.mean(samples ** 2)
    if power == 0:
        return samples.copy()
    scale = np.sqrt(power / 10 ** (snr_db / 10)) / max(np.std(unit_noise), 1e-300)
    return samples + scale * (unit_noise - np.mean(unit_noise))


def noisy_copy(frame: RfFrame, snr_db: float, seed: int) -> RfFrame:
    noise = np.random.default_rng(seed).standard_normal(frame.shape)
    return frame.with_samples(add_noise(frame.samples, snr_db, noise))


# --- analytic deformation -------------------------------------------------

def _raised_cosine(r, radius, width):
    """1 inside ``radius - width/2``, 0 outside ``radius + width/2``."""
    t = np.clip((r - (radius - width / 2)) / width, 0.0, 1.0)
    return 0.5 * (1 + np.cos(np.pi * t))


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _dsmoothstep(t):
    inside_ = (t > 0) & (t < 1)
    return np.where(inside_, 6 * t * (1 - t), 0.0)


def _cumulative_integral(func, start, stop_points):
    """Integral of ``func`` from ``start`` to each of the sorted ``stop_points``.

    Integrates cell by cell with 8-point Gauss-Legendre and accumulates.
    ``func`` takes an array of coordinates (broadcast along the last axis).
    """
    pts = np.asarray(stop_points, dtype=np.float64)
    edges = np.concatenate(([start], pts))
    lo, hi = edges[:-1], edges[1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = mid[:, None] + half[:, None] * _GAUSS_NODES[None, :]
    vals = func(nodes)
    cell = np.sum(vals * _GAUSS_WEIGHTS, axis=-1) * half
    return np.cumsum(cell, axis=-1)


def _integrate_from(func, origin, coords):
    """Signed integral of ``func`` from ``origin`` to each coordinate."""
    coords = np.asarray(coords, dtype=np.float64)
    out = np.zeros(coords.shape)
    up = coords >= origin
    if np.any(up):
        out[up] = _cumulative_integral(func, origin, coords[up])
    if np.any(~up):
        # descending stop points: Gauss cells carry the sign themselves
        down = coords[~up][::-1]
        out[~up] = _cumulative_integral(func, origin, down)[::-1]
    return out


def analytic_displacement(defn: DeformationSpec, shape):
    """Displacement, strains and EPR of an analytic deformation.

    Displacements are zero on the top row (axial) and on the lateral centre
    line, and are the integrals of the strain profiles from there. Returns
    ``(DisplacementField, StrainTensorField, EprField)``; the EPR is
    ``-s_xx / s_yy`` wherever ``s_yy`` is nonzero and the material ratio
    elsewhere.
    """
    m, n = shape
    eps = defn.applied_strain
    nu_bg = defn.background_nu
    nu_in = nu_bg if defn.inclusion_nu is None else defn.inclusion_nu
    rows = np.arange(m, dtype=np.float64)
    cols = np.arange(n, dtype=np.float64)
    I, J = np.meshgrid(rows, cols, indexing="ij")
    jc = (n - 1) / 2.0
    center = defn.inclusion_center or ((m - 1) / 2.0, jc)
    ic0, jc0 = center

    if defn.kind in ("inclusion", "different_pr"):
        reach = defn.inclusion_radius + defn.transition_width / 2
        if (ic0 - reach < 0 or ic0 + reach > m - 1
                or jc0 - reach < 0 or jc0 + reach > n - 1):
            raise ValidationError("inclusion does not fit inside the grid")

    def blend(i, j):
        r = np.hypot(i - ic0, j - jc0)
        return _raised_cosine(r, defn.inclusion_radius, defn.transition_width)

    if defn.kind == "uniform_compression" or defn.kind == "lateral_boundary":
        s_yy = np.full((m, n), -eps)
        nu = np.full((m, n), nu_bg)
        a = -eps * I
        l0 = nu_bg * eps * (J - jc)
        if defn.kind == "uniform_compression":
            lat = l0
            s_xx = np.full((m, n), nu_bg * eps)
        else:
            t = J / defn.taper_width
            lat = l0 * _smoothstep(t)
            s_xx = nu_bg * eps * _smoothstep(t) + l0 * _dsmoothstep(t) / defn.taper_width
    else:
        if defn.kind == "inclusion":
            def syy(i, j):
                w = blend(i, j)
                return -eps * ((1 - w) + w / defn.contrast)
        else:
            def syy(i, j):
                return np.full(np.broadcast(i, j).shape, -eps)

        def nu_of(i, j):
            w = blend(i, j)
            return nu_bg * (1 - w) + nu_in * w

        def sxx(i, j):
            return -nu_of(i, j) * syy(i, j)

        s_yy = syy(I, J)
        s_xx = sxx(I, J)
        nu = nu_of(I, J)
        # integrate each column downward from the top row
        a = np.empty((m, n))
        for j in range(n):
            a[:, j] = _integrate_from(lambda y: syy(y, cols[j]), 0.0, rows)
        lat = np.empty((m, n))
        for i in range(m):
            lat[i, :] = _integrate_from(lambda x: sxx(rows[i], x), jc, cols)

    epr = np.array(nu, copy=True)
    nz = s_yy != 0
    epr[nz] = -s_xx[nz] / s_yy[nz]
    disp = DisplacementField(a, lat)
    strains = StrainTensorField(s_yy, s_xx)
    return disp, strains, EprField(epr, validate=False)


# --- warping --------------------------------------------------------------

def warp_frame(pre: RfFrame, truth: DisplacementField, iterations: int = 5,
               tolerance: float = 0.5):
    """Synthesize the post-deformation frame from ``pre``.

    The result satisfies ``post(i + a(i,j), j + l(i,j)) ~= pre(i, j)``. Each
    post-frame sample ``p`` is pulled from ``pre`` at ``q`` with
    ``q + d(q) = p``, found by fixed-point iteration. Returns
    ``(post_frame, valid)``; ``valid`` is False where ``q`` falls outside
    the pre frame (those samples hold edge-clamped values).
    """
    if pre.shape != truth.shape:
        raise ValidationError(f"frame {pre.shape} and field {truth.shape} differ")
    m, n = pre.shape
    peak = max(np.abs(truth.axial).max(), np.abs(truth.lateral).max())
    if peak >= min(m, n) / 4:
        raise ValidationError(f"displacement magnitude {peak} too large for {m}x{n} frame")
    P, Q = np.meshgrid(np.arange(m, dtype=np.float64), np.arange(n, dtype=np.float64),
                       indexing="ij")
    y, x = P.copy(), Q.copy()
    change = 0.0
    for _ in range(iterations):
        ny = P - interp.sample(truth.axial, y, x)
        nx = Q - interp.sample(truth.lateral, y, x)
        change = max(np.abs(ny - y).max(), np.abs(nx - x).max())
        y, x = ny, nx
    if change > tolerance:
        raise WarpError(f"inverse map did not converge: last update {change:.3g} samples")
    valid = interp.inside(pre.shape, y, x)
    post = interp.sample(pre.samples, y, x)
    return pre.with_samples(post), valid


def simulate_pair(phantom: PhantomSpec, deformation: DeformationSpec,
                  noise_seed_offset: int = 1):
    """Pre/post frames with ground truth; noise (if any) is independent per frame.

    Returns a dict with keys pre, post, valid, displacement, strains, epr.
    """
    clean = PhantomSpec(**{**phantom.__dict__, "noise_snr_db": None})
    pre = generate_speckle(clean)
    disp, strains, epr = analytic_displacement(deformation, phantom.shape)
    post, valid = warp_frame(pre, disp)
    if phantom.noise_snr_db is not None:
        base = phantom.rng_seed + noise_seed_offset
        pre_noisy = noisy_copy(pre, phantom.noise_snr_db, seed=base * 2 + 1)
        post = noisy_copy(post, phantom.noise_snr_db, seed=base * 2 + 2)
        pre = pre_noisy
    return {"pre": pre, "post": post, "valid": valid, "displacement": disp,
            "strains": strains, "epr": epr}
