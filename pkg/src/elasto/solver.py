"""Regularized displacement refinement: SOUL, L1-SOUL, MechSOUL, L1-MechSOUL.

The total displacement ``d = (a, l)`` is refined by Gauss-Newton steps on a
cost made of

* the intensity mismatch ``I1(i, j) - I2(i + a, j + l)`` (squared),
* a first-row axial anchor ``a[0, j]``,
* first-order continuity on forward differences, minus the scalar biases
  ``eps_a`` / ``eps_l``,
* second-order continuity on centred second differences,
* and, for the mechanical variants, the EPR coupling
  ``d_x l + nu * d_y a`` per sample.

The L2 variants square every penalty; the L1 variants use the smoothed
absolute value ``sqrt(x**2 + eta**2)``, minimized by iteratively
reweighted least squares.

Unknowns are interleaved per sample, ``index = 2 * (j * m + i) + c`` with
``c = 0`` for axial and ``c = 1`` for lateral (column-major over the grid).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import linalg as splinalg

from . import interp
from .initializers import DpParams, dp_initialize
from .strain import LsqParams, compute_strains, epr_map, epr_ratio
from .types import (DisplacementField, EprField, RfFrame, StrainTensorField,
                    ValidationError)

log = logging.getLogger(__name__)

METHODS = {
    "soul": "l2",
    "l1_soul": "l1",
    "mechsoul": "l2m",
    "l1_mechsoul": "l1m",
}
VARIANTS = ("l2", "l2m", "l1", "l1m")


class SolverError(RuntimeError):
    """Singular or non-SPD system, or a residual contract violation."""


@dataclass(frozen=True)
class SolverParams:
    # L2 weights
    alpha1: float = 5.0
    alpha2: float = 1.0
    beta1: float = 5.0
    beta2: float = 1.0
    w: float = 0.5
    gamma: float = 0.01
    alpha3: float = 20.0
    # L1 weights
    alpha1s: float = 0.05
    alpha2s: float = 0.01
    beta1s: float = 0.05
    beta2s: float = 0.01
    gamma_s: float = 0.0001
    w_f: float = 1.0
    w_s: float = 0.5
    alpha3s: float = 0.045
    eta_first: float = 0.001
    eta_second: float = 0.0005
    eta_m: float = 0.001
    # EPR handling
    nu_init: float = 0.49
    nu_min: float = 0.0
    nu_max: float = 0.5
    s_floor: float = 1e-5
    epr_median: int = 5
    epr_update_from_iteration: int = 2
    # iteration control
    outer_iterations: int = 10
    step_tolerance: float = 1e-4
    linear_solver_tolerance: float = 1e-10
    line_search: bool = True
    max_halvings: int = 20
    # biases and internal strains
    update_bias: bool = True
    bias_cross_terms: bool = False
    strain_window_axial: int = 11
    strain_window_lateral: int = 5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                continue
            if not np.isfinite(v):
                raise ValidationError(f"{f.name} must be finite")
        weights = ("alpha1", "alpha2", "beta1", "beta2", "w", "gamma", "alpha3",
                   "alpha1s", "alpha2s", "beta1s", "beta2s", "gamma_s", "w_f", "w_s",
                   "alpha3s")
        for name in weights:
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("eta_first", "eta_second", "eta_m", "linear_solver_tolerance"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if not self.nu_min <= self.nu_init <= self.nu_max:
            raise ValidationError("need nu_min <= nu_init <= nu_max")
        if self.outer_iterations < 1 or self.epr_update_from_iteration < 1:
            raise ValidationError("iteration counts must be >= 1")
        for name in ("strain_window_axial", "strain_window_lateral"):
            w = getattr(self, name)
            if w < 3 or w % 2 == 0:
                raise ValidationError(f"{name} must be an odd integer >= 3")


@dataclass(frozen=True)
class BiasState:
    eps_a: float = 0.0
    eps_l: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.eps_a) and np.isfinite(self.eps_l)):
            raise ValidationError("bias values must be finite")


@dataclass
class Linearization:
    """Residual and warped-image gradients at the current displacement."""

    residual: np.ndarray
    grad_a: np.ndarray
    grad_l: np.ndarray
    valid: np.ndarray


@dataclass
class LinearSystem:
    """``matrix @ delta = rhs`` with the blocks that built it.

    ``blocks`` holds the data matrix ``H``, first-order ``D``, second-order
    ``D2`` and mechanical ``M`` matrices (absent when their weights are 0)
    plus the bias vector ``b``.
    """

    matrix: sparse.csc_matrix
    rhs: np.ndarray
    shape: tuple[int, int]
    blocks: dict = field(default_factory=dict)
    ordering: str = "interleaved (axial, lateral) per sample, column-major grid"


@dataclass
class TrackingResult:
    displacement: DisplacementField
    strains: StrainTensorField
    epr: EprField
    costs: list[float]
    converged: bool
    costs_before: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)
    nu_internal: np.ndarray | None = None
    bias: BiasState = field(default_factory=BiasState)

    @property
    def iterations(self) -> int:
        return len(self.costs)


# --- operators --------------------------------------------------------------

def unknown_index(shape):
    """(axial_index, lateral_index) arrays of shape (m, n)."""
    m, n = shape
    I, J = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    base = 2 * (J * m + I)
    return base, base + 1


def _stencil(targets, taps):
    """Sparse operator with one row per target cell.

    ``targets`` is a list of index arrays (one per tap, all the same shape),
    ``taps`` the matching coefficients.
    """
    rows = np.arange(targets[0].size)
    r = np.concatenate([rows] * len(taps))
    c = np.concatenate([t.ravel() for t in targets])
    v = np.concatenate([np.full(rows.size, float(coef)) for coef in taps])
    return r, c, v


def _matrix(r, c, v, nrows, size):
    # grids narrower than a stencil simply have no rows for it
    return sparse.csr_matrix((v, (r, c)), shape=(max(nrows, 0), size))


@lru_cache(maxsize=8)
def _operators(shape):
    """Difference operators acting on the 2mn unknown vector."""
    m, n = shape
    size = 2 * m * n
    ia, il = unknown_index(shape)
    ops = {}
    for comp, idx in (("a", ia), ("l", il)):
        ops["y" + comp] = _matrix(*_stencil([idx[1:, :], idx[:-1, :]], [1, -1]),
                                  (m - 1) * n, size)
        ops["x" + comp] = _matrix(*_stencil([idx[:, 1:], idx[:, :-1]], [1, -1]),
                                  m * (n - 1), size)
        ops["yy" + comp] = _matrix(*_stencil([idx[:-2, :], idx[1:-1, :], idx[2:, :]],
                                             [1, -2, 1]), (m - 2) * n, size)
        ops["xx" + comp] = _matrix(*_stencil([idx[:, :-2], idx[:, 1:-1], idx[:, 2:]],
                                             [1, -2, 1]), m * (n - 2), size)
    ops["fa"] = _matrix(*_stencil([ia[0, :]], [1]), n, size)
    # mechanical atoms (i, j) need both forward differences: i < m-1, j < n-1
    ops["mech_x"] = _matrix(*_stencil([il[:-1, 1:], il[:-1, :-1]], [1, -1]),
                            (m - 1) * (n - 1), size)
    ops["mech_y"] = _matrix(*_stencil([ia[1:, :-1], ia[:-1, :-1]], [1, -1]),
                            (m - 1) * (n - 1), size)
    for op in ops.values():
        op.sort_indices()
    return ops


def mechanical_operator(shape, nu) -> sparse.csr_matrix:
    """Rows ``d_x l + nu * d_y a`` at every sample with both forward neighbours."""
    ops = _operators(tuple(shape))
    nu_atoms = np.asarray(nu, dtype=np.float64)[:-1, :-1].ravel()
    if not np.any(nu_atoms):
        return ops["mech_x"]
    return (ops["mech_x"] + sparse.diags(nu_atoms) @ ops["mech_y"]).tocsr()


def stack(d: DisplacementField) -> np.ndarray:
    m, n = d.shape
    x = np.empty(2 * m * n)
    x[0::2] = d.axial.ravel(order="F")
    x[1::2] = d.lateral.ravel(order="F")
    return x


def unstack(x, shape) -> DisplacementField:
    m, n = shape
    return DisplacementField(x[0::2].reshape((m, n), order="F"),
                             x[1::2].reshape((m, n), order="F"))


# --- penalty families -----------------------------------------------------

@dataclass
class _Penalty:
    name: str
    group: str       # "D" (first order + anchor), "D2" (second order) or "M"
    op: sparse.csr_matrix
    weight: float
    target: float
    eta: float


def _penalties(shape, variant, p: SolverParams, nu, bias: BiasState):
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    ops = _operators(tuple(shape))
    l1 = variant.startswith("l1")
    mech = variant.endswith("m")
    cross = p.bias_cross_terms
    ea, el = bias.eps_a, bias.eps_l
    if l1:
        first = {"ya": p.w_f * p.alpha1s, "xa": p.w_f * p.alpha2s,
                 "yl": p.w_f * p.beta1s, "xl": p.w_f * p.beta2s}
        second = {"yya": p.w_s * p.alpha1s, "xxa": p.w_s * p.alpha2s,
                  "yyl": p.w_s * p.beta1s, "xxl": p.w_s * p.beta2s}
        anchor, mech_w = p.gamma_s, p.alpha3s
    else:
        first = {"ya": p.alpha1, "xa": p.alpha2, "yl": p.beta1, "xl": p.beta2}
        second = {"yya": p.w * p.alpha1, "xxa": p.w * p.alpha2,
                  "yyl": p.w * p.beta1, "xxl": p.w * p.beta2}
        anchor, mech_w = p.gamma, p.alpha3
    targets = {"ya": ea, "xa": ea if cross else 0.0,
               "yl": el if cross else 0.0, "xl": el}
    out = []
    for key, wt in first.items():
        out.append(_Penalty(key, "D", ops[key], wt, targets[key], p.eta_first))
    for key, wt in second.items():
        out.append(_Penalty(key, "D2", ops[key], wt, 0.0, p.eta_second))
    out.append(_Penalty("fa", "D", ops["fa"], anchor, 0.0, p.eta_first))
    if mech and mech_w > 0:
        out.append(_Penalty("mech", "M", mechanical_operator(shape, nu), mech_w, 0.0, p.eta_m))
    # zero weights are dropped entirely so they cannot perturb the factorization
    return [pen for pen in out if pen.weight > 0 and pen.op.shape[0] > 0], l1


# --- data term ------------------------------------------------------------

def warp_and_linearize(pre: RfFrame, post: RfFrame, d: DisplacementField) -> Linearization:
    """Residual ``I1 - I2(i + a, j + l)`` and the gradients of the warped post frame.

    Samples whose displaced position leaves the post frame are masked out;
    their residual and gradients are zero.
    """
    if pre.shape != post.shape or d.shape != pre.shape:
        raise ValidationError("frames and displacement must share one shape")
    m, n = pre.shape
    I, J = np.meshgrid(np.arange(m, dtype=np.float64), np.arange(n, dtype=np.float64),
                       indexing="ij")
    y = I + d.axial
    x = J + d.lateral
    valid = interp.inside(pre.shape, y, x)
    warped, gy, gx = interp.sample(post.samples, y, x, derivatives=True)
    residual = np.where(valid, pre.samples - warped, 0.0)
    return Linearization(residual, np.where(valid, gy, 0.0), np.where(valid, gx, 0.0), valid)


def _data_blocks(lin: Linearization):
    ga = lin.grad_a.ravel(order="F")
    gl = lin.grad_l.ravel(order="F")
    mu = lin.residual.ravel(order="F")
    size = 2 * ga.size
    main = np.empty(size)
    main[0::2] = ga * ga
    main[1::2] = gl * gl
    off = np.zeros(size - 1)
    off[0::2] = ga * gl
    H = sparse.diags([off, main, off], [-1, 0, 1], shape=(size, size), format="csr")
    h1mu = np.empty(size)
    h1mu[0::2] = ga * mu
    h1mu[1::2] = gl * mu
    return H, h1mu


def _irls_weights(pen: _Penalty, x):
    arg = pen.op @ x - pen.target
    return 1.0 / np.sqrt(arg * arg + pen.eta * pen.eta)


def assemble(variant: str, lin: Linearization, d: DisplacementField, params: SolverParams,
             nu, bias: BiasState) -> LinearSystem:
    """Normal equations of one Gauss-Newton (L2) or IRLS (L1) step.

    The right-hand side is ``H1 mu - (D + D2 + M) d + b``, i.e. minus half
    the gradient of the (surrogate) cost at the current displacement; the
    L1 penalties enter with IRLS weights ``1 / sqrt(x_k**2 + eta**2)``
    evaluated there.
    """
    if not np.any(lin.valid):
        raise SolverError("every sample is masked; the data term is empty")
    shape = d.shape
    x = stack(d)
    H, rhs = _data_blocks(lin)
    pens, l1 = _penalties(shape, variant, params, nu, bias)
    groups = {}
    b = np.zeros_like(rhs)
    for pen in pens:
        if l1:
            row_w = 0.5 * pen.weight * _irls_weights(pen, x)
        else:
            row_w = np.full(pen.op.shape[0], pen.weight)
        weighted = sparse.diags(row_w) @ pen.op
        block = pen.op.T @ weighted
        groups[pen.group] = groups[pen.group] + block if pen.group in groups else block
        if pen.target != 0.0:
            b += weighted.T @ np.full(pen.op.shape[0], pen.target)
    A = H
    reg = None
    for key in ("D", "D2", "M"):
        if key in groups:
            reg = groups[key] if reg is None else reg + groups[key]
    if reg is not None:
        A = A + reg
        rhs = rhs - reg @ x + b
    # exact symmetry regardless of accumulation order in the sparse products
    A = ((A + A.T) * 0.5).tocsc()
    blocks = {"H": H, "b": b, **groups}
    return LinearSystem(A, rhs, shape, blocks)


def assemble_system_l2(lin, d, params, nu, bias, mechanical=True) -> LinearSystem:
    return assemble("l2m" if mechanical else "l2", lin, d, params, nu, bias)


def assemble_system_l1(lin, d, params, nu, bias, mechanical=True) -> LinearSystem:
    return assemble("l1m" if mechanical else "l1", lin, d, params, nu, bias)


def solve_sparse(system: LinearSystem, tol: float = 1e-10) -> np.ndarray:
    """Solve the SPD system by sparse LDL-style LU with symmetric pivoting.

    Raises :class:`SolverError` if a pivot is not positive (with its
    position) or the relative residual exceeds ``tol`` after refinement.
    """
    A = sparse.csc_matrix(system.matrix)
    b = np.asarray(system.rhs, dtype=np.float64)
    if not np.any(b):
        return np.zeros_like(b)
    try:
        lu = splinalg.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                           options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from exc
    pivots = lu.U.diagonal()
    bad = np.flatnonzero(~(pivots > 0))
    if bad.size:
        k = int(bad[0])
        raise SolverError(f"matrix is not positive definite: pivot {k} "
                          f"(unknown {int(lu.perm_c[k])}) = {pivots[k]:.3g}")
    x = lu.solve(b)
    norm_b = np.linalg.norm(b)
    for _ in range(3):
        r = b - A @ x
        if np.linalg.norm(r) <= tol * norm_b:
            return x
        x = x + lu.solve(r)
    rel = np.linalg.norm(b - A @ x) / norm_b
    if rel > tol:
        raise SolverError(f"relative residual {rel:.3g} exceeds tolerance {tol:.3g}")
    return x


# --- cost -----------------------------------------------------------------

def evaluate_cost(pre: RfFrame, post: RfFrame, d: DisplacementField, params: SolverParams,
                  nu, bias: BiasState, variant: str) -> float:
    """Value of the selected objective at total displacement ``d``.

    The data term uses the exact warped intensities over unmasked samples;
    L1 variants use the smoothed absolute value.
    """
    lin = warp_and_linearize(pre, post, d)
    return _cost(lin, d, params, nu, bias, variant)


def cost_terms(pre, post, d, params, nu, bias, variant) -> dict:
    """Per-family contributions to :func:`evaluate_cost` (keys: data, ya, ..., mech)."""
    lin = warp_and_linearize(pre, post, d)
    x = stack(d)
    pens, l1 = _penalties(d.shape, variant, params, nu, bias)
    out = {"data": float(np.sum(lin.residual ** 2))}
    for pen in pens:
        arg = pen.op @ x - pen.target
        if l1:
            out[pen.name] = float(pen.weight * np.sum(np.sqrt(arg * arg + pen.eta ** 2)))
        else:
            out[pen.name] = float(pen.weight * np.dot(arg, arg))
    return out


def _cost(lin, d, params, nu, bias, variant):
    x = stack(d)
    pens, l1 = _penalties(d.shape, variant, params, nu, bias)
    total = float(np.sum(lin.residual ** 2))
    for pen in pens:
        arg = pen.op @ x - pen.target
        if l1:
            total += pen.weight * float(np.sum(np.sqrt(arg * arg + pen.eta * pen.eta)))
        else:
            total += pen.weight * float(np.dot(arg, arg))
    return total


# --- EPR ------------------------------------------------------------------

def update_epr(strains: StrainTensorField, params: SolverParams, previous) -> EprField:
    """``nu = -s_xx / s_yy`` where the axial strain is usable, clamped and smoothed.

    Samples with ``|s_yy| < s_floor`` keep their previous value. The result
    is clamped to ``[nu_min, nu_max]`` and median filtered
    (``epr_median`` x ``epr_median``; 0 or 1 disables the filter).
    """
    nu = epr_ratio(strains, previous, params.s_floor, params.nu_min, params.nu_max)
    if params.epr_median > 1:
        nu = ndimage.median_filter(nu, size=params.epr_median, mode="nearest")
    return EprField(nu, nu_min=params.nu_min, nu_max=params.nu_max)


# --- driver ---------------------------------------------------------------

def _internal_strains(d: DisplacementField, params: SolverParams):
    lsq = LsqParams(params.strain_window_axial, params.strain_window_lateral).fitted(d.shape)
    return compute_strains(d, lsq)


def run_tracking(pre: RfFrame, post: RfFrame, method: str = "mechsoul",
                 params: SolverParams | None = None, init: DisplacementField | None = None,
                 dp_params: DpParams | None = None,
                 lsq: LsqParams | None = None) -> TrackingResult:
    """Refine a coarse displacement estimate with the selected method.

    Starts from ``init`` (or the DP estimate), with the EPR set to
    ``nu_init`` and zero biases. Each outer iteration re-linearizes at the
    current displacement, solves the (reweighted) normal equations, and
    backtracks the step until the cost does not increase. Biases follow
    the mean internal strains; from ``epr_update_from_iteration`` on the
    EPR is re-estimated from the previous iteration's strains.
    """
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; expected one of {sorted(METHODS)}")
    variant = METHODS[method]
    params = params or SolverParams()
    if pre.shape != post.shape:
        raise ValidationError(f"frame shapes differ: {pre.shape} vs {post.shape}")
    pre.check_solver_ready()
    d = init if init is not None else dp_initialize(pre, post, dp_params)
    if d.shape != pre.shape:
        raise ValidationError("initial displacement does not match the frames")
    shape = pre.shape
    nu = np.full(shape, params.nu_init)
    bias = BiasState()
    costs, before, steps = [], [], []
    converged = False
    strains_int = None
    x = stack(d)
    for it in range(1, params.outer_iterations + 1):
        if strains_int is not None:
            if params.update_bias:
                bias = BiasState(float(np.mean(strains_int.s_yy)),
                                 float(np.mean(strains_int.s_xx)))
            if it >= params.epr_update_from_iteration:
                nu = update_epr(strains_int, params, nu).nu
        lin = warp_and_linearize(pre, post, d)
        c0 = _cost(lin, d, params, nu, bias, variant)
        system = assemble(variant, lin, d, params, nu, bias)
        delta = solve_sparse(system, params.linear_solver_tolerance)
        t, c1, d_new = 1.0, c0, d
        for _ in range(params.max_halvings + 1):
            trial = unstack(x + t * delta, shape)
            c_trial = evaluate_cost(pre, post, trial, params, nu, bias, variant)
            if not np.isfinite(c_trial):
                raise SolverError(f"non-finite cost at iteration {it}")
            if c_trial <= c0 or not params.line_search:
                c1, d_new = c_trial, trial
                break
            t *= 0.5
        else:
            t = 0.0
        step = t * float(np.max(np.abs(delta))) if delta.size else 0.0
        if t > 0:
            d = d_new
            x = stack(d)
        costs.append(c1)
        before.append(c0)
        steps.append(step)
        log.debug("iteration %d: cost %.6g -> %.6g, step %.3g (t=%g)", it, c0, c1, step, t)
        strains_int = _internal_strains(d, params)
        if step < params.step_tolerance:
            converged = True
            break
    lsq = (lsq or LsqParams()).fitted(shape)
    strains = compute_strains(d, lsq)
    epr = epr_map(strains, params.s_floor, (params.nu_min, params.nu_max),
                  default=params.nu_init)
    return TrackingResult(d, strains, epr, costs, converged, before, steps,
                          nu_internal=nu, bias=bias)


def with_overrides(params: SolverParams, **changes) -> SolverParams:
    return replace(params, **changes)
