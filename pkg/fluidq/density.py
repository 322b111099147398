"""
Stationary density and boundary mass of a fluid queue.

f(x) = p_- T_{-+} exp(K x) V, with K and the boundary mass p_- obtained from
the Riccati solution through explicit triplet representations, so the whole
pipeline runs without cancellation.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import scipy.linalg

from .doubling import RiccatiSolution
from .exceptions import NumericalError, ParameterError, RecurrenceError
from .gth import Side, TripletRepresentation, gth_factor, gth_left_kernel, gth_solve
from .model import MACHINE_PRECISION, FluidQueueModel, PhaseDistribution, stationary_phase_distribution

logger = logging.getLogger(__name__)

EXPM_METHODS = ("taylor", "scipy")


def _taylor_degree(tol: float) -> int:
    m = 1
    while 1.0 / math.factorial(m + 1) > tol:
        m += 1
    return m


TAYLOR_DEGREE = _taylor_degree(MACHINE_PRECISION / 4)


def _offdiag(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    np.fill_diagonal(out, 0.0)
    return out


def negated_k_triplet(
    model: FluidQueueModel,
    psi: np.ndarray,
    f_infinity: np.ndarray,
    dist: PhaseDistribution,
) -> TripletRepresentation:
    """
    Left triplet (offdiag(-K), xi_+ C_+, xi_- |C_-| F_inf |C_-^{-1}| T_{-+})
    for K = C_+^{-1} T_{++} + Psi |C_-^{-1}| T_{-+}.
    """
    p = model.n_plus
    off = model.t_offdiag
    scaled_mp = off[p:, :p] / model.abs_c_minus[:, None]
    k_off = off[:p, :p] / model.c_plus[:, None] + _offdiag(psi @ scaled_mp)
    v = dist.xi[:p] * model.c_plus
    w = ((dist.xi[p:] * model.abs_c_minus) @ f_infinity) @ scaled_mp
    return TripletRepresentation.from_matrix(-k_off, v, w, Side.LEFT)


@dataclass(frozen=True, eq=False)
class ReturnOperators:
    """
    K, K-hat, W, W-hat and V, with the certificates for -K, -K-hat, -W and
    -W-hat. The full matrices carry diagonals recovered from those
    certificates.
    """

    k: np.ndarray
    k_hat: np.ndarray
    w: np.ndarray
    w_hat: np.ndarray
    v: np.ndarray
    t_minus_plus: np.ndarray
    neg_k_rep: TripletRepresentation
    neg_k_hat_rep: TripletRepresentation
    neg_w_rep: TripletRepresentation
    neg_w_hat_rep: TripletRepresentation


def build_return_operators(
    model: FluidQueueModel,
    solution: RiccatiSolution,
    dist: Optional[PhaseDistribution] = None,
) -> ReturnOperators:
    """
    Form the return generators from a Riccati solution

    Args:
        model: A positive recurrent fluid queue
        solution: Output of solve_riccati for that model
        dist: Precomputed stationary phase distribution

    Returns:
        The four generators, V and their triplet representations
    """
    if dist is None:
        dist = stationary_phase_distribution(model)
    if not dist.positive_recurrent:
        raise RecurrenceError(f"queue is not positive recurrent (drift {dist.drift:.3e})")
    p, q = model.n_plus, model.n_minus
    psi, psi_hat, f_inf = solution.psi, solution.psi_hat, solution.f_infinity
    off = model.t_offdiag
    off_pp, off_pm, off_mp, off_mm = off[:p, :p], off[:p, p:], off[p:, :p], off[p:, p:]
    inv_cp = 1.0 / model.c_plus
    inv_cm = 1.0 / model.abs_c_minus

    neg_w = TripletRepresentation.from_matrix(-(off_mm + _offdiag(off_mp @ psi)), np.ones(q), np.zeros(q))
    neg_w_hat = TripletRepresentation.from_matrix(
        -(off_pp + _offdiag(off_pm @ psi_hat)), np.ones(p), off_pm @ (f_inf @ np.ones(q))
    )
    neg_k = negated_k_triplet(model, psi, f_inf, dist)
    k_hat_off = off_mm * inv_cm[:, None] + _offdiag(psi_hat @ (off_pm * inv_cp[:, None]))
    neg_k_hat = TripletRepresentation.from_matrix(
        -k_hat_off, dist.xi[p:] * model.abs_c_minus, np.zeros(q), Side.LEFT
    )
    v = np.hstack([np.diag(inv_cp), psi * inv_cm[None, :]])
    return ReturnOperators(
        k=-neg_k.full_matrix(),
        k_hat=-neg_k_hat.full_matrix(),
        w=-neg_w.full_matrix(),
        w_hat=-neg_w_hat.full_matrix(),
        v=v,
        t_minus_plus=off_mp.copy(),
        neg_k_rep=neg_k,
        neg_k_hat_rep=neg_k_hat,
        neg_w_rep=neg_w,
        neg_w_hat_rep=neg_w_hat,
    )


@dataclass(frozen=True, eq=False)
class BoundaryMass:
    p_minus: np.ndarray
    normalizer: float
    kernel: np.ndarray
    return_mass: np.ndarray


def boundary_mass(model: FluidQueueModel, ops: ReturnOperators) -> BoundaryMass:
    """
    p_- from the left kernel q of W, scaled by q 1 + q T_{-+} (-K)^{-1} V 1

    Every term of the normalizer is nonnegative.
    """
    q = gth_left_kernel(ops.neg_w_rep)
    y = gth_solve(gth_factor(ops.neg_k_rep), ops.v.sum(axis=1))
    normalizer = float(q.sum() + q @ (ops.t_minus_plus @ y))
    return BoundaryMass(q / normalizer, normalizer, q, y)


def expm_nonneg(a, t: float = 1.0, method: str = "taylor") -> np.ndarray:
    """
    exp(A t) for an essentially nonnegative matrix A

    The Taylor method writes A = A_hat - z I with A_hat >= 0, scales A_hat t
    by 2^-s so its max row sum is at most one, sums the truncated series by
    Horner's rule and squares s times. e^{-z t} is folded in as e^{-z t / 2^s}
    before the squarings.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError("matrix must be square")
    if not (np.isfinite(t) and t >= 0):
        raise ParameterError(f"scale must be finite and nonnegative, got {t}")
    if np.any(_offdiag(a) < 0):
        raise ParameterError("matrix must have nonnegative off-diagonal entries")
    if method not in EXPM_METHODS:
        raise ParameterError(f"unknown exponential method {method!r}")
    n = a.shape[0]
    if method == "scipy":
        out = scipy.linalg.expm(a * t)
    else:
        eye = np.eye(n)
        if t == 0:
            return eye
        z = max(0.0, -float(np.min(np.diag(a))))
        a_hat = a + z * eye
        norm = float(np.max(a_hat.sum(axis=1))) * t
        s = 0
        while math.ldexp(norm, -s) > 1.0:
            s += 1
        x = a_hat * math.ldexp(t, -s)
        out = eye
        for i in range(TAYLOR_DEGREE, 0, -1):
            out = eye + (x @ out) / i
        out = out * math.exp(-z * math.ldexp(t, -s))
        for _ in range(s):
            out = out @ out
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"matrix exponential overflowed at scale {t}; split the level")
    return out


def density_at(ops: ReturnOperators, mass: BoundaryMass, x: float, method: str = "taylor") -> np.ndarray:
    """f(x) = (p_- T_{-+}) exp(K x) V, accepting x = 0."""
    row = mass.p_minus @ ops.t_minus_plus
    return (row @ expm_nonneg(ops.k, x, method)) @ ops.v


@dataclass(frozen=True, eq=False)
class DensityResult:
    levels: np.ndarray
    values: np.ndarray
    p_minus: np.ndarray
    p_plus: np.ndarray
    mass: BoundaryMass

    def total(self) -> np.ndarray:
        """f(x) 1 at every level"""
        return self.values.sum(axis=1)


def stationary_density(
    model: FluidQueueModel,
    solution: RiccatiSolution,
    levels: Iterable[float],
    method: str = "taylor",
) -> DensityResult:
    """
    Stationary density at each level

    Args:
        model: A positive recurrent fluid queue
        solution: Its Riccati solution
        levels: Positive finite fluid levels
        method: 'taylor' (subtraction-free) or 'scipy'

    Returns:
        Density rows and the boundary mass
    """
    levels = np.asarray(list(levels), dtype=float)
    if levels.size == 0 or not np.all(np.isfinite(levels)) or np.any(levels <= 0):
        raise ParameterError("levels must be positive and finite")
    ops = build_return_operators(model, solution)
    mass = boundary_mass(model, ops)
    values = np.array([density_at(ops, mass, x, method) for x in levels])
    logger.debug("density evaluated at %d levels", len(levels))
    return DensityResult(levels, values, mass.p_minus, np.zeros(model.n_plus), mass)
