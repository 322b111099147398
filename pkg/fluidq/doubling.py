"""
Structured doubling for the fluid queue Riccati equation.

The iterate P_k = [[E_k, G_k], [H_k, F_k]] is a stochastic matrix; one
doubling step censors it against itself and G_k increases monotonically to
the minimal nonnegative solution Psi. The COMP variant carries explicit
triplet representations for every matrix it inverts, so no step subtracts
quantities of the same sign.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .exceptions import ConvergenceError, FluidQueueError, NumericalError, ParameterError
from .gth import Side, TripletRepresentation, gth_factor, gth_solve, gth_solve_matrix
from .model import (
    MACHINE_PRECISION,
    DoublingParameters,
    FluidQueueModel,
    PhaseDistribution,
    choose_parameters,
    stationary_phase_distribution,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 100
POWER_ITERATION_CAP = 200
POWER_ITERATION_TOL = 1e-10


class Variant(str, Enum):
    GLX = "glx"
    XXL = "xxl"
    COMP = "comp"


@dataclass(frozen=True, eq=False)
class InitialPencil:
    q: np.ndarray
    r: np.ndarray
    gamma: float


def _subtraction_free_diagonal(r_sum, abs_c, scale, n_plus: int) -> np.ndarray:
    # |c_i| - s r_i rewritten as s |c_i| sum_{k != i} r_k / |c_k| inside each block
    n = r_sum.shape[0]
    ratios = r_sum / abs_c
    out = np.zeros_like(r_sum)
    for lo, hi in ((0, n_plus), (n_plus, n)):
        for i in range(lo, hi):
            others = [ratios[k] for k in range(lo, hi) if k != i]
            out[i] = scale[i] * abs_c[i] * sum(others) if others else 0 * abs_c[i]
    return out


def pencil_matrices(offdiag, c, n_plus: int, alpha, beta, subtraction_free: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Initial pencil Q, R for P_0 = Q^{-1} R

    Q = [[C+ - a T++, -b T+-], [-a T-+, |C-| - b T--]] and
    R = [[C+ + b T++, a T+-], [b T-+, |C-| + a T--]]. Works on float and on
    extended-precision object arrays.
    """
    n = offdiag.shape[0]
    r_sum = offdiag.sum(axis=1)
    abs_c = np.abs(c)
    q_scale = np.array([alpha] * n_plus + [beta] * (n - n_plus), dtype=offdiag.dtype)
    r_scale = np.array([beta] * n_plus + [alpha] * (n - n_plus), dtype=offdiag.dtype)
    q = -offdiag * q_scale[None, :]
    r = offdiag * r_scale[None, :]
    q_diag = abs_c + q_scale * r_sum
    if subtraction_free:
        r_diag = _subtraction_free_diagonal(r_sum, abs_c, r_scale, n_plus)
    else:
        r_diag = abs_c - r_scale * r_sum
    if np.any(r_diag < 0):
        raise ParameterError("negative diagonal in R: alpha or beta exceeds its optimal bound")
    for i in range(n):
        q[i, i] = q_diag[i]
        r[i, i] = r_diag[i]
    return q, r


def build_pencil(model: FluidQueueModel, params: DoublingParameters) -> InitialPencil:
    q, r = pencil_matrices(
        model.t_offdiag, model.c, model.n_plus, params.alpha, params.beta, params.subtraction_free
    )
    gamma = 1.0 / (2.0 * np.max(np.diag(q)))
    return InitialPencil(q, r, gamma)


def pencil_triplet(
    model: FluidQueueModel,
    params: DoublingParameters,
    pencil: InitialPencil,
    dist: Optional[PhaseDistribution] = None,
) -> TripletRepresentation:
    """
    Triplet for Q

    alpha = beta: right (offdiag(Q), 1, |C| 1). Both positive: right with v
    scaled by alpha/beta on the down phases. Otherwise left (offdiag(Q), xi,
    xi |C|), from xi Q = xi |C|.
    """
    p = model.n_plus
    alpha, beta = params.alpha, params.beta
    if alpha == beta:
        return TripletRepresentation.from_matrix(pencil.q, np.ones(model.n), model.abs_c)
    if alpha > 0 and beta > 0:
        ratio = alpha / beta
        v = np.concatenate([np.ones(p), np.full(model.n_minus, ratio)])
        w = np.concatenate([model.c_plus, ratio * model.abs_c_minus])
        return TripletRepresentation.from_matrix(pencil.q, v, w)
    if dist is None:
        dist = stationary_phase_distribution(model)
    return TripletRepresentation.from_matrix(pencil.q, dist.xi, dist.xi * model.abs_c, Side.LEFT)


@dataclass(frozen=True, eq=False)
class DoublingState:
    """Blocks of P_k; last_increment is the nonnegative term added to G at step k."""

    e: np.ndarray
    f: np.ndarray
    g: np.ndarray
    h: np.ndarray
    k: int = 0
    last_increment: Optional[np.ndarray] = None
    h_increment: Optional[np.ndarray] = None

    @property
    def n_plus(self) -> int:
        return self.e.shape[0]

    @property
    def n_minus(self) -> int:
        return self.f.shape[0]

    def matrix(self) -> np.ndarray:
        return np.block([[self.e, self.g], [self.h, self.f]])

    @classmethod
    def from_matrix(cls, p_matrix: np.ndarray, n_plus: int) -> "DoublingState":
        p = n_plus
        return cls(p_matrix[:p, :p], p_matrix[p:, p:], p_matrix[:p, p:], p_matrix[p:, :p])


def _explicit_lu(a: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    if not np.all(np.isfinite(a)):
        raise NumericalError("non-finite entries in matrix to factor")
    lu, piv = lu_factor(a)
    if np.any(np.diag(lu) == 0):
        raise NumericalError("singular matrix in LU factorization")
    return lambda b: lu_solve((lu, piv), b)


def initialize(
    model: FluidQueueModel,
    params: DoublingParameters,
    variant: Variant = Variant.COMP,
    dist: Optional[PhaseDistribution] = None,
) -> DoublingState:
    """P_0 = Q^{-1} R; COMP factors Q through its triplet, GLX and XXL by pivoted LU."""
    variant = Variant(variant)
    pencil = build_pencil(model, params)
    if variant is Variant.COMP:
        factors = gth_factor(pencil_triplet(model, params, pencil, dist))
        p0 = gth_solve_matrix(factors, pencil.r)
    else:
        p0 = _explicit_lu(pencil.q)(pencil.r)
    return DoublingState.from_matrix(p0, model.n_plus)


def _complement_solver(
    x: np.ndarray, y: np.ndarray, w: Optional[np.ndarray], variant: Variant
) -> Callable[[np.ndarray], np.ndarray]:
    """Solver for (I - x y); w is the triplet vector (I - x y) 1 for COMP."""
    xy = x @ y
    m = xy.shape[0]
    if variant is Variant.GLX:
        return _explicit_lu(np.eye(m) - xy)
    if variant is Variant.XXL:
        w = 1.0 - xy.sum(axis=1)
        if np.any(w < 0):
            logger.debug("clamping %d negative entries of a recomputed triplet vector", int(np.sum(w < 0)))
            w = np.maximum(w, 0.0)
    rep = TripletRepresentation.from_matrix(-xy, np.ones(m), w)
    factors = gth_factor(rep)
    return lambda b: gth_solve_matrix(factors, b)


def doubling_step(state: DoublingState, variant: Variant = Variant.COMP) -> DoublingState:
    """
    One application of the doubling map

    E' = E (I - GH)^{-1} E, F' = F (I - HG)^{-1} F,
    G' = G + E (I - GH)^{-1} G F, H' = H + F (I - HG)^{-1} H E.
    When the blocks differ in size only the smaller of I - GH and I - HG is
    inverted, using the equivalent forms E' = E (I + G (I - HG)^{-1} H) E and
    so on.
    """
    variant = Variant(variant)
    e, f, g, h = state.e, state.f, state.g, state.h
    p, q = state.n_plus, state.n_minus
    w_gh = w_hg = None
    if variant is Variant.COMP:
        w_gh = g @ (f @ np.ones(q)) + e @ np.ones(p)
        w_hg = h @ (e @ np.ones(p)) + f @ np.ones(q)

    if p == q:
        x = _complement_solver(g, h, w_gh, variant)(np.hstack([e, g @ f]))
        y = _complement_solver(h, g, w_hg, variant)(np.hstack([f, h @ e]))
        e_new = e @ x[:, :p]
        g_inc = e @ x[:, p:]
        f_new = f @ y[:, :q]
        h_inc = f @ y[:, q:]
    elif p < q:
        x = _complement_solver(g, h, w_gh, variant)(np.hstack([e, g]))
        inv_e, inv_g = x[:, :p], x[:, p:]
        inv_gf = inv_g @ f
        fh = f @ h
        e_new = e @ inv_e
        g_inc = e @ inv_gf
        f_new = f @ f + fh @ inv_gf
        h_inc = fh @ inv_e
    else:
        y = _complement_solver(h, g, w_hg, variant)(np.hstack([f, h]))
        inv_f, inv_h = y[:, :q], y[:, q:]
        inv_he = inv_h @ e
        eg = e @ g
        f_new = f @ inv_f
        h_inc = f @ inv_he
        e_new = e @ e + eg @ inv_he
        g_inc = eg @ inv_f

    out = DoublingState(e_new, f_new, g + g_inc, h + h_inc, state.k + 1, g_inc, h_inc)
    for block in (out.e, out.f, out.g, out.h):
        if not np.all(np.isfinite(block)):
            raise NumericalError(f"non-finite values at doubling step {out.k}")
    return out


def increment_ratio(state: DoublingState) -> float:
    """max |J_ij| / G_ij over entries with G_ij > 0"""
    if state.last_increment is None:
        return float("inf")
    mask = state.g > 0
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(state.last_increment[mask]) / state.g[mask]))


@dataclass
class ConvergenceDiagnostics:
    variant: Variant
    params: DoublingParameters
    iterations: int = 0
    increment_ratios: List[float] = field(default_factory=list)
    drift: float = 0.0
    positive_recurrent: bool = True
    perron_value: Optional[float] = None
    contraction: Optional[float] = None

    def to_dict(self):
        return {
            "variant": self.variant.value,
            "scheme": self.params.scheme.value,
            "parameters": self.params.to_dict(),
            "iterations": self.iterations,
            "increment_ratios": list(self.increment_ratios),
            "drift": self.drift,
            "positive_recurrent": self.positive_recurrent,
            "perron_value": self.perron_value,
            "contraction": self.contraction,
        }


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    psi: np.ndarray
    psi_hat: np.ndarray
    f_infinity: np.ndarray
    e_final: np.ndarray
    diagnostics: ConvergenceDiagnostics


def solve_riccati(
    model: FluidQueueModel,
    params: Optional[DoublingParameters] = None,
    variant: Variant = Variant.COMP,
    tol: Optional[float] = None,
    max_iter: int = DEFAULT_MAX_ITER,
) -> RiccatiSolution:
    """
    Minimal nonnegative solution Psi of the fluid queue Riccati equation

    Args:
        model: The fluid queue
        params: Doubling parameters, SDA with eta = 0.5 by default
        variant: COMP (triplet based), XXL or GLX
        tol: Stop once J_ij <= tol * G_ij for every entry with G_ij > 0;
            defaults to n times machine precision
        max_iter: Iteration cap

    Returns:
        Psi, Psi-hat, F_infinity and convergence diagnostics
    """
    variant = Variant(variant)
    params = params or choose_parameters(model)
    tol = model.n * MACHINE_PRECISION if tol is None else tol
    if tol <= 0:
        raise ParameterError(f"tol must be positive, got {tol}")
    dist = stationary_phase_distribution(model)
    diagnostics = ConvergenceDiagnostics(
        variant, params, drift=dist.drift, positive_recurrent=dist.positive_recurrent
    )
    if not dist.positive_recurrent:
        logger.warning("queue is not positive recurrent (drift %.3e); solving the Riccati equation anyway", dist.drift)

    state = initialize(model, params, variant, dist)
    while True:
        if state.k >= max_iter:
            raise ConvergenceError(
                f"no convergence after {max_iter} doubling steps (last increment ratio "
                f"{diagnostics.increment_ratios[-1] if diagnostics.increment_ratios else float('nan'):.3e})",
                diagnostics,
            )
        state = doubling_step(state, variant)
        ratio = increment_ratio(state)
        diagnostics.increment_ratios.append(ratio)
        diagnostics.iterations = state.k
        logger.debug("%s step %d: increment ratio %.3e", variant.value, state.k, ratio)
        if ratio <= tol:
            break

    solution = RiccatiSolution(state.g, state.h, state.f, state.e, diagnostics)
    if dist.positive_recurrent:
        lam, delta = estimate_decay_rate(model, solution, dist)
        diagnostics.perron_value = lam
        diagnostics.contraction = delta
    return solution


def estimate_decay_rate(
    model: FluidQueueModel,
    solution: RiccatiSolution,
    dist: Optional[PhaseDistribution] = None,
) -> Tuple[Optional[float], Optional[float]]:
    """
    Perron value lambda of -K and the contraction (1 - beta lambda) / (1 + alpha lambda)

    Inverse power iteration on I - sigma K, factored through its left triplet.
    Returns (None, None) when the estimate fails.
    """
    from .density import negated_k_triplet

    params = solution.diagnostics.params
    sigma = params.alpha if params.alpha > 0 else params.beta
    try:
        if dist is None:
            dist = stationary_phase_distribution(model)
        neg_k = negated_k_triplet(model, solution.psi, solution.f_infinity, dist)
        shifted = TripletRepresentation(sigma * neg_k.offdiag, neg_k.v, neg_k.v + sigma * neg_k.w, Side.LEFT)
        factors = gth_factor(shifted)
        x = np.ones(model.n_plus)
        mu = None
        for _ in range(POWER_ITERATION_CAP):
            y = gth_solve(factors, x)
            mu_new = float(x.sum() / y.sum())
            x = y / y.sum()
            if mu is not None and abs(mu_new - mu) <= POWER_ITERATION_TOL * mu_new:
                break
            mu = mu_new
        else:
            logger.debug("power iteration did not settle in %d steps", POWER_ITERATION_CAP)
            return None, None
    except FluidQueueError as exc:
        logger.debug("decay rate estimate failed: %s", exc)
        return None, None
    lam = (mu_new - 1.0) / sigma
    if lam <= 0:
        return lam, None
    delta = (1.0 - params.beta * lam) / (1.0 + params.alpha * lam)
    return lam, delta


def riccati_residual(model: FluidQueueModel, psi: np.ndarray) -> np.ndarray:
    """
    Entrywise residual of the Riccati equation relative to the sum of the
    absolute values of its four terms
    """
    p = model.n_plus
    inv_cp = 1.0 / model.c_plus
    inv_cm = 1.0 / model.abs_c_minus
    a = inv_cm[:, None] * model.t_mp
    b = inv_cp[:, None] * model.t_pp
    d = inv_cm[:, None] * model.t_mm
    e = inv_cp[:, None] * model.t_pm
    terms = [psi @ a @ psi, b @ psi, psi @ d, e]
    scale = np.abs(psi) @ np.abs(a) @ np.abs(psi) + np.abs(b) @ np.abs(psi) + np.abs(psi) @ np.abs(d) + np.abs(e)
    total = sum(terms)
    return np.abs(total) / np.where(scale > 0, scale, 1.0)


def doubling_power_matrix(state: DoublingState) -> np.ndarray:
    """[[I, -G], [0, F]]^{-1} [[E, 0], [-H, I]], which equals ((I - a C^{-1} T)^{-1} (I + b C^{-1} T))^(2^k)."""
    p, q = state.n_plus, state.n_minus
    left = np.block([[np.eye(p), -state.g], [np.zeros((q, p)), state.f]])
    right = np.block([[state.e, np.zeros((p, q))], [-state.h, np.eye(q)]])
    return np.linalg.solve(left, right)


def _censor_top(p_matrix: np.ndarray, top: int) -> np.ndarray:
    if top == 0:
        return p_matrix.copy()
    p11 = p_matrix[:top, :top]
    p12 = p_matrix[:top, top:]
    p21 = p_matrix[top:, :top]
    p22 = p_matrix[top:, top:]
    return p22 + p21 @ _explicit_lu(np.eye(top) - p11)(p12)


def blown_up_matrix(p_matrix: np.ndarray, n_plus: int, k: int) -> np.ndarray:
    """Block-circulant Z^{-1} (x) A_- + I (x) A_= + Z (x) A_+ of size 2^k n."""
    n = p_matrix.shape[0]
    m = 2 ** k
    a_plus = np.zeros((n, n))
    a_plus[:n_plus, :n_plus] = p_matrix[:n_plus, :n_plus]
    a_minus = np.zeros((n, n))
    a_minus[n_plus:, n_plus:] = p_matrix[n_plus:, n_plus:]
    a_eq = p_matrix - a_plus - a_minus
    z = np.roll(np.eye(m), 1, axis=1)
    return np.kron(z.T, a_minus) + np.kron(np.eye(m), a_eq) + np.kron(z, a_plus)


def censored_reference_step(p_matrix: np.ndarray, n_plus: int, k: int) -> np.ndarray:
    """Doubling applied k times, computed by censoring the blown-up matrix with dense LU."""
    n = p_matrix.shape[0]
    if k < 0 or k > 4 or n * 2 ** k > 64:
        raise ParameterError(f"censoring reference limited to k <= 4 and n 2^k <= 64, got n={n}, k={k}")
    big = blown_up_matrix(p_matrix, n_plus, k)
    return _censor_top(big, (2 ** k - 1) * n)


def censoring_start_matrix(model: FluidQueueModel, params: DoublingParameters, gamma: Optional[float] = None) -> np.ndarray:
    """S = [[I - gamma Q, gamma R], [I, 0]]"""
    pencil = build_pencil(model, params)
    gamma = pencil.gamma if gamma is None else gamma
    if gamma <= 0 or gamma > 1.0 / np.max(np.diag(pencil.q)):
        raise ParameterError(f"gamma must lie in (0, 1 / max Q_ii], got {gamma}")
    n = model.n
    return np.block([[np.eye(n) - gamma * pencil.q, gamma * pencil.r], [np.eye(n), np.zeros((n, n))]])


def initial_censoring_reference(model: FluidQueueModel, params: DoublingParameters, gamma: Optional[float] = None) -> np.ndarray:
    """P_0 recovered by censoring the first n states of S."""
    return _censor_top(censoring_start_matrix(model, params, gamma), model.n)
