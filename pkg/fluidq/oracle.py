"""
Extended-precision references and error metrics.

Everything here runs on numpy object arrays of mpmath numbers inside an
``mp.workdps`` block, reusing the dtype-generic pieces of the float solvers.
The mpmath working precision is process-global, so public entry points hold
a lock for their whole computation.
"""

import functools
import logging
import threading
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import mpmath
import numpy as np

from .doubling import pencil_matrices
from .exceptions import FluidQueueError, OracleError, ParameterError, RecurrenceError
from .gth import TripletRepresentation, gth_eliminate
from .model import FluidQueueModel, choose_parameters, stationary_phase_distribution

logger = logging.getLogger(__name__)

mp = mpmath.mp

MIN_DIGITS = 50
METRIC_DIGITS = 50
MAX_ORACLE_ITER = 200

_to_mpf = np.frompyfunc(lambda x: mp.mpf(float(x)), 1, 1)
_precision_lock = threading.RLock()


def _serialized(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        with _precision_lock:
            return func(*args, **kwargs)

    return wrapper


def _mp_array(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == object:
        return _to_mpf(a) if a.size and not isinstance(a.flat[0], mpmath.mpf) else a
    return _to_mpf(np.asarray(a, dtype=float)).astype(object)


def _mp_ones(m: int) -> np.ndarray:
    return np.array([mp.mpf(1)] * m, dtype=object)


def _mp_zero_diagonal(a: np.ndarray) -> np.ndarray:
    out = a.copy()
    for i in range(min(out.shape)):
        out[i, i] = mp.mpf(0)
    return out


def _to_float(a: np.ndarray) -> np.ndarray:
    return np.array(a, dtype=object).astype(float)


def _mp_matrix(a: np.ndarray):
    return mp.matrix(a.tolist())


def _column(vec) -> list:
    return [vec[i] for i in range(vec.rows)]


def _solve_factored(lower: np.ndarray, upper: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    lm, um = _mp_matrix(lower), _mp_matrix(upper)
    cols = []
    for j in range(rhs.shape[1]):
        y = mp.L_solve(lm, mp.matrix(list(rhs[:, j])))
        cols.append(_column(mp.U_solve(um, y)))
    return np.array(cols, dtype=object).T


def _complement_inverse_times(x: np.ndarray, y: np.ndarray, w: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # (I - x y)^{-1} rhs through the triplet (offdiag(-x y), 1, w)
    neg = _mp_zero_diagonal(-(x @ y))
    lower, upper, singular = gth_eliminate(neg, _mp_ones(neg.shape[0]), w)
    if singular:
        raise OracleError("singular complement in extended-precision doubling")
    return _solve_factored(lower, upper, rhs)


@dataclass(frozen=True, eq=False)
class ExtendedSolution:
    """Riccati solution held as mpmath numbers"""

    psi: np.ndarray
    psi_hat: np.ndarray
    f_infinity: np.ndarray
    digits: int
    iterations: int

    def rounded(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _to_float(self.psi), _to_float(self.psi_hat), _to_float(self.f_infinity)


@_serialized
def solve_riccati_extended(model: FluidQueueModel, digits: int = MIN_DIGITS, max_iter: int = MAX_ORACLE_ITER) -> ExtendedSolution:
    """
    Psi, Psi-hat and F_infinity by triplet-based doubling in extended precision

    Args:
        model: A positive recurrent fluid queue
        digits: Decimal digits of working precision, at least 50
        max_iter: Iteration cap

    Returns:
        The solution as mpmath numbers
    """
    if digits < MIN_DIGITS:
        raise ParameterError(f"oracle needs at least {MIN_DIGITS} digits, got {digits}")
    dist = stationary_phase_distribution(model)
    if not dist.positive_recurrent:
        raise RecurrenceError(f"queue is not positive recurrent (drift {dist.drift:.3e})")
    params = choose_parameters(model)
    p, q = model.n_plus, model.n_minus
    with mp.workdps(digits):
        threshold = mp.mpf(10) ** (-(digits - 10))
        off = _mp_array(model.t_offdiag)
        c = _mp_array(model.c)
        alpha = mp.mpf(params.alpha)
        q_mat, r_mat = pencil_matrices(off, c, p, alpha, alpha)
        lower, upper, _ = gth_eliminate(_mp_zero_diagonal(q_mat), _mp_ones(model.n), np.abs(c))
        p0 = _solve_factored(lower, upper, r_mat)
        e, g, h, f = p0[:p, :p], p0[:p, p:], p0[p:, :p], p0[p:, p:]
        for k in range(1, max_iter + 1):
            w_gh = g @ (f @ _mp_ones(q)) + e @ _mp_ones(p)
            w_hg = h @ (e @ _mp_ones(p)) + f @ _mp_ones(q)
            x = _complement_inverse_times(g, h, w_gh, np.hstack([e, g @ f]))
            y = _complement_inverse_times(h, g, w_hg, np.hstack([f, h @ e]))
            g_inc = e @ x[:, p:]
            h_inc = f @ y[:, q:]
            e = e @ x[:, :p]
            f = f @ y[:, :q]
            g = g + g_inc
            h = h + h_inc
            ratio = max((g_inc[i, j] / g[i, j] for i in range(p) for j in range(q) if g[i, j] > 0), default=mp.mpf(0))
            if ratio <= threshold:
                logger.debug("extended doubling converged in %d steps at %d digits", k, digits)
                return ExtendedSolution(g, h, f, digits, k)
    raise OracleError(f"extended-precision doubling did not converge in {max_iter} steps at {digits} digits")


@_serialized
def solve_linear_extended(rep: TripletRepresentation, b, digits: int = MIN_DIGITS) -> np.ndarray:
    """Solve A x = b with A formed explicitly from rep and factored with pivoted LU in extended precision."""
    with mp.workdps(digits):
        ext = TripletRepresentation(_mp_array(rep.offdiag), _mp_array(rep.v), _mp_array(rep.w), rep.side)
        a = ext.full_matrix()
        x = mp.lu_solve(_mp_matrix(a), mp.matrix(list(_mp_array(np.asarray(b, dtype=float)))))
        return np.array([float(xi) for xi in _column(x)])


def _expm_shifted(a: np.ndarray, t) -> np.ndarray:
    # exp(A t) = e^{-z t} exp((A + z I) t) with A + z I >= 0
    n = a.shape[0]
    z = max(mp.mpf(0), max(-a[i, i] for i in range(n)))
    shifted = a.copy()
    for i in range(n):
        shifted[i, i] = shifted[i, i] + z
    e = mp.expm(_mp_matrix(shifted) * t) * mp.exp(-z * t)
    return np.array(e.tolist(), dtype=object)


@_serialized
def expm_extended(a, t: float = 1.0, digits: int = MIN_DIGITS) -> np.ndarray:
    """exp(A t) in extended precision, rounded to float"""
    with mp.workdps(digits):
        return _to_float(_expm_shifted(_mp_array(a), mp.mpf(t)))


@_serialized
def density_extended(
    model: FluidQueueModel,
    levels: Iterable[float],
    digits: int = MIN_DIGITS,
    solution: Optional[ExtendedSolution] = None,
) -> np.ndarray:
    """
    Stationary density rows in extended precision

    Explicit matrices are safe here: the working precision exceeds the
    digits lost to cancellation by a wide margin.

    Args:
        model: A positive recurrent fluid queue
        levels: Nonnegative fluid levels
        digits: Working precision
        solution: A previously computed extended solution to reuse

    Returns:
        Object array of mpmath numbers, one row per level
    """
    levels = [float(x) for x in levels]
    if any(not (np.isfinite(x) and x >= 0) for x in levels):
        raise ParameterError("levels must be nonnegative and finite")
    if solution is None:
        solution = solve_riccati_extended(model, digits)
    digits = max(digits, solution.digits)
    p, q = model.n_plus, model.n_minus
    with mp.workdps(digits):
        psi = solution.psi
        off = _mp_array(model.t_offdiag)
        gen = off.copy()
        for i in range(model.n):
            gen[i, i] = -sum(off[i, :])
        c = _mp_array(model.c)
        inv_cp = np.array([1 / ci for ci in c[:p]], dtype=object)
        inv_cm = np.array([1 / -ci for ci in c[p:]], dtype=object)
        t_pp, t_mp_, t_mm = gen[:p, :p], gen[p:, :p], gen[p:, p:]

        w = t_mm + t_mp_ @ psi
        lower, upper, _ = gth_eliminate(_mp_zero_diagonal(-w), _mp_ones(q), np.array([mp.mpf(0)] * q, dtype=object))
        e_last = mp.matrix([0] * (q - 1) + [1])
        kernel = _column(mp.U_solve(_mp_matrix(lower.T.copy()), e_last))
        kernel = np.array(kernel, dtype=object)

        k = inv_cp[:, None] * t_pp + psi @ (inv_cm[:, None] * t_mp_)
        v = np.hstack([np.diag(inv_cp).astype(object), psi * inv_cm[None, :]])
        v1 = v @ _mp_ones(model.n)
        y = np.array(_column(mp.lu_solve(_mp_matrix(-k), mp.matrix(list(v1)))), dtype=object)
        normalizer = sum(kernel) + kernel @ (t_mp_ @ y)
        row = (kernel / normalizer) @ t_mp_
        rows = []
        for x in levels:
            rows.append((row @ _expm_shifted(k, mp.mpf(x))) @ v)
        return np.array(rows, dtype=object)


@dataclass(frozen=True, eq=False)
class ErrorMetrics:
    e_norm: float
    e_cw: float
    relative: np.ndarray
    unbounded: bool

    def to_dict(self):
        return {"e_norm": self.e_norm, "e_cw": self.e_cw, "unbounded": self.unbounded}


@_serialized
def error_metrics(approx, reference, digits: int = METRIC_DIGITS) -> ErrorMetrics:
    """
    Normwise (Frobenius) and componentwise relative errors of approx

    The reference stays in extended precision until the final division.
    Entries where the reference is zero count as exact when approx is zero
    too, and as infinite otherwise.
    """
    approx = np.atleast_1d(np.asarray(approx, dtype=float))
    with mp.workdps(digits):
        ref = np.atleast_1d(_mp_array(reference))
        if approx.shape != ref.shape:
            raise ParameterError(f"shape mismatch: {approx.shape} vs {ref.shape}")
        diff = _mp_array(approx) - ref
        num = mp.sqrt(sum(d * d for d in diff.flat))
        den = mp.sqrt(sum(r * r for r in ref.flat))
        e_norm = float(num / den) if den != 0 else (0.0 if num == 0 else float("inf"))
        relative = np.zeros(approx.shape)
        unbounded = False
        for idx in np.ndindex(approx.shape):
            if ref[idx] != 0:
                relative[idx] = float(diff[idx] / ref[idx])
            elif approx[idx] != 0:
                relative[idx] = float("inf")
                unbounded = True
    e_cw = float(np.max(np.abs(relative))) if relative.size else 0.0
    return ErrorMetrics(e_norm, e_cw, relative, unbounded)


def reference_or_none(model: FluidQueueModel, digits: int = MIN_DIGITS) -> Optional[ExtendedSolution]:
    """The extended solution, or None with a logged reason when it cannot be computed."""
    try:
        return solve_riccati_extended(model, digits)
    except FluidQueueError as exc:
        logger.warning("no extended-precision reference: %s", exc)
        return None
