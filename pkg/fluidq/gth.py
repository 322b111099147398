"""
Cancellation-free linear algebra on M-matrices given by triplet representations.

A triplet (offdiag(A), v, w) with offdiag(A) <= 0, v > 0, w >= 0 and Av = w
(right) or v^T A = w^T (left) determines the diagonal of A without any
subtraction. The GTH-like elimination below uses the triplet instead of the
diagonal, so every pivot is a sum of nonnegative terms.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import GthError, TripletError

logger = logging.getLogger(__name__)


class Side(str, Enum):
    RIGHT = "right"
    LEFT = "left"


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == object:
        return x
    return np.asarray(x, dtype=float)


def _offdiag_mask(m: int) -> np.ndarray:
    return ~np.eye(m, dtype=bool)


@dataclass(frozen=True, eq=False)
class TripletRepresentation:
    """
    Certificate (offdiag(A), v, w) for an M-matrix A

    Args:
        offdiag: The m*m - m off-diagonal entries of A, row-major with the
            diagonal skipped, all <= 0
        v: Positive vector of length m
        w: Nonnegative vector of length m
        side: RIGHT when Av = w, LEFT when v^T A = w^T
    """

    offdiag: np.ndarray
    v: np.ndarray
    w: np.ndarray
    side: Side = Side.RIGHT

    def __post_init__(self):
        offdiag = _as_array(self.offdiag).ravel()
        v = _as_array(self.v).ravel()
        w = _as_array(self.w).ravel()
        m = v.shape[0]
        if w.shape[0] != m or offdiag.shape[0] != m * m - m:
            raise TripletError(
                f"inconsistent triplet sizes: {offdiag.shape[0]} off-diagonal entries, "
                f"v of length {m}, w of length {w.shape[0]}"
            )
        if offdiag.dtype != object:
            if not (np.all(np.isfinite(offdiag)) and np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
                raise TripletError("triplet has non-finite entries")
        if np.any(offdiag > 0):
            raise TripletError("off-diagonal entries must be nonpositive")
        if np.any(v <= 0):
            raise TripletError("v must be strictly positive")
        if np.any(w < 0):
            raise TripletError("w must be nonnegative")
        object.__setattr__(self, "offdiag", offdiag)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "side", Side(self.side))

    @classmethod
    def from_matrix(cls, a, v, w, side: Side = Side.RIGHT) -> "TripletRepresentation":
        """Build a triplet from the off-diagonal part of a; the diagonal of a is ignored."""
        a = _as_array(a)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise TripletError("matrix must be square")
        return cls(a[_offdiag_mask(a.shape[0])], v, w, side)

    @property
    def m(self) -> int:
        return self.v.shape[0]

    def offdiag_matrix(self) -> np.ndarray:
        """The off-diagonal entries as an m x m matrix with zero diagonal"""
        out = np.zeros((self.m, self.m), dtype=self.offdiag.dtype)
        out[_offdiag_mask(self.m)] = self.offdiag
        return out

    def implied_diagonal(self) -> np.ndarray:
        """A_ii recovered from the certificate, as w plus nonnegative terms over v."""
        off = self.offdiag_matrix()
        if self.side is Side.RIGHT:
            return (self.w - off @ self.v) / self.v
        return (self.w - self.v @ off) / self.v

    def full_matrix(self) -> np.ndarray:
        out = self.offdiag_matrix()
        diag = self.implied_diagonal()
        for i in range(self.m):
            out[i, i] = diag[i]
        return out

    def transposed(self) -> "TripletRepresentation":
        """The same certificate read as one for A^T."""
        other = Side.LEFT if self.side is Side.RIGHT else Side.RIGHT
        return TripletRepresentation.from_matrix(self.offdiag_matrix().T, self.v, self.w, other)


@dataclass(frozen=True, eq=False)
class GthFactors:
    """
    LU factors produced by GTH-like elimination

    lower is unit lower triangular with nonpositive subdiagonal entries and
    upper has a nonnegative diagonal. When transposed is set, the factors
    belong to A^T (the input was a LEFT representation).
    """

    lower: np.ndarray
    upper: np.ndarray
    singular: bool
    transposed: bool = False

    @property
    def m(self) -> int:
        return self.upper.shape[0]


def gth_eliminate(offdiag: np.ndarray, v: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, bool]:
    """
    GTH-like LU factorization of the matrix certified by a right triplet.

    Works on float arrays and on object arrays of extended-precision numbers.

    Args:
        offdiag: m x m matrix holding the nonpositive off-diagonal entries;
            its diagonal is never read
        v: Positive vector with A v = w
        w: Nonnegative vector

    Returns:
        (lower, upper, singular) with A = lower @ upper; singular is set when
        the final pivot is exactly zero
    """
    u = offdiag.copy()
    w = w.copy()
    m = u.shape[0]
    lower = np.eye(m, dtype=u.dtype)
    upper = np.zeros_like(u)
    singular = False
    for k in range(m):
        if k + 1 < m:
            pivot = (w[k] - u[k, k + 1:] @ v[k + 1:]) / v[k]
        else:
            pivot = w[k] / v[k]
        if pivot < 0:
            raise GthError(f"negative pivot at step {k + 1}: the triplet does not certify an M-matrix")
        if pivot == 0:
            if k + 1 < m:
                raise GthError(f"zero pivot at step {k + 1} of {m}: leading block is singular")
            singular = True
        upper[k, k] = pivot
        if k + 1 == m:
            break
        upper[k, k + 1:] = u[k, k + 1:]
        mult = u[k + 1:, k] / pivot
        lower[k + 1:, k] = mult
        w[k + 1:] = w[k + 1:] - mult * w[k]
        trailing = u[k + 1:, k + 1:]
        trailing -= np.outer(mult, u[k, k + 1:])
        np.fill_diagonal(trailing, 0)
    return lower, upper, singular


def gth_factor(rep: TripletRepresentation) -> GthFactors:
    """Factor the M-matrix certified by rep; LEFT inputs are factored as A^T."""
    off = rep.offdiag_matrix()
    transposed = rep.side is Side.LEFT
    if transposed:
        off = off.T.copy()
    lower, upper, singular = gth_eliminate(off, rep.v, rep.w)
    return GthFactors(lower, upper, singular, transposed)


def _check_rhs(factors: GthFactors, b: np.ndarray) -> np.ndarray:
    if factors.singular:
        raise GthError("cannot solve with singular factors")
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factors.m:
        raise TripletError(f"right-hand side has {b.shape[0]} rows, expected {factors.m}")
    if np.any(b < 0):
        raise TripletError("right-hand side must be nonnegative")
    return b


def _solve_lu(factors: GthFactors, b: np.ndarray) -> np.ndarray:
    # (LU) x = b
    y = solve_triangular(factors.lower, b, lower=True, unit_diagonal=True)
    return solve_triangular(factors.upper, y, lower=False)


def _solve_lu_transposed(factors: GthFactors, b: np.ndarray) -> np.ndarray:
    # (LU)^T x = b
    y = solve_triangular(factors.upper, b, trans="T", lower=False)
    return solve_triangular(factors.lower, y, trans="T", lower=True, unit_diagonal=True)


def gth_solve(factors: GthFactors, b) -> np.ndarray:
    """
    Solve A x = b for nonnegative b

    Args:
        factors: Output of gth_factor
        b: Nonnegative vector, or matrix of nonnegative columns

    Returns:
        The nonnegative solution A^{-1} b
    """
    b = _check_rhs(factors, b)
    if factors.transposed:
        return _solve_lu_transposed(factors, b)
    return _solve_lu(factors, b)


def gth_solve_transposed(factors: GthFactors, b) -> np.ndarray:
    """Solve A^T x = b for nonnegative b"""
    b = _check_rhs(factors, b)
    if factors.transposed:
        return _solve_lu(factors, b)
    return _solve_lu_transposed(factors, b)


def gth_solve_matrix(factors: GthFactors, b) -> np.ndarray:
    """Solve A X = B column by column for a nonnegative matrix B."""
    b = np.asarray(b, dtype=float)
    if b.ndim != 2:
        raise TripletError("right-hand side must be a matrix")
    return gth_solve(factors, b)


def _row_kernel(factors: GthFactors) -> np.ndarray:
    # q (LU) = 0 with U[m, m] = 0: solve L^T q^T = e_m
    e = np.zeros(factors.m)
    e[-1] = 1.0
    return solve_triangular(factors.lower, e, trans="T", lower=True, unit_diagonal=True)


def _column_kernel(factors: GthFactors) -> np.ndarray:
    # (LU) x = 0 with U[m, m] = 0: solve U x = 0 with x_m = 1
    m = factors.m
    x = np.ones(m)
    if m > 1:
        x[:-1] = solve_triangular(factors.upper[:-1, :-1], -factors.upper[:-1, -1], lower=False)
    return x


def _normalized_kernel(vec: np.ndarray) -> np.ndarray:
    if not np.all(vec > 0):
        raise GthError("kernel vector is not strictly positive: the matrix is reducible")
    return vec / vec.sum()


def _singular_factors(rep: TripletRepresentation) -> GthFactors:
    factors = gth_factor(rep)
    if not factors.singular:
        raise GthError("matrix is nonsingular: final pivot is not zero")
    return factors


def gth_left_kernel(rep: TripletRepresentation) -> np.ndarray:
    """
    Left kernel of a singular irreducible M-matrix

    Args:
        rep: Triplet with w = 0

    Returns:
        Row vector q > 0 with q A = 0 and q 1 = 1
    """
    factors = _singular_factors(rep)
    if factors.transposed:
        return _normalized_kernel(_column_kernel(factors))
    return _normalized_kernel(_row_kernel(factors))


def gth_right_kernel(rep: TripletRepresentation) -> np.ndarray:
    """Right kernel x > 0 with A x = 0, normalized so that its entries sum to one."""
    factors = _singular_factors(rep)
    if factors.transposed:
        return _normalized_kernel(_row_kernel(factors))
    return _normalized_kernel(_column_kernel(factors))
