"""
Fluid queue problem instances: parsing, validation, the stationary phase
distribution and the choice of doubling parameters.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from .exceptions import ModelError, ParameterError
from .gth import Side, TripletRepresentation, gth_left_kernel

logger = logging.getLogger(__name__)

MACHINE_PRECISION = float(np.finfo(float).eps)
DEFAULT_ETA = 0.5


class Scheme(str, Enum):
    SDA = "sda"
    SDA_SS = "sda-ss"
    ADDA = "adda"


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FluidQueueModel:
    """
    A Markov-modulated fluid queue with generator T and rates c

    The diagonal of T is never an input: it is derived as the negated sum of
    the nonnegative off-diagonal rates in each row.
    """

    n_plus: int
    n_minus: int
    t_offdiag: np.ndarray
    c: np.ndarray
    t_diag: np.ndarray = field(init=False)

    def __post_init__(self):
        offdiag = np.array(self.t_offdiag, dtype=float)
        np.fill_diagonal(offdiag, 0.0)
        object.__setattr__(self, "t_offdiag", _readonly(offdiag))
        object.__setattr__(self, "c", _readonly(np.array(self.c, dtype=float)))
        object.__setattr__(self, "t_diag", _readonly(-self.t_offdiag.sum(axis=1)))

    @classmethod
    def from_arrays(cls, n_plus: int, n_minus: int, t, c) -> "FluidQueueModel":
        """
        Validate arrays and build a model

        Args:
            n_plus: Number of phases with positive rate (listed first)
            n_minus: Number of phases with negative rate
            t: n x n generator; its diagonal is ignored
            c: Fluid rates, positive for the first n_plus phases

        Returns:
            The validated model
        """
        if int(n_plus) != n_plus or int(n_minus) != n_minus or n_plus < 1 or n_minus < 1:
            raise ModelError(f"nplus and nminus must be positive integers, got {n_plus} and {n_minus}")
        n_plus, n_minus = int(n_plus), int(n_minus)
        n = n_plus + n_minus
        t = np.array(t, dtype=float)
        c = np.array(c, dtype=float).ravel()
        if t.shape != (n, n):
            raise ModelError(f"generator must be {n}x{n}, got shape {t.shape}")
        if c.shape != (n,):
            raise ModelError(f"expected {n} rates, got {c.shape[0]}")
        np.fill_diagonal(t, 0.0)
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(c)):
            raise ModelError("generator and rates must be finite")
        bad = np.argwhere(t < 0)
        if bad.size:
            i, j = bad[0]
            raise ModelError(f"negative off-diagonal rate T[{i + 1},{j + 1}] = {t[i, j]!r}")
        for i, ci in enumerate(c):
            if ci == 0:
                raise ModelError(f"zero rate in phase {i + 1}")
            if (ci > 0) != (i < n_plus):
                expected = "positive" if i < n_plus else "negative"
                raise ModelError(f"rate of phase {i + 1} is {ci!r}, expected {expected} for the declared partition")
        _check_irreducible(t)
        return cls(n_plus, n_minus, t, c)

    @property
    def n(self) -> int:
        return self.n_plus + self.n_minus

    @property
    def generator(self) -> np.ndarray:
        return self.t_offdiag + np.diag(self.t_diag)

    @property
    def row_sums(self) -> np.ndarray:
        """|T_ii| as the sum of the off-diagonal rates in each row"""
        return self.t_offdiag.sum(axis=1)

    @property
    def c_plus(self) -> np.ndarray:
        return self.c[:self.n_plus]

    @property
    def abs_c_minus(self) -> np.ndarray:
        return -self.c[self.n_plus:]

    @property
    def abs_c(self) -> np.ndarray:
        return np.abs(self.c)

    def block(self, rows: str, cols: str) -> np.ndarray:
        """Block T_{rows,cols} of the generator, rows/cols in {'+', '-'}"""
        p = self.n_plus
        pick = {"+": slice(0, p), "-": slice(p, self.n)}
        return self.generator[pick[rows], pick[cols]]

    @property
    def t_pp(self) -> np.ndarray:
        return self.block("+", "+")

    @property
    def t_pm(self) -> np.ndarray:
        return self.block("+", "-")

    @property
    def t_mp(self) -> np.ndarray:
        return self.block("-", "+")

    @property
    def t_mm(self) -> np.ndarray:
        return self.block("-", "-")


def _check_irreducible(offdiag: np.ndarray):
    graph = csr_matrix(offdiag > 0)
    n = offdiag.shape[0]
    for g, direction in ((graph, "forward"), (graph.T.tocsr(), "backward")):
        reached = breadth_first_order(g, 0, directed=True, return_predecessors=False)
        if len(reached) < n:
            missing = sorted(set(range(n)) - set(reached.tolist()))[0]
            if direction == "forward":
                raise ModelError(f"reducible generator: phase {missing + 1} cannot be reached from phase 1")
            raise ModelError(f"reducible generator: phase 1 cannot be reached from phase {missing + 1}")


def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0].strip()


def _parse_reals(tokens: List[str], what: str) -> List[float]:
    try:
        return [float(tok) for tok in tokens]
    except ValueError:
        raise ModelError(f"malformed number in {what}: {' '.join(tokens)}") from None


def parse_model(text: str) -> FluidQueueModel:
    """
    Parse the model file format

    Format: ``nplus <int>``, ``nminus <int>``, ``c <n reals>``, then n rows
    of n reals for T. '#' starts a comment. Diagonal entries of T are ignored.
    """
    lines = [ln for ln in (_strip_comment(raw) for raw in text.splitlines()) if ln]
    if len(lines) < 3:
        raise ModelError("model file needs nplus, nminus and c lines")

    def keyword_line(line: str, key: str) -> List[str]:
        tokens = line.split()
        if not tokens or tokens[0] != key:
            raise ModelError(f"expected a '{key}' line, got: {line}")
        return tokens[1:]

    counts = []
    for line, key in ((lines[0], "nplus"), (lines[1], "nminus")):
        tokens = keyword_line(line, key)
        if len(tokens) != 1:
            raise ModelError(f"'{key}' takes exactly one integer")
        try:
            counts.append(int(tokens[0]))
        except ValueError:
            raise ModelError(f"'{key}' is not an integer: {tokens[0]}") from None
    n_plus, n_minus = counts
    if n_plus < 1 or n_minus < 1:
        raise ModelError(f"nplus and nminus must be positive, got {n_plus} and {n_minus}")
    n = n_plus + n_minus

    c = _parse_reals(keyword_line(lines[2], "c"), "c")
    if len(c) != n:
        raise ModelError(f"expected {n} rates on the c line, got {len(c)}")

    rows = lines[3:]
    if len(rows) != n:
        raise ModelError(f"expected {n} generator rows, got {len(rows)}")
    t = []
    for i, row in enumerate(rows):
        values = _parse_reals(row.split(), f"generator row {i + 1}")
        if len(values) != n:
            raise ModelError(f"generator row {i + 1} has {len(values)} entries, expected {n}")
        t.append(values)
    return FluidQueueModel.from_arrays(n_plus, n_minus, t, c)


def format_model(model: FluidQueueModel) -> str:
    """Serialize a model; reals use shortest round-trip form so parsing is exact."""
    lines = [
        f"nplus {model.n_plus}",
        f"nminus {model.n_minus}",
        "c " + " ".join(repr(float(x)) for x in model.c),
    ]
    for row in model.generator:
        lines.append(" ".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class PhaseDistribution:
    xi: np.ndarray
    drift: float

    @property
    def positive_recurrent(self) -> bool:
        return self.drift < 0


def stationary_phase_distribution(model: FluidQueueModel) -> PhaseDistribution:
    """Stationary distribution xi of T via the GTH left kernel of -T, and the drift xi C 1."""
    rep = TripletRepresentation.from_matrix(-model.t_offdiag, np.ones(model.n), np.zeros(model.n), Side.RIGHT)
    xi = gth_left_kernel(rep)
    p = model.n_plus
    up = float(np.sum(xi[:p] * model.c_plus))
    down = float(np.sum(xi[p:] * model.abs_c_minus))
    drift = up - down
    logger.debug("phase distribution computed, drift %.6e", drift)
    return PhaseDistribution(xi, drift)


def optimal_parameters(model: FluidQueueModel) -> Tuple[float, float]:
    """
    Largest admissible doubling parameters

    alpha_opt = min over down phases of |c_i| / |T_ii| and beta_opt the same
    over up phases, evaluated as reciprocals of max |T_ii| / |c_i|.
    """
    r = model.row_sums
    p = model.n_plus
    alpha_opt = 1.0 / np.max(r[p:] / model.abs_c_minus)
    beta_opt = 1.0 / np.max(r[:p] / model.c_plus)
    return float(alpha_opt), float(beta_opt)


def subtraction_free_parameters(model: FluidQueueModel) -> Tuple[float, float]:
    """alpha = 1 / sum over down phases of |T_kk| / |c_k|, beta likewise over up phases."""
    r = model.row_sums
    p = model.n_plus
    alpha = 1.0 / np.sum(r[p:] / model.abs_c_minus)
    beta = 1.0 / np.sum(r[:p] / model.c_plus)
    return float(alpha), float(beta)


@dataclass(frozen=True)
class DoublingParameters:
    alpha: float
    beta: float
    alpha_opt: float
    beta_opt: float
    eta: float = DEFAULT_ETA
    scheme: Scheme = Scheme.SDA
    subtraction_free: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not 0 < self.eta <= 1:
            raise ParameterError(f"eta must lie in (0, 1], got {self.eta}")
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("alpha and beta must be nonnegative")
        if self.alpha == 0 and self.beta == 0:
            raise ParameterError("alpha and beta cannot both be zero")
        if self.alpha > self.alpha_opt:
            raise ParameterError(f"alpha = {self.alpha} exceeds alpha_opt = {self.alpha_opt}")
        if self.beta > self.beta_opt:
            raise ParameterError(f"beta = {self.beta} exceeds beta_opt = {self.beta_opt}")
        if self.scheme is Scheme.SDA_SS and self.alpha != 0:
            raise ParameterError("the sda-ss scheme requires alpha = 0")
        if self.scheme is Scheme.SDA and self.alpha != self.beta:
            raise ParameterError("the sda scheme requires alpha = beta")

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "alpha_opt": self.alpha_opt,
            "beta_opt": self.beta_opt,
            "eta": self.eta,
            "scheme": self.scheme.value,
            "subtraction_free": self.subtraction_free,
        }


def choose_parameters(
    model: FluidQueueModel,
    scheme: Scheme = Scheme.SDA,
    eta: float = DEFAULT_ETA,
    subtraction_free: bool = False,
) -> DoublingParameters:
    """
    Pick alpha and beta for a doubling scheme

    Args:
        model: The fluid queue
        scheme: SDA (alpha = beta), SDA-SS (alpha = 0) or ADDA
        eta: Safety factor applied to the optimal values
        subtraction_free: Use the subtraction-free alpha and beta (ADDA only)
    """
    scheme = Scheme(scheme)
    alpha_opt, beta_opt = optimal_parameters(model)
    if subtraction_free:
        if scheme is not Scheme.ADDA:
            raise ParameterError("subtraction-free parameters require the adda scheme")
        alpha, beta = subtraction_free_parameters(model)
    elif scheme is Scheme.SDA:
        alpha = beta = eta * min(alpha_opt, beta_opt)
    elif scheme is Scheme.SDA_SS:
        alpha, beta = 0.0, eta * beta_opt
    else:
        alpha, beta = eta * alpha_opt, eta * beta_opt
    return DoublingParameters(alpha, beta, alpha_opt, beta_opt, eta, scheme, subtraction_free)
