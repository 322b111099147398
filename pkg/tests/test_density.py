import numpy as np
import pytest
import scipy.linalg
from scipy.integrate import simpson

from conftest import MP, build_m2, build_random_model
from fluidq.density import (
    TAYLOR_DEGREE,
    boundary_mass,
    build_return_operators,
    density_at,
    expm_nonneg,
    stationary_density,
)
from fluidq.doubling import solve_riccati
from fluidq.exceptions import NumericalError, ParameterError, RecurrenceError
from fluidq.model import stationary_phase_distribution
from fluidq.oracle import expm_extended


def pipeline(model):
    solution = solve_riccati(model)
    ops = build_return_operators(model, solution)
    return solution, ops, boundary_mass(model, ops)


def test_taylor_degree():
    assert TAYLOR_DEGREE == 18


def test_m2_closed_form(m2):
    solution = solve_riccati(m2)
    result = stationary_density(m2, solution, [1.0])
    np.testing.assert_allclose(result.p_minus, [0.25], rtol=1e-13)
    expected = np.array([0.25, 0.125]) * np.exp(-0.5)
    np.testing.assert_allclose(result.values[0], expected, rtol=1e-13)
    assert result.total()[0] == pytest.approx(0.375 * np.exp(-0.5), rel=1e-13)
    np.testing.assert_array_equal(result.p_plus, [0.0])


def test_m2_operators(m2):
    _, ops, mass = pipeline(m2)
    np.testing.assert_allclose(ops.k, [[-0.5]], rtol=1e-14)
    np.testing.assert_allclose(ops.v, [[1.0, 0.5]], rtol=1e-14)
    np.testing.assert_allclose(ops.w, [[0.0]], atol=1e-15)
    assert mass.normalizer == pytest.approx(4.0, rel=1e-13)


def test_density_nonnegative(e1):
    solution = solve_riccati(e1)
    result = stationary_density(e1, solution, [0.01, 1.0, 100.0])
    assert np.all(result.values >= 0)
    assert np.all(result.p_minus >= 0)


def test_w_rows_sum_to_zero(e1):
    _, ops, mass = pipeline(e1)
    assert np.all(np.abs(ops.w.sum(axis=1)) <= 1e2 * MP * np.abs(ops.w).sum(axis=1))
    residual = mass.p_minus @ ops.w
    assert np.all(np.abs(residual) <= 1e2 * MP * (mass.p_minus @ np.abs(ops.w)))


def test_w_hat_row_sums_match_f_infinity(e1):
    solution, ops, _ = pipeline(e1)
    target = e1.t_pm @ solution.f_infinity.sum(axis=1)
    assert np.all(ops.neg_w_hat_rep.w >= 0)
    np.testing.assert_allclose(ops.neg_w_hat_rep.w, target, rtol=1e-14)
    slack = 1e2 * MP * np.abs(ops.w_hat).sum(axis=1)
    assert np.all(np.abs(ops.w_hat.sum(axis=1) + target) <= slack)


def test_k_triplet_identity(e1):
    solution, ops, _ = pipeline(e1)
    dist = stationary_phase_distribution(e1)
    p = e1.n_plus
    explicit_k = e1.t_pp / e1.c_plus[:, None] + solution.psi @ (e1.t_mp / e1.abs_c_minus[:, None])
    weight = dist.xi[:p] * e1.c_plus
    lhs = -(weight @ explicit_k)
    scale = weight @ np.abs(explicit_k)
    assert np.all(np.abs(lhs - ops.neg_k_rep.w) <= 1e-11 * scale)
    assert np.linalg.norm(ops.k - explicit_k) <= 1e-12 * np.linalg.norm(np.abs(explicit_k))


@pytest.mark.parametrize("seed", ["e1", 0, 1, 2, 3])
def test_subspace_identity(seed, e1):
    model = e1 if seed == "e1" else build_random_model(seed)
    _, ops, _ = pipeline(model)
    c = np.diag(model.c)
    lhs = ops.v @ model.generator
    rhs = ops.k @ ops.v @ c
    scale = np.linalg.norm(np.abs(ops.v) @ np.abs(model.generator)) + np.linalg.norm(np.abs(ops.k) @ np.abs(ops.v) @ np.abs(c))
    assert np.linalg.norm(lhs - rhs) <= 1e-11 * scale


def test_density_satisfies_ode(e1):
    _, ops, mass = pipeline(e1)
    h = 1e-5
    derivative = (density_at(ops, mass, 1.0 + h) - density_at(ops, mass, 1.0 - h)) / (2 * h)
    f = density_at(ops, mass, 1.0)
    expected = f @ e1.generator / e1.c
    scale = np.linalg.norm(f @ np.abs(e1.generator) / e1.abs_c)
    assert np.linalg.norm(derivative - expected) <= 1e-6 * scale


def test_density_at_zero(m2):
    _, ops, mass = pipeline(m2)
    np.testing.assert_allclose(density_at(ops, mass, 0.0), mass.p_minus @ ops.t_minus_plus @ ops.v, rtol=1e-15)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["m2", "e1"])
def test_total_mass_is_one(name, e1):
    model = build_m2() if name == "m2" else e1
    _, ops, mass = pipeline(model)
    decay = np.min(np.linalg.eigvals(-ops.k).real)
    grid = np.concatenate([[0.0], np.geomspace(1e-8, 40.0 / decay, 20000)])
    totals = np.array([density_at(ops, mass, x).sum() for x in grid])
    assert mass.p_minus.sum() + simpson(totals, x=grid) == pytest.approx(1.0, abs=1e-8)


def test_levels_must_be_positive(m2):
    solution = solve_riccati(m2)
    for levels in ([0.0], [-1.0], [np.inf], []):
        with pytest.raises(ParameterError):
            stationary_density(m2, solution, levels)


def test_transient_model_has_no_density(m2, m2_transient):
    solution = solve_riccati(m2)
    with pytest.raises(RecurrenceError, match="not positive recurrent"):
        build_return_operators(m2_transient, solution)


def random_generator(rng, n):
    a = 10.0 ** rng.uniform(-8.0, 0.0, (n, n))
    np.fill_diagonal(a, 0.0)
    np.fill_diagonal(a, -a.sum(axis=1) - rng.uniform(0.0, 1.0, n))
    return a


@pytest.mark.parametrize("seed", [s if s < 10 else pytest.param(s, marks=pytest.mark.slow) for s in range(50)])
def test_expm_matches_extended_precision(seed):
    a = random_generator(np.random.default_rng(seed), 6)
    reference = expm_extended(a, 1.0)
    taylor = expm_nonneg(a, 1.0)
    assert np.all(taylor >= 0)
    assert np.max(np.abs(taylor - reference) / reference) <= 1e-12
    np.testing.assert_allclose(expm_nonneg(a, 1.0, "scipy"), scipy.linalg.expm(a), rtol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_expm_semigroup(seed):
    rng = np.random.default_rng(100 + seed)
    a = random_generator(rng, int(rng.integers(2, 7)))
    s, t = rng.uniform(0.1, 3.0, 2)
    joint = expm_nonneg(a, s + t)
    split = expm_nonneg(a, s) @ expm_nonneg(a, t)
    assert np.linalg.norm(joint - split, 1) <= 1e-12 * np.linalg.norm(joint, 1)


def test_expm_identity_at_zero():
    a = np.array([[-1.0, 1.0], [2.0, -2.0]])
    np.testing.assert_array_equal(expm_nonneg(a, 0.0), np.eye(2))


@pytest.mark.parametrize(
    "a, t, method",
    [
        (np.ones((2, 3)), 1.0, "taylor"),
        (np.array([[-1.0, -1.0], [1.0, -1.0]]), 1.0, "taylor"),
        (np.array([[-1.0, 1.0], [1.0, -1.0]]), -1.0, "taylor"),
        (np.array([[-1.0, 1.0], [1.0, -1.0]]), 1.0, "pade"),
    ],
)
def test_expm_argument_errors(a, t, method):
    with pytest.raises(ParameterError):
        expm_nonneg(a, t, method)


def test_expm_overflow():
    with pytest.raises(NumericalError, match="overflow"):
        expm_nonneg(np.array([[1000.0]]), 1.0)
