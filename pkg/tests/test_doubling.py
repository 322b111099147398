import logging

import numpy as np
import pytest

from conftest import MP, build_m2, build_random_model
from fluidq.doubling import (
    DoublingState,
    Variant,
    build_pencil,
    censored_reference_step,
    doubling_power_matrix,
    doubling_step,
    estimate_decay_rate,
    increment_ratio,
    initial_censoring_reference,
    initialize,
    pencil_triplet,
    riccati_residual,
    solve_riccati,
)
from fluidq.exceptions import ConvergenceError, ParameterError
from fluidq.model import DoublingParameters, Scheme, choose_parameters, stationary_phase_distribution

INVARIANT_SEEDS = [seed if seed < 20 else pytest.param(seed, marks=pytest.mark.slow) for seed in range(200)]


def iterates(model, variant=Variant.COMP, params=None, max_steps=30):
    params = params or choose_parameters(model)
    state = initialize(model, params, variant)
    yield state
    tol = model.n * MP
    for _ in range(max_steps):
        state = doubling_step(state, variant)
        yield state
        if increment_ratio(state) <= tol:
            return


def test_m2_initial_iterate_sda(m2):
    params = choose_parameters(m2)
    assert params.alpha == params.beta == 0.5
    for variant in Variant:
        state = initialize(m2, params, variant)
        np.testing.assert_allclose(state.matrix(), [[3 / 7, 4 / 7], [2 / 7, 5 / 7]], rtol=1e-14)


def test_m2_first_step_sda(m2):
    for variant in Variant:
        state = doubling_step(initialize(m2, choose_parameters(m2), variant), variant)
        np.testing.assert_allclose(state.matrix(), [[9 / 41, 32 / 41], [16 / 41, 25 / 41]], rtol=1e-14)
        assert state.k == 1


def test_m2_adda_step(m2):
    params = choose_parameters(m2, Scheme.ADDA)
    assert (params.alpha, params.beta) == (1.0, 0.5)
    state = initialize(m2, params)
    np.testing.assert_allclose([state.e, state.f, state.g, state.h], [[[1 / 3]], [[2 / 3]], [[2 / 3]], [[1 / 3]]], rtol=1e-14)
    state = doubling_step(state)
    np.testing.assert_allclose([state.e, state.f, state.g, state.h], [[[1 / 7]], [[4 / 7]], [[6 / 7]], [[3 / 7]]], rtol=1e-14)


def test_pencil_triplet_certifies_q(e1):
    for scheme in Scheme:
        params = choose_parameters(e1, scheme)
        pencil = build_pencil(e1, params)
        rep = pencil_triplet(e1, params, pencil)
        np.testing.assert_allclose(rep.full_matrix(), pencil.q, rtol=1e-14)
        np.testing.assert_allclose(pencil.q.sum(axis=1), pencil.r.sum(axis=1), rtol=1e-14)
        assert pencil.gamma == pytest.approx(0.5 / np.max(np.diag(pencil.q)))


def test_subtraction_free_pencil_matches_direct_diagonal(e1):
    params = choose_parameters(e1, Scheme.ADDA, subtraction_free=True)
    direct = choose_parameters(e1, Scheme.ADDA)
    direct = DoublingParameters(params.alpha, params.beta, direct.alpha_opt, direct.beta_opt, scheme=Scheme.ADDA)
    np.testing.assert_allclose(build_pencil(e1, params).r, build_pencil(e1, direct).r, rtol=1e-12, atol=1e-15)
    assert np.all(np.diag(build_pencil(e1, params).r) >= 0)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_initial_iterate_is_stochastic(e1, scheme):
    state = initialize(e1, choose_parameters(e1, scheme))
    np.testing.assert_allclose(state.matrix().sum(axis=1), 1.0, atol=10 * e1.n * MP)
    assert np.all(state.matrix() >= 0)


@pytest.mark.parametrize("seed", INVARIANT_SEEDS)
def test_comp_iterates_stochastic_and_monotone(seed):
    model = build_random_model(seed)
    previous = None
    for state in iterates(model):
        p = state.matrix()
        assert np.all(p >= 0)
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= model.n * (state.k + 1) * 10 * MP
        if previous is not None:
            assert np.all(state.g >= previous.g)
            assert np.all(state.h >= previous.h)
            assert np.all(state.last_increment >= 0)
        lhs = 1.0 - state.g @ state.h.sum(axis=1)
        rhs = state.g @ state.f.sum(axis=1) + state.e.sum(axis=1)
        np.testing.assert_allclose(lhs, rhs, atol=1e-13)
        previous = state


@pytest.mark.parametrize("variant", [Variant.GLX, Variant.XXL])
@pytest.mark.parametrize("seed", range(5))
def test_baseline_iterates_stay_stochastic(seed, variant):
    model = build_random_model(seed)
    for state in iterates(model, variant):
        assert np.max(np.abs(state.matrix().sum(axis=1) - 1.0)) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_weighted_invariance(seed, e1):
    model = e1 if seed == 0 else build_random_model(seed)
    dist = stationary_phase_distribution(model)
    weight = dist.xi * model.abs_c
    for state in iterates(model):
        assert np.linalg.norm(weight @ state.matrix() - weight) <= 1e-11 * np.linalg.norm(weight)


def test_step_agreement_comp_glx(e1):
    params = choose_parameters(e1)
    comp = doubling_step(initialize(e1, params, Variant.COMP), Variant.COMP)
    glx = doubling_step(initialize(e1, params, Variant.GLX), Variant.GLX)
    diff = np.linalg.norm(comp.matrix() - glx.matrix()) / np.linalg.norm(comp.matrix())
    assert diff <= 1e2 * MP


def test_unbalanced_blocks_match_balanced_formulas():
    model = next(m for m in map(build_random_model, range(100)) if m.n_plus != m.n_minus)
    state = initialize(model, choose_parameters(model))
    e, f, g, h = state.e, state.f, state.g, state.h
    inv_gh = np.linalg.inv(np.eye(model.n_plus) - g @ h)
    inv_hg = np.linalg.inv(np.eye(model.n_minus) - h @ g)
    for variant in Variant:
        nxt = doubling_step(state, variant)
        np.testing.assert_allclose(nxt.e, e @ inv_gh @ e, rtol=1e-10, atol=1e-15)
        np.testing.assert_allclose(nxt.g, g + e @ inv_gh @ g @ f, rtol=1e-10, atol=1e-15)
        np.testing.assert_allclose(nxt.f, f @ inv_hg @ f, rtol=1e-10, atol=1e-15)
        np.testing.assert_allclose(nxt.h, h + f @ inv_hg @ h @ e, rtol=1e-10, atol=1e-15)


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("seed", [None, "e1"] + list(range(20)))
def test_censoring_reference_matches_doubling(seed, k, e1):
    if seed is None:
        model = build_m2()
    elif seed == "e1":
        model = e1
    else:
        model = build_random_model(seed, max_phases=4)
    state = initialize(model, choose_parameters(model))
    reference = censored_reference_step(state.matrix(), model.n_plus, k)
    for _ in range(k):
        state = doubling_step(state)
    np.testing.assert_allclose(state.matrix(), reference, rtol=1e-12, atol=1e-13)


def test_censoring_reference_limits():
    p = build_m2()
    state = initialize(p, choose_parameters(p))
    with pytest.raises(ParameterError):
        censored_reference_step(state.matrix(), 1, 5)


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("seed", range(10))
def test_initial_censoring_reference(seed, scheme):
    model = build_random_model(seed)
    params = choose_parameters(model, scheme)
    np.testing.assert_allclose(
        initialize(model, params).matrix(), initial_censoring_reference(model, params), rtol=1e-12, atol=1e-14
    )


def test_censoring_gamma_bound(m2):
    params = choose_parameters(m2)
    with pytest.raises(ParameterError, match="gamma"):
        initial_censoring_reference(m2, params, gamma=10.0)


@pytest.mark.parametrize("scheme", [Scheme.SDA, Scheme.ADDA])
@pytest.mark.parametrize("model_name", ["m2", "random"])
def test_power_matrix_identity(model_name, scheme):
    model = build_m2() if model_name == "m2" else build_random_model(8, max_phases=2)
    params = choose_parameters(model, scheme)
    c_inv_t = model.generator / model.c[:, None]
    eye = np.eye(model.n)
    base = np.linalg.solve(eye - params.alpha * c_inv_t, eye + params.beta * c_inv_t)
    state = initialize(model, params)
    for k in range(3):
        expected = np.linalg.matrix_power(base, 2 ** k)
        actual = doubling_power_matrix(state)
        assert np.linalg.norm(actual - expected) <= 1e-12 * np.linalg.norm(expected)
        state = doubling_step(state)


def test_m2_power_matrix_values(m2):
    state = initialize(m2, choose_parameters(m2, Scheme.ADDA))
    np.testing.assert_allclose(doubling_power_matrix(state), [[0.0, 1.0], [-0.5, 1.5]], atol=1e-14)


def test_solve_m2(m2):
    solution = solve_riccati(m2)
    assert solution.psi[0, 0] == pytest.approx(1.0, rel=1e-15)
    assert solution.psi_hat[0, 0] == pytest.approx(0.5, rel=1e-14)
    assert solution.f_infinity[0, 0] == pytest.approx(0.5, rel=1e-14)
    diag = solution.diagnostics
    assert diag.positive_recurrent
    assert diag.perron_value == pytest.approx(0.5, rel=1e-8)
    assert diag.contraction == pytest.approx(0.6, rel=1e-8)
    assert diag.to_dict()["variant"] == "comp"


def test_solve_transient_model(m2_transient, caplog):
    with caplog.at_level(logging.WARNING, logger="fluidq.doubling"):
        solution = solve_riccati(m2_transient)
    assert "not positive recurrent" in caplog.text
    assert not solution.diagnostics.positive_recurrent
    assert solution.diagnostics.perron_value is None
    assert solution.psi[0, 0] == pytest.approx(0.5, rel=1e-14)


def test_e1_psi(e1):
    psi = solve_riccati(e1, tol=1e-15).psi
    expected = np.array([[0.195, 0.195, 0.61], [0.5, 0.5, 0.0], [0.5, 0.5, 0.0]])
    large = expected > 0
    np.testing.assert_allclose(psi[large], expected[large], rtol=0.02)
    assert 1e-9 <= psi[1, 2] <= 3e-9
    assert 1e-9 <= psi[2, 2] <= 3e-9


def test_e1_quadratic_convergence(e1):
    solution = solve_riccati(e1, tol=1e-15)
    ratios = solution.diagnostics.increment_ratios
    assert solution.diagnostics.iterations <= 20
    checked = 0
    for r_k, r_next in zip(ratios, ratios[1:]):
        if 1e-12 <= r_k <= 1e-4 and r_next > 0:
            assert np.log(r_next) <= 1.5 * np.log(r_k)
            checked += 1
    assert checked >= 1


@pytest.mark.parametrize("seed", INVARIANT_SEEDS)
def test_random_solution_properties(seed):
    model = build_random_model(seed)
    solution = solve_riccati(model)
    psi = solution.psi
    assert np.all(psi >= 0)
    np.testing.assert_allclose(psi.sum(axis=1), 1.0, atol=1e-13)
    assert np.max(riccati_residual(model, psi)) <= 1e-10
    assert np.all(solution.psi_hat.sum(axis=1) <= 1.0 + 1e-13)
    np.testing.assert_allclose(solution.f_infinity.sum(axis=1), 1.0 - solution.psi_hat.sum(axis=1), atol=1e-13)
    lam, delta = estimate_decay_rate(model, solution)
    if lam is not None:
        assert lam > 0 and 0 < delta < 1


def test_schemes_agree(e1):
    solutions = [solve_riccati(e1, choose_parameters(e1, scheme)).psi for scheme in Scheme]
    for other in solutions[1:]:
        assert np.max(np.abs(other - solutions[0]) / solutions[0]) <= 1e-13


def test_subtraction_free_solve_agrees(e1):
    plain = solve_riccati(e1).psi
    free = solve_riccati(e1, choose_parameters(e1, Scheme.ADDA, subtraction_free=True)).psi
    assert np.max(np.abs(free - plain) / plain) <= 1e-13


def test_max_iter_raises_with_diagnostics(e1):
    with pytest.raises(ConvergenceError) as info:
        solve_riccati(e1, max_iter=1)
    assert info.value.diagnostics.iterations == 1
    assert info.value.to_dict()["diagnostics"]["iterations"] == 1


def test_tol_must_be_positive(m2):
    with pytest.raises(ParameterError):
        solve_riccati(m2, tol=0.0)


def test_state_round_trip():
    p = np.arange(1.0, 10.0).reshape(3, 3)
    state = DoublingState.from_matrix(p, 1)
    np.testing.assert_array_equal(state.matrix(), p)
    assert (state.n_plus, state.n_minus) == (1, 2)
