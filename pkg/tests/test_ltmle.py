import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import loop_fit_epsilon, loop_ltmle, random_mdp, random_policy
from rltmle.baseline import dm_estimate
from rltmle.environments import make_environment, make_modelwin
from rltmle.exceptions import ConfigurationError, DegenerateWeightsWarning, InvariantViolation, SolverError
from rltmle.ltmle import (
    LTMLEConfig,
    RegularizationTriple,
    cv_ltmle,
    default_delta_schedule,
    eif_evaluate,
    eif_values,
    fit_epsilon,
    logit,
    ltmle_backward,
    normalize_q,
    perturb,
    sigmoid,
    soften,
    threshold,
)
from rltmle.mdp import (
    Dataset,
    DiscountSpec,
    QStack,
    StochasticPolicy,
    TabularMDP,
    exact_policy_value,
    exact_q_functions,
    range_bounds,
    simulate,
)
from rltmle.model import model_based_q

ONE = DiscountSpec(1.0)


def _setup(seed, n=25, T=4, gamma=0.9, S=3, A=2, spread=0.9):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A)
    pi_e, pi_b = random_policy(rng, S, A), random_policy(rng, S, A)
    data = simulate(mdp, pi_b, T, n, seed=seed)
    d = DiscountSpec(gamma)
    delta = range_bounds(mdp.reward_bounds, T, d)
    q = QStack(rng.uniform(-spread, spread, size=(T, S, A)) * delta[:, None, None], delta, d)
    return mdp, pi_e, pi_b, data, q, d


def _nll(eps, w, u, q, lam):
    p = sigmoid(logit(np.asarray(q)) + eps)
    return float(np.sum(w * -(u * np.log(p) + (1 - u) * np.log1p(-p))) + lam * abs(eps))


def test_normalize_examples():
    assert normalize_q(0.0, 5.0) == 0.5
    assert normalize_q(5.0, 5.0) == 1.0 and normalize_q(-5.0, 5.0) == 0.0
    with pytest.raises(InvariantViolation):
        normalize_q(5.1, 5.0)


def test_threshold_and_perturb_examples():
    assert np.array_equal(threshold([0.0, 0.5, 1.0], 0.01), [0.01, 0.5, 0.99])
    assert perturb(0.5, 0.0) == 0.5
    assert perturb(0.5, math.log(4.0)) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(InvariantViolation):
        perturb(0.0, 1.0)
    with pytest.raises(ConfigurationError):
        threshold(0.3, 0.5)


def test_soften_examples():
    assert np.allclose(soften([1.0, 3.0], 1.0), [0.25, 0.75])
    assert np.allclose(soften([1.0, 4.0], 0.5), [1 / 3, 2 / 3])
    assert np.allclose(soften([0.0, 2.0], 0.0), [0.5, 0.5])
    with pytest.warns(DegenerateWeightsWarning):
        assert np.all(soften([0.0, 0.0], 1.0) == 0)


def test_delta_schedule():
    assert default_delta_schedule(100) == 0.01
    assert default_delta_schedule(10_000) == pytest.approx(0.0025)
    with pytest.raises(ConfigurationError):
        LTMLEConfig(delta_schedule=lambda n: 0.6).delta_n(10)


def test_fit_epsilon_examples():
    assert fit_epsilon([0.5, 0.5], [0.5, 0.5], [0.5, 0.5]) == 0.0
    assert fit_epsilon([1.0], [0.8], [0.5]) == pytest.approx(math.log(4.0), abs=1e-9)
    # |score(0)| = 0.3, so a penalty above it pins eps at 0 and one below shrinks it
    assert fit_epsilon([1.0], [0.8], [0.5], lam=0.31) == 0.0
    assert fit_epsilon([1.0], [0.8], [0.5], lam=0.1) == pytest.approx(math.log(0.7 / 0.3), abs=1e-9)
    with pytest.warns(DegenerateWeightsWarning):
        assert fit_epsilon([0.0, 0.0], [0.2, 0.9], [0.5, 0.5]) == 0.0


@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.01, 0.05, 0.2]))
def test_fit_epsilon_matches_brent_and_grid(seed, lam):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 8))
    w = rng.dirichlet(np.ones(k))
    u = rng.uniform(0, 1, k)
    q = rng.uniform(0.05, 0.95, k)
    eps = fit_epsilon(w, u, q, lam)
    assert abs(eps - loop_fit_epsilon(list(w), list(u), list(q), lam)) < 1e-8
    grid = np.linspace(-6, 6, 12_001)
    best = min(_nll(e, w, u, q, lam) for e in grid)
    assert _nll(eps, w, u, q, lam) <= best + 1e-12


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("triple", [(1.0, 4, 0.0), (0.5, 2, 0.0), (0.0, 4, 0.0), (1.0, 3, 0.01), (0.3, 1, 0.05)])
def test_ltmle_matches_ungrouped_loop(seed, triple):
    _, pi_e, pi_b, data, q, d = _setup(seed)
    reg = RegularizationTriple(*triple)
    res = ltmle_backward(data, q, pi_e, pi_b, d, reg)
    est, eps = loop_ltmle(data, q, pi_e, pi_b, d, *triple, default_delta_schedule(data.n))
    assert abs(res.estimate - est) < 1e-8
    assert np.max(np.abs(res.fit.epsilon - eps)) < 1e-8


def test_tau_zero_is_direct_method():
    for seed in range(5):
        _, pi_e, pi_b, data, q, d = _setup(seed, spread=0.5)
        res = ltmle_backward(data, q, pi_e, pi_b, d, RegularizationTriple(1.0, 0, 0.0))
        assert np.all(res.fit.epsilon == 0)
        assert abs(res.estimate - dm_estimate(q, pi_e, data.initial_observation)) < 1e-12


@settings(max_examples=40)
@given(st.integers(0, 100_000), st.integers(1, 6), st.integers(1, 40), st.floats(0.5, 1.0))
def test_score_equations_solved(seed, T, n, gamma):
    mdp, pi_e, pi_b, data, q, d = _setup(seed, n=n, T=T, gamma=gamma)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWeightsWarning)
        res = ltmle_backward(data, q, pi_e, pi_b, d)
    fit = res.fit
    assert np.all(np.abs(fit.score_residuals[~fit.clamped]) < 1e-8)
    assert abs(res.estimate) <= q.delta[0] * (1 + 1e-12)
    assert np.all(np.abs(res.q_targeted.q) <= q.delta[:, None, None] * (1 + 1e-12))
    if not (fit.clamped.any() or fit.degenerate.any()):
        # solved score equations make the influence function average to zero
        assert abs(res.eif_values.mean()) < 1e-7 * q.delta[0] * max(1.0, np.abs(res.eif_values).max())


def test_eif_vectorized_matches_loop():
    _, pi_e, pi_b, data, q, d = _setup(3, n=12, T=5)
    res = ltmle_backward(data, q, pi_e, pi_b, d)
    loop = [eif_evaluate(data[i], res.q_targeted, pi_e, pi_b, d) for i in range(data.n)]
    assert np.max(np.abs(res.eif_values - loop)) < 1e-12


def test_eif_zero_when_every_ratio_vanishes():
    mdp = TabularMDP.from_transitions(1, 2, {(0, 0): [(0, 1.0, 1.0)], (0, 1): [(0, 0.0, 1.0)]})
    pi_e, pi_b = StochasticPolicy([[0.0, 1.0]]), StochasticPolicy([[0.5, 0.5]])
    data = Dataset(np.zeros((3, 2), int), np.zeros((3, 2), int), np.zeros((3, 2), int), np.ones((3, 2)))
    q = QStack(np.full((2, 1, 2), 0.3), range_bounds((0.0, 1.0), 2, ONE), ONE)
    assert np.all(eif_values(data, q, pi_e, pi_b, ONE) == 0)


def test_constant_reward_recovers_horizon_times_reward():
    c, T = 0.3, 6
    mdp = TabularMDP.from_transitions(1, 2, {(0, 0): [(0, c, 1.0)], (0, 1): [(0, c, 1.0)]}, reward_bounds=(-1, 1))
    pi_e, pi_b = StochasticPolicy([[0.2, 0.8]]), StochasticPolicy([[0.6, 0.4]])
    data = simulate(mdp, pi_b, T, 50, seed=1)
    q = QStack(np.full((T, 1, 2), -0.4), range_bounds((-1, 1), T, ONE), ONE)
    assert abs(ltmle_backward(data, q, pi_e, pi_b, ONE).estimate - T * c) < 1e-8
    cv = cv_ltmle(data, lambda part: q, pi_e, pi_b, ONE)
    assert abs(cv.estimate - T * c) < 1e-8


def test_exact_q_needs_little_fluctuation():
    env = make_environment("modelwin", horizon=4)
    q = exact_q_functions(env.mdp, env.evaluation, 4, ONE)
    data = simulate(env.mdp, env.behavior, 4, 5000, seed=3)
    res = ltmle_backward(data, q, env.evaluation, env.behavior, ONE)
    assert np.max(np.abs(res.fit.epsilon)) < 0.05


def test_solver_iteration_cap():
    _, pi_e, pi_b, data, q, d = _setup(1)
    with pytest.raises(SolverError):
        ltmle_backward(data, q, pi_e, pi_b, d, config=LTMLEConfig(max_iter=2))


def test_cv_with_duplicated_folds_equals_split_estimator():
    env = make_modelwin()
    half = simulate(env.mdp, env.behavior, 20, 60, seed=4)
    doubled = Dataset.concatenate([half, half])
    fit_q = lambda part: model_based_q(part, env.mdp, env.evaluation, 20, ONE)
    cfg = LTMLEConfig(delta_schedule=lambda n: 0.01, folds=2)
    cv = cv_ltmle(doubled, fit_q, env.evaluation, env.behavior, ONE, config=cfg)
    split = ltmle_backward(half, fit_q(half), env.evaluation, env.behavior, ONE, config=cfg)
    assert abs(cv.estimate - split.estimate) < 1e-10
    assert np.allclose(cv.fold_estimates, split.estimate, atol=1e-10)


def test_cv_with_exact_q_close_to_truth():
    env = make_environment("modelwin", horizon=4)
    exact = exact_q_functions(env.mdp, env.evaluation, 4, ONE)
    data = simulate(env.mdp, env.behavior, 4, 4000, seed=5)
    cv = cv_ltmle(data, lambda part: exact, env.evaluation, env.behavior, ONE)
    truth = exact_policy_value(env.mdp, env.evaluation, 4, ONE)
    assert cv.folds == 5 and len(cv.fold_estimates) == 5
    assert abs(cv.estimate - truth) < 0.1


def test_cv_configuration_errors():
    _, pi_e, pi_b, data, q, d = _setup(2, n=3)
    with pytest.raises(ConfigurationError):
        cv_ltmle(data, lambda part: q, pi_e, pi_b, d, config=LTMLEConfig(folds=1))
    with pytest.raises(ConfigurationError):
        cv_ltmle(data, lambda part: q, pi_e, pi_b, d, config=LTMLEConfig(folds=5))


def test_triple_validation_and_roundtrip():
    with pytest.raises(ConfigurationError):
        RegularizationTriple(1.5, 1, 0)
    with pytest.raises(ConfigurationError):
        RegularizationTriple(1.0, -1, 0)
    with pytest.raises(ConfigurationError):
        RegularizationTriple(1.0, 1, -0.1)
    trip = RegularizationTriple(0.5, 3, 0.01)
    assert RegularizationTriple.from_list(trip.as_list()) == trip
    assert RegularizationTriple.unregularized(7).is_unregularized(7)
    _, pi_e, pi_b, data, q, d = _setup(0)
    with pytest.raises(ConfigurationError):
        ltmle_backward(data, q, pi_e, pi_b, d, RegularizationTriple(1.0, 9, 0.0))
