import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coirl.cmdp import ContextualMDP, instantiate, mdp_from_reward
from coirl.environments import GridWorldSpec, make_gridworld, sample_context
from coirl.errors import InvalidArgument, NonConvergence
from coirl.expert import GEOMETRIC, rollout_estimates
from coirl.planner import (
    PlannerConfig,
    feature_expectations,
    optimal_policies,
    optimal_policies_stacked,
    policy_evaluation,
    q_values,
    state_feature_expectations,
    successor_features,
    value_iteration,
)

from conftest import random_cmdp


def single_state(gamma=0.9):
    return ContextualMDP(np.ones((1, 1, 2, 1)), np.ones((1, 1)), [1.0], gamma, w_star=np.ones((1, 1)))


def test_single_state_value():
    cfg = PlannerConfig(tol=1e-6)
    V, pol = value_iteration(instantiate(single_state(), [1.0]), cfg)
    assert abs(V[0] - 10.0) <= cfg.tol / 0.1
    Q = q_values(instantiate(single_state(), [1.0]), np.array([10.0]))
    assert np.allclose(Q, 10.0)


def test_two_state_chain():
    P = np.zeros((1, 2, 1, 2))
    P[0, :, 0, 1] = 1.0
    cmdp = ContextualMDP(P, np.array([[0.0], [1.0]]), [1.0, 0.0], 0.5, w_star=np.ones((1, 1)))
    V, _ = value_iteration(instantiate(cmdp, [1.0]), PlannerConfig(tol=1e-10))
    assert np.allclose(V, [1.0, 2.0], atol=1e-9)


def test_greedy_policy_matches_enumeration_on_2x2_grid(rng):
    grid = make_gridworld(GridWorldSpec(2, 2))
    for _ in range(5):
        c = sample_context(rng, grid.d)
        mdp = instantiate(grid, c)
        _, pol = value_iteration(mdp, PlannerConfig(tol=1e-10))
        best = max(
            (np.asarray(p) for p in itertools.product(range(4), repeat=4)),
            key=lambda p: mdp.xi @ policy_evaluation(mdp, p),
        )
        assert np.isclose(mdp.xi @ policy_evaluation(mdp, pol), mdp.xi @ policy_evaluation(mdp, best), atol=1e-8)


def test_nonconvergence_carries_residual():
    with pytest.raises(NonConvergence) as info:
        value_iteration(instantiate(single_state(0.99), [1.0]), PlannerConfig(tol=1e-12, max_iters=3))
    assert info.value.residual > 0


def test_feature_expectation_examples():
    cmdp = ContextualMDP(np.ones((1, 1, 1, 1)), [[0.0, 1.0]], [1.0], 0.7)
    mdp = mdp_from_reward(cmdp, [1.0], np.zeros(1))
    assert np.allclose(feature_expectations(mdp, np.array([0])), [0, 1 / 0.3])
    P = np.zeros((1, 2, 1, 2))
    P[0, 0, 0, 1] = P[0, 1, 0, 0] = 1.0
    swap = ContextualMDP(P, np.eye(2), [1.0, 0.0], 0.5)
    mu = feature_expectations(mdp_from_reward(swap, [1.0], np.zeros(2)), np.array([0, 0]))
    assert np.allclose(mu, [4 / 3, 2 / 3], atol=1e-12)


def test_feature_expectations_residual_and_monte_carlo():
    cmdp = random_cmdp(seed=7, d=1, S=5, A=2, k=3, gamma=0.8)
    mdp = instantiate(cmdp, [1.0])
    _, pol = value_iteration(mdp)
    mu_s = state_feature_expectations(mdp, pol)
    P_pi = mdp.kernel[np.arange(5), pol]
    assert np.abs(mu_s - (mdp.features + 0.8 * P_pi @ mu_s)).max() <= 1e-8
    mu = mdp.xi @ mu_s
    draws = rollout_estimates(mdp, pol, GEOMETRIC, 100_000, np.random.default_rng(0))
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - mu) <= 3 * se + 1e-12)


def test_q_values_consistency():
    cmdp = random_cmdp(seed=2, d=1, S=6, A=3)
    mdp = instantiate(cmdp, [1.0])
    cfg = PlannerConfig(tol=1e-6)
    V, pol = value_iteration(mdp, cfg)
    Q = q_values(mdp, V)
    assert np.abs(Q.max(axis=1) - V).max() <= cfg.tol / (1 - mdp.gamma)
    assert np.abs(Q[np.arange(6), pol] - V).max() <= 2 * cfg.tol / (1 - mdp.gamma)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_value_matches_feature_expectations(seed):
    cmdp = random_cmdp(seed=seed, d=2, S=5, A=3)
    c = np.random.default_rng(seed).dirichlet(np.ones(2))
    mdp = instantiate(cmdp, c)
    cfg = PlannerConfig(tol=1e-6)
    V, pol = value_iteration(mdp, cfg)
    Tv = q_values(mdp, V).max(axis=1)
    assert np.abs(V - Tv).max() <= cfg.tol
    assert abs(mdp.xi @ V - (c @ cmdp.w_star) @ feature_expectations(mdp, pol)) <= cfg.tol / (1 - mdp.gamma)


def test_successor_features():
    cmdp = random_cmdp(seed=4, d=2, S=5, A=3, shared=True)
    c = np.array([0.4, 0.6])
    mdp = instantiate(cmdp, c)
    _, pol = value_iteration(mdp)
    psi = successor_features(mdp, pol)
    mu = state_feature_expectations(mdp, pol)
    assert np.allclose(psi[np.arange(5), pol], mu, atol=1e-8)
    for c2 in ([0.1, 0.9], [0.8, 0.2]):
        m2 = instantiate(cmdp, c2)
        q = q_values(m2, policy_evaluation(m2, pol))
        assert np.allclose(psi @ (np.array(c2) @ cmdp.w_star), q, atol=1e-6)
    absorbing = ContextualMDP(np.ones((1, 1, 2, 1)), [[0.5, 1.0]], [1.0], 0.9)
    psi = successor_features(mdp_from_reward(absorbing, [1.0], np.zeros(1)), np.array([0]))
    assert np.allclose(psi, np.array([0.5, 1.0]) / 0.1)


def test_ties_are_deterministic_and_lowest_index():
    cmdp = ContextualMDP(np.ones((1, 1, 3, 1)), [[1.0]], [1.0], 0.9, w_star=np.ones((1, 1)))
    _, p1 = value_iteration(instantiate(cmdp, [1.0]))
    _, p2 = value_iteration(instantiate(cmdp, [1.0]))
    assert p1[0] == 0 and np.array_equal(p1, p2)


def test_batched_planners_agree(grid34, rng):
    contexts = sample_context(rng, grid34.d, 6)
    dyn = grid34.dynamics(contexts[0])
    rewards = (grid34.features @ (contexts @ grid34.w_star).T)
    pols, V = optimal_policies(dyn, rewards, grid34.gamma)
    kernels = np.broadcast_to(grid34.base_kernels[0], (6,) + grid34.base_kernels[0].shape)
    pols2, V2 = optimal_policies_stacked(kernels, rewards.T, grid34.gamma)
    assert np.allclose(V.T, V2, atol=1e-9)
    for b in range(6):
        mdp = instantiate(grid34, contexts[b])
        exact = policy_evaluation(mdp, pols[b])
        assert np.allclose(exact, V[:, b], atol=1e-9)
        assert np.all(q_values(mdp, exact).max(axis=1) <= exact + 1e-9)


def test_policy_validation():
    mdp = instantiate(single_state(), [1.0])
    with pytest.raises(InvalidArgument):
        policy_evaluation(mdp, np.array([5]))
    with pytest.raises(InvalidArgument):
        PlannerConfig(tol=0)
