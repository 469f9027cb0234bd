import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coirl.cmdp import instantiate
from coirl.environments import sample_context
from coirl.errors import InvalidArgument
from coirl.expert import Expert
from coirl.loss import (
    ESConfig,
    coirl_loss,
    es_estimate,
    es_gradient,
    lipschitz_bounds,
    losses_many,
    subgradient,
)
from coirl.planner import PlannerConfig, feature_expectations

from conftest import random_cmdp

TIGHT = PlannerConfig(tol=1e-10)


def ball_point(rng, shape):
    W = rng.normal(size=shape)
    return W / np.linalg.norm(W) * rng.random() ** (1 / W.size)


def exact_demos(cmdp, contexts):
    expert = Expert(cmdp, cmdp.w_star, TIGHT)
    return [expert.demonstrate(c) for c in contexts]


def test_loss_zero_at_truth_and_nonnegative(grid34):
    rng = np.random.default_rng(0)
    demos = exact_demos(grid34, sample_context(rng, grid34.d, 10))
    assert abs(coirl_loss(grid34, grid34.w_star, demos, TIGHT).value) <= 1e-8
    for _ in range(10):
        report = coirl_loss(grid34, ball_point(rng, (12, 12)), demos, TIGHT)
        assert report.value >= -1e-10
        assert np.all(report.terms >= -1e-10)
        assert np.isclose(report.value, report.terms.mean())


def test_loss_term_matches_policy_enumeration():
    cmdp = random_cmdp(seed=11, d=2, S=2, A=2, k=2)
    c = np.array([0.35, 0.65])
    demo = exact_demos(cmdp, [c])[0]
    W = np.array([[0.3, -0.8], [0.5, 0.1]])
    mdp = instantiate(cmdp, c, W)
    best = max((c @ W) @ (feature_expectations(mdp, np.array(p)) - demo.mu) for p in itertools.product(range(2), repeat=2))
    assert np.isclose(coirl_loss(cmdp, W, [demo], TIGHT).value, best, atol=1e-9)


def test_subgradient_zero_at_truth(grid34):
    demos = exact_demos(grid34, sample_context(np.random.default_rng(1), grid34.d, 3))
    for demo in demos:
        assert np.abs(subgradient(grid34, grid34.w_star, demo, TIGHT)).max() <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_subgradient_inequality_and_norms(seed):
    rng = np.random.default_rng(seed)
    cmdp = random_cmdp(seed=seed % 7, d=2, S=4, A=2, k=3, gamma=0.8)
    demos = exact_demos(cmdp, rng.dirichlet(np.ones(2), size=4))
    W, W2 = ball_point(rng, (2, 3)), ball_point(rng, (2, 3))
    L1 = coirl_loss(cmdp, W, demos, TIGHT).value
    L2 = coirl_loss(cmdp, W2, demos, TIGHT).value
    g = subgradient(cmdp, W, demos, TIGHT)
    assert L2 >= L1 + np.sum(g * (W2 - W)) - 1e-8
    inf_bound, two_bound = lipschitz_bounds(2, 3, 0.8)
    assert np.abs(g).max() <= inf_bound and np.linalg.norm(g) <= two_bound
    lam = rng.random()
    mid = coirl_loss(cmdp, lam * W + (1 - lam) * W2, demos, TIGHT).value
    assert mid <= lam * L1 + (1 - lam) * L2 + 1e-8
    assert abs(L1 - L2) <= two_bound * np.linalg.norm(W - W2) + 1e-9


def test_losses_many_matches_loop(grid34):
    rng = np.random.default_rng(2)
    demos = exact_demos(grid34, sample_context(rng, grid34.d, 3))
    Ws = np.stack([ball_point(rng, (12, 12)) for _ in range(4)])
    batched = losses_many(grid34, Ws, demos)
    looped = [coirl_loss(grid34, W, demos).value for W in Ws]
    assert np.allclose(batched, looped, atol=1e-9)
    contextual = random_cmdp(seed=3, d=2, S=4, A=2)
    demos = exact_demos(contextual, rng.dirichlet(np.ones(2), size=2))
    Ws = np.stack([ball_point(rng, (2, 3)) for _ in range(3)])
    assert np.allclose(losses_many(contextual, Ws, demos), [coirl_loss(contextual, W, demos).value for W in Ws])


def test_empty_demos_rejected(grid34):
    with pytest.raises(InvalidArgument):
        coirl_loss(grid34, grid34.w_star, [])


def test_es_constant_loss_gives_zero():
    g = es_estimate(lambda Ws: np.full(len(Ws), 3.0), np.zeros((2, 2)), ESConfig(m=50), np.random.default_rng(0))
    assert np.array_equal(g, np.zeros((2, 2)))


def test_es_single_sample_form():
    cfg = ESConfig(m=1, rho=2.0, nu=0.1, centered=False)
    W = np.ones((2, 3))
    loss = lambda Ws: np.array([float(np.sum(X**2)) for X in Ws])
    g = es_estimate(loss, W, cfg, np.random.default_rng(5))
    u = np.random.default_rng(5).normal(0, 2.0, size=(1, 2, 3))[0]
    u_hat = u / np.linalg.norm(u)
    expected = loss((W + 0.1 * u_hat)[None])[0] * (0.1 / 2.0) * u_hat
    assert np.allclose(g, expected)


def test_es_linear_surrogate_cosine():
    G = np.random.default_rng(1).normal(size=(3, 4))
    loss = lambda Ws: np.tensordot(Ws, G, axes=([1, 2], [0, 1]))
    g = es_estimate(loss, np.zeros((3, 4)), ESConfig(m=2000), np.random.default_rng(2))
    cos = np.sum(g * G) / (np.linalg.norm(g) * np.linalg.norm(G))
    assert cos >= 0.9


def test_es_gradient_zero_at_truth(grid22):
    demos = exact_demos(grid22, sample_context(np.random.default_rng(0), grid22.d, 2))
    g = es_gradient(grid22, grid22.w_star, demos, ESConfig(m=20, nu=1e-6))
    assert np.abs(g).max() <= 1e-9


def test_es_config_validation():
    with pytest.raises(InvalidArgument):
        ESConfig(m=0)
    with pytest.raises(InvalidArgument):
        ESConfig(rho=0)
