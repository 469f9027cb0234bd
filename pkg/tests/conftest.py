"""Small CMDP factories shared by the test modules."""

import numpy as np
import pytest

from coirl.cmdp import ContextualMDP
from coirl.environments import GridWorldSpec, make_gridworld


def random_kernels(rng, d, S, A):
    P = rng.random((d, S, A, S)) + 0.05
    return P / P.sum(axis=-1, keepdims=True)


def random_cmdp(seed=0, d=2, S=4, A=2, k=3, gamma=0.8, shared=False):
    rng = np.random.default_rng(seed)
    P = random_kernels(rng, 1 if shared else d, S, A)
    if shared:
        P = np.repeat(P, d, axis=0)
    phi = rng.random((S, k))
    xi = rng.dirichlet(np.ones(S))
    W = rng.normal(size=(d, k))
    return ContextualMDP(P, phi, xi, gamma, w_star=W / np.linalg.norm(W), geometry="ball")


@pytest.fixture(scope="session")
def grid34():
    return make_gridworld(GridWorldSpec(3, 4))


@pytest.fixture(scope="session")
def grid22():
    return make_gridworld(GridWorldSpec(2, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
