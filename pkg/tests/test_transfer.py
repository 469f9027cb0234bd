import math

import numpy as np
import pytest

from coirl.cmdp import instantiate
from coirl.environments import SyntheticCMDPSpec, make_random_cmdp, sample_context
from coirl.errors import InvalidArgument, InvalidState, UnsupportedDynamics
from coirl.expert import Expert
from coirl.planner import PlannerConfig, policy_evaluation, successor_features
from coirl.transfer import (
    PolicyLibrary,
    TransferBoundInputs,
    bound_inputs,
    build_library,
    gpi_bound,
    gpi_policy,
    nearest_transfer,
    phi_max,
    simplex_transfer_bound,
    subsample_library,
    transfer_bound,
)

TIGHT = PlannerConfig(tol=1e-10)


def value(cmdp, c, policy):
    mdp = instantiate(cmdp, c)
    return float(mdp.xi @ policy_evaluation(mdp, policy))


def test_transfer_bound_examples():
    ctx = TransferBoundInputs(1.0, 10.0, 3, 0.9, True)
    assert math.isclose(transfer_bound(ctx, 0.1), 2 * 28 / 0.09 * 0.1)
    assert abs(transfer_bound(ctx, 0.1) - 62.222) < 1e-3
    assert transfer_bound(ctx, 0.0) == 0.0
    shared = TransferBoundInputs(1.0, 10.0, 3, 0.9, False)
    assert math.isclose(transfer_bound(shared, 0.1), 2.0)
    assert math.isclose(simplex_transfer_bound(3, 0.9, 0.1), 2 * (0.1 + 2.7) / (0.9 * 0.01) * 0.1)
    with pytest.raises(InvalidArgument):
        transfer_bound(ctx, -1)
    with pytest.raises(InvalidArgument):
        TransferBoundInputs(-1.0, 0, 1, 0.5, True)


def test_library_psi_consistent(grid34):
    lib = build_library(grid34, grid34.w_star, np.eye(12)[:3], TIGHT)
    for e in lib.entries:
        assert np.allclose(e.psi, successor_features(instantiate(grid34, e.context), e.policy), atol=1e-6)


def test_gpi_on_library_context_is_optimal(grid34):
    contexts = sample_context(np.random.default_rng(0), 12, 5)
    lib = build_library(grid34, grid34.w_star, contexts, TIGHT)
    for c in contexts:
        v = value(grid34, c, gpi_policy(lib, c))
        assert abs(v - value(grid34, c, Expert(grid34, cfg=TIGHT).policy(c))) <= 1e-6


def test_gpi_bound_and_dominance_vertex_library(grid34):
    rng = np.random.default_rng(1)
    lib = build_library(grid34, grid34.w_star, np.eye(12)[[0, 4, 7, 11]], TIGHT)
    expert = Expert(grid34, cfg=TIGHT)
    for c in sample_context(rng, 12, 100):
        v_gpi = value(grid34, c, gpi_policy(lib, c))
        v_star = value(grid34, c, expert.policy(c))
        assert v_gpi >= max(value(grid34, c, e.policy) for e in lib.entries) - 1e-6
        assert v_star - v_gpi <= gpi_bound(lib, c) + 1e-6


def test_singleton_library_dominance(grid34):
    lib = build_library(grid34, grid34.w_star, np.eye(12)[[3]], TIGHT)
    for c in sample_context(np.random.default_rng(2), 12, 10):
        assert value(grid34, c, gpi_policy(lib, c)) >= value(grid34, c, lib.entries[0].policy) - 1e-6


def test_nearest_transfer_contextual():
    cmdp = make_random_cmdp(SyntheticCMDPSpec(n_states=12, n_actions=3, d=3, k=3, seed=4))
    rng = np.random.default_rng(3)
    lib = build_library(cmdp, cmdp.w_star, sample_context(rng, 3, 10), TIGHT)
    assert all(e.psi is None for e in lib.entries)
    with pytest.raises(UnsupportedDynamics):
        gpi_policy(lib, lib.entries[0].context)
    expert = Expert(cmdp, cfg=TIGHT)
    for c in sample_context(rng, 3, 30):
        pol, bound, j = nearest_transfer(lib, c)
        assert value(cmdp, c, expert.policy(c)) - value(cmdp, c, pol) <= bound + 1e-6
    pol, bound, j = nearest_transfer(lib, lib.entries[2].context)
    assert bound == 0.0 and j == 2


def test_bound_inputs_and_empty_library(grid34):
    lib = build_library(grid34, grid34.w_star, np.eye(12)[:2], TIGHT)
    inputs = bound_inputs(lib)
    assert inputs.phi_max == phi_max(grid34.w_star, grid34.features) == 1.0
    assert not inputs.context_dependent
    empty = PolicyLibrary(grid34, grid34.w_star)
    with pytest.raises(InvalidState):
        nearest_transfer(empty, np.eye(12)[0])
    with pytest.raises(InvalidState):
        gpi_policy(empty, np.eye(12)[0])


def test_subsampling_never_lowers_bound(grid34):
    rng = np.random.default_rng(5)
    lib = build_library(grid34, grid34.w_star, sample_context(rng, 12, 20), TIGHT)
    queries = sample_context(rng, 12, 20)
    small = subsample_library(lib, 5)
    assert len(small) == 5
    for c in queries:
        assert gpi_bound(small, c) >= gpi_bound(lib, c) - 1e-12
