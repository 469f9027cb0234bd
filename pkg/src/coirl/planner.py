"""Exact tabular planning: value iteration, policy evaluation, feature expectations.

Policies are plain integer arrays ``policy[s] -> action``.  Every argmax
breaks ties toward the lowest action index so repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coirl.errors import InvalidArgument, NonConvergence

# Relative margin a polishing step must beat before it switches action.
_IMPROVE_EPS = 1e-12
_MAX_POLISH = 100


@dataclass(frozen=True)
class PlannerConfig:
    """Value-iteration stopping rule: stop once ``max|V_t - V_{t-1}| < tol``."""

    tol: float = 1e-4
    max_iters: int = 100_000

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidArgument(f"tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise InvalidArgument("max_iters must be at least 1")


DEFAULT_CONFIG = PlannerConfig()


def check_policy(policy, n_states, n_actions):
    policy = np.asarray(policy)
    if policy.shape != (n_states,) or not np.issubdtype(policy.dtype, np.integer):
        raise InvalidArgument(f"policy must be an integer array of shape ({n_states},)")
    if policy.min() < 0 or policy.max() >= n_actions:
        raise InvalidArgument("policy refers to an action outside the action set")
    return policy


def _value_iteration(dynamics, rewards, gamma, cfg, v0=None):
    V = np.zeros_like(rewards) if v0 is None else np.array(v0, dtype=float)
    residual = np.inf
    for _ in range(cfg.max_iters):
        Q = rewards[:, None] + gamma * dynamics.expect(V)
        V_new = Q.max(axis=1)
        residual = np.abs(V_new - V).max()
        V = V_new
        if residual < cfg.tol:
            return V
    raise NonConvergence(f"value iteration did not reach tol={cfg.tol} in {cfg.max_iters} sweeps", residual)


def value_iteration(mdp, cfg=DEFAULT_CONFIG, v0=None):
    """Run value iteration on an instantiated MDP.

    Returns:
        ``(values, policy)`` where ``policy`` is greedy with respect to the
        returned values.

    Raises:
        NonConvergence: the residual stayed above ``cfg.tol`` for
            ``cfg.max_iters`` sweeps.  The exception carries the last residual.
    """
    V = _value_iteration(mdp.dynamics, mdp.reward, mdp.gamma, cfg, v0)
    policy = q_values(mdp, V).argmax(axis=1)
    return V, policy


def q_values(mdp, values):
    """``Q(s, a) = R(s) + gamma * E[V(s') | s, a]`` as an ``(S, A)`` array."""
    values = np.asarray(values, dtype=float)
    if values.shape != (mdp.n_states,):
        raise InvalidArgument(f"values must have shape ({mdp.n_states},)")
    return mdp.reward[:, None] + mdp.gamma * mdp.dynamics.expect(values)


def policy_evaluation(mdp, policy):
    """Exact state values of a deterministic policy (one linear solve)."""
    policy = check_policy(policy, mdp.n_states, mdp.n_actions)
    return mdp.dynamics.solve_policy(policy, mdp.reward, mdp.gamma)


def state_feature_expectations(mdp, policy):
    """Per-state feature expectations ``mu^pi(s)`` as an ``(S, k)`` array."""
    policy = check_policy(policy, mdp.n_states, mdp.n_actions)
    return mdp.dynamics.solve_policy(policy, mdp.features, mdp.gamma)


def feature_expectations(mdp, policy, start=None):
    """Discounted feature expectations of ``policy`` from a start distribution.

    ``start`` defaults to the MDP's ``xi``.  The per-state system
    ``mu(s) = phi(s) + gamma * sum_s' P(s'|s, pi(s)) mu(s')`` is solved directly.
    """
    start = mdp.xi if start is None else np.asarray(start, dtype=float)
    if start.shape != (mdp.n_states,):
        raise InvalidArgument(f"start must have shape ({mdp.n_states},)")
    return start @ state_feature_expectations(mdp, policy)


def random_policy_feature_expectations(mdp):
    """Per-state feature expectations of the uniform-random policy."""
    return mdp.dynamics.solve(mdp.dynamics.mean_action_matrix(), mdp.features, mdp.gamma)


def successor_features(mdp, policy):
    """``psi(s, a) = phi(s) + gamma * E[mu^pi(s') | s, a]`` with shape ``(S, A, k)``."""
    mu = state_feature_expectations(mdp, policy)
    return mdp.features[:, None, :] + mdp.gamma * mdp.dynamics.expect(mu)


def optimal_policies(dynamics, rewards, gamma, cfg=DEFAULT_CONFIG, v0=None):
    """Exactly optimal policies for a batch of rewards sharing one kernel.

    Value iteration gets close; a few exact evaluate-and-improve sweeps then
    remove the residual ``tol`` error so the policy is optimal up to
    round-off.  Columns that share a policy share its linear solve.

    Args:
        dynamics: a :class:`coirl.cmdp.Dynamics`.
        rewards: ``(S,)`` or ``(S, B)`` state rewards.
        v0: optional warm start for value iteration.

    Returns:
        ``(policies, values)``: ``(B, S)`` int array and exact ``(S, B)`` values
        (1-d shapes when ``rewards`` is 1-d).
    """
    rewards = np.asarray(rewards, dtype=float)
    single = rewards.ndim == 1
    R = rewards[:, None] if single else rewards
    V0 = None if v0 is None else np.asarray(v0, dtype=float).reshape(R.shape)
    V = _value_iteration(dynamics, R, gamma, cfg, V0)
    Q = R[:, None, :] + gamma * dynamics.expect(V)
    policies = Q.argmax(axis=1).T.copy()
    cols = np.arange(R.shape[1])
    states = np.arange(R.shape[0])
    for _ in range(_MAX_POLISH):
        V = _evaluate_many(dynamics, policies, R, gamma)
        Q = R[:, None, :] + gamma * dynamics.expect(V)
        current = Q[states[:, None], policies.T, cols[None, :]]
        best = Q.max(axis=1)
        better = best > current + _IMPROVE_EPS * (1.0 + np.abs(best))
        if not better.any():
            break
        greedy = Q.argmax(axis=1)
        policies = np.where(better, greedy, policies.T).T.copy()
    if single:
        return policies[0], V[:, 0]
    return policies, V


def optimal_policy(mdp, cfg=DEFAULT_CONFIG, v0=None):
    """Exactly optimal deterministic policy of an instantiated MDP.

    Returns ``(values, policy)`` with values from an exact evaluation.
    """
    policy, V = optimal_policies(mdp.dynamics, mdp.reward, mdp.gamma, cfg, v0)
    return V, policy


def _evaluate_many(dynamics, policies, R, gamma):
    uniq, inverse = np.unique(policies, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    V = np.empty_like(R)
    for u, policy in enumerate(uniq):
        cols = inverse == u
        V[:, cols] = dynamics.solve_policy(policy, R[:, cols], gamma)
    return V


def feature_expectations_many(dynamics, policies, features, gamma, start):
    """Feature expectations from ``start`` for each row of ``policies`` -> ``(B, k)``."""
    policies = np.atleast_2d(policies)
    uniq, inverse = np.unique(policies, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    mus = np.stack([start @ dynamics.solve_policy(p, features, gamma) for p in uniq])
    return mus[inverse]


# ---------------------------------------------------------------------------
# Stacked planning: one small dense kernel per batch entry (contextual dynamics).


def optimal_policies_stacked(kernels, rewards, gamma, cfg=DEFAULT_CONFIG):
    """Exactly optimal policies for ``B`` independent small MDPs.

    Args:
        kernels: ``(B, S, A, S)`` dense kernels.
        rewards: ``(B, S)`` rewards.

    Returns:
        ``(policies, values)`` of shapes ``(B, S)``.
    """
    kernels = np.asarray(kernels, dtype=float)
    R = np.asarray(rewards, dtype=float)
    B, S, A, _ = kernels.shape
    V = np.zeros_like(R)
    residual = np.inf
    for _ in range(cfg.max_iters):
        Q = R[:, :, None] + gamma * np.einsum("bsat,bt->bsa", kernels, V)
        V_new = Q.max(axis=2)
        residual = np.abs(V_new - V).max()
        V = V_new
        if residual < cfg.tol:
            break
    else:
        raise NonConvergence(f"value iteration did not reach tol={cfg.tol}", residual)
    Q = R[:, :, None] + gamma * np.einsum("bsat,bt->bsa", kernels, V)
    policies = Q.argmax(axis=2)
    bidx = np.arange(B)[:, None]
    sidx = np.arange(S)[None, :]
    eye = np.eye(S)
    for _ in range(_MAX_POLISH):
        P_pi = kernels[bidx, sidx, policies]
        V = np.linalg.solve(eye - gamma * P_pi, R[:, :, None])[:, :, 0]
        Q = R[:, :, None] + gamma * np.einsum("bsat,bt->bsa", kernels, V)
        current = Q[bidx, sidx, policies]
        best = Q.max(axis=2)
        better = best > current + _IMPROVE_EPS * (1.0 + np.abs(best))
        if not better.any():
            break
        policies = np.where(better, Q.argmax(axis=2), policies)
    return policies, V


def state_feature_expectations_stacked(kernels, policies, features, gamma):
    """``(B, S, k)`` per-state feature expectations for stacked small MDPs."""
    kernels = np.asarray(kernels, dtype=float)
    B, S = policies.shape
    P_pi = kernels[np.arange(B)[:, None], np.arange(S)[None, :], policies]
    rhs = np.broadcast_to(features, (B,) + features.shape)
    return np.linalg.solve(np.eye(S) - gamma * P_pi, rhs)
