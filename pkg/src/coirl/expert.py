"""Simulated experts: exact feature expectations, sampled trajectories, perturbed mappings.

Two trajectory estimators are provided.  ``geometric`` stops after each state
with probability ``1 - gamma`` and sums undiscounted features, which makes the
estimate unbiased.  ``fixed`` rolls out exactly ``H`` transitions and sums
discounted features; its bias per entry is at most ``gamma**(H+1) / (1-gamma)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coirl.cmdp import as_matrix, check_context, instantiate
from coirl.errors import InvalidArgument, SchemaError
from coirl.planner import (
    DEFAULT_CONFIG,
    feature_expectations_many,
    optimal_policies,
    optimal_policies_stacked,
    state_feature_expectations,
)

SCHEME_KINDS = ("exact", "geometric", "fixed")
DEFAULT_HORIZON = 40


@dataclass(frozen=True)
class SamplingScheme:
    """How a demonstration is produced.

    Attributes:
        kind: ``"exact"``, ``"geometric"`` or ``"fixed"``.
        eps_h: truncation target for ``fixed``; sets ``H = ceil(log(1/eps_h) / (1-gamma))``.
        horizon: explicit ``H`` for ``fixed``; wins over ``eps_h``.
    """

    kind: str = "fixed"
    eps_h: float | None = None
    horizon: int | None = DEFAULT_HORIZON

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise InvalidArgument(f"unknown sampling scheme {self.kind!r}")
        if self.eps_h is not None and not 0.0 < self.eps_h < 1.0:
            raise InvalidArgument(f"eps_h must lie in (0, 1), got {self.eps_h}")
        if self.horizon is not None and self.horizon < 0:
            raise InvalidArgument("horizon must be non-negative")
        if self.kind == "fixed" and self.horizon is None and self.eps_h is None:
            raise InvalidArgument("fixed-horizon scheme needs eps_h or horizon")

    def resolve_horizon(self, gamma):
        if self.horizon is not None:
            return int(self.horizon)
        return horizon_for(self.eps_h, gamma)

    def to_dict(self):
        return {"kind": self.kind, "eps_h": self.eps_h, "horizon": self.horizon}


EXACT = SamplingScheme(kind="exact", horizon=None)
GEOMETRIC = SamplingScheme(kind="geometric", horizon=None)


def fixed_horizon(eps_h=None, horizon=None):
    if eps_h is not None and horizon is None:
        return SamplingScheme(kind="fixed", eps_h=eps_h, horizon=None)
    return SamplingScheme(kind="fixed", eps_h=eps_h, horizon=DEFAULT_HORIZON if horizon is None else horizon)


def horizon_for(eps_h, gamma):
    """``H = ceil(log(1/eps_h) / (1 - gamma))``."""
    if not 0.0 < eps_h < 1.0:
        raise InvalidArgument(f"eps_h must lie in (0, 1), got {eps_h}")
    return int(math.ceil(math.log(1.0 / eps_h) / (1.0 - gamma)))


def fixed_horizon_bias_bound(gamma, horizon):
    """Per-entry bias bound ``gamma**(H+1) / (1-gamma)`` of the truncated estimator."""
    return gamma ** (horizon + 1) / (1.0 - gamma)


@dataclass(frozen=True)
class Trajectory:
    states: tuple
    actions: tuple

    def __post_init__(self):
        if len(self.actions) not in (len(self.states), len(self.states) - 1):
            raise InvalidArgument("a trajectory has as many actions as states, or one fewer")


@dataclass(frozen=True)
class Demonstration:
    """A context with the expert's feature expectations (exact or estimated)."""

    context: np.ndarray
    mu: np.ndarray
    scheme: SamplingScheme = EXACT
    trajectory: Trajectory | None = field(default=None, compare=False)

    def to_dict(self):
        doc = {"context": self.context.tolist(), "scheme": self.scheme.to_dict(), "mu": self.mu.tolist()}
        if self.trajectory is not None:
            doc["states"] = list(self.trajectory.states)
            doc["actions"] = list(self.trajectory.actions)
        return doc

    @classmethod
    def from_dict(cls, doc, features=None, gamma=None):
        """Rebuild a record; ``mu`` is recomputed from the trajectory when missing."""
        try:
            context = np.asarray(doc["context"], dtype=float)
            scheme = SamplingScheme(**doc.get("scheme", {"kind": "exact", "horizon": None}))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad demonstration record: {exc}") from exc
        trajectory = None
        if "states" in doc:
            trajectory = Trajectory(tuple(int(s) for s in doc["states"]), tuple(int(a) for a in doc.get("actions", [])))
        if "mu" in doc:
            mu = np.asarray(doc["mu"], dtype=float)
        elif trajectory is not None and features is not None and gamma is not None:
            mu = trajectory_estimate(trajectory.states, features, gamma, scheme.kind)
        else:
            raise SchemaError("demonstration record needs mu, or states plus the CMDP features")
        return cls(context, mu, scheme, trajectory)


def trajectory_estimate(states, features, gamma, kind):
    """Feature estimate of a recorded trajectory under the given scheme."""
    phi = np.asarray(features)[np.asarray(states, dtype=int)]
    if kind == "geometric":
        return phi.sum(axis=0)
    discounts = gamma ** np.arange(len(phi))
    return discounts @ phi


def save_demonstrations(demos, path):
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for demo in demos:
            fh.write(json.dumps(demo.to_dict()) + "\n")


def load_demonstrations(path, cmdp=None):
    features = None if cmdp is None else cmdp.features
    gamma = None if cmdp is None else cmdp.gamma
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(Demonstration.from_dict(json.loads(line), features, gamma))
    return out


# ---------------------------------------------------------------------------
# Planning for many contexts at once.


def plan_contexts(cmdp, W, contexts, cfg=DEFAULT_CONFIG, v0=None):
    """Optimal policies and values for reward mapping ``W`` at each context.

    Returns ``(policies (B, S), values (S, B))``.  Shared dynamics are planned
    in one batched call; contextual dynamics use stacked dense planning when
    small, a per-context loop otherwise.
    """
    W = as_matrix(W)
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    for c in contexts:
        check_context(c, cmdp.d)
    if W.shape != (cmdp.d, cmdp.k):
        raise InvalidArgument(f"W must have shape {(cmdp.d, cmdp.k)}, got {W.shape}")
    rewards = cmdp.features @ (contexts @ W).T
    if cmdp.context_independent:
        dyn = cmdp.dynamics(contexts[0])
        return optimal_policies(dyn, rewards, cmdp.gamma, cfg, v0)
    S = cmdp.n_states
    if S <= 64:
        kernels = np.tensordot(contexts, cmdp.base_kernels, axes=1)
        policies, values = optimal_policies_stacked(kernels, rewards.T, cmdp.gamma, cfg)
        return policies, values.T
    pols, vals = [], []
    for b, c in enumerate(contexts):
        p, v = optimal_policies(cmdp.dynamics(c), rewards[:, b], cmdp.gamma, cfg)
        pols.append(p)
        vals.append(v)
    return np.stack(pols), np.stack(vals, axis=1)


def policy_feature_expectations(cmdp, policies, contexts, start=None):
    """``(B, k)`` feature expectations of ``policies[b]`` at ``contexts[b]``."""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    policies = np.atleast_2d(policies)
    start = cmdp.xi if start is None else start
    if cmdp.context_independent:
        dyn = cmdp.dynamics(contexts[0])
        return feature_expectations_many(dyn, policies, cmdp.features, cmdp.gamma, start)
    out = np.empty((len(contexts), cmdp.k))
    for b, (c, p) in enumerate(zip(contexts, policies)):
        out[b] = start @ cmdp.dynamics(c).solve_policy(p, cmdp.features, cmdp.gamma)
    return out


# ---------------------------------------------------------------------------
# Expert


class Expert:
    """Optimal demonstrator for a fixed mapping; policies cached per context."""

    def __init__(self, cmdp, w_star=None, cfg=DEFAULT_CONFIG):
        W = cmdp.w_star if w_star is None else as_matrix(w_star)
        if W is None:
            raise InvalidArgument("expert needs a reward mapping")
        self.cmdp = cmdp
        self.w_star = np.asarray(W, dtype=float)
        self.cfg = cfg
        self._cache = {}

    def _key(self, c):
        return np.ascontiguousarray(c, dtype=float).tobytes()

    def policies(self, contexts):
        contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
        missing = [i for i, c in enumerate(contexts) if self._key(c) not in self._cache]
        if missing:
            pols, vals = plan_contexts(self.cmdp, self.w_star, contexts[missing], self.cfg)
            for j, i in enumerate(missing):
                self._cache[self._key(contexts[i])] = (pols[j], vals[:, j])
        return np.stack([self._cache[self._key(c)][0] for c in contexts])

    def policy(self, c):
        return self.policies(c)[0]

    def values(self, c):
        self.policy(c)
        return self._cache[self._key(np.asarray(c, dtype=float))][1]

    def feature_expectations(self, contexts, start=None):
        contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
        return policy_feature_expectations(self.cmdp, self.policies(contexts), contexts, start)

    def demonstrate(self, c, scheme=EXACT, rng=None):
        c = check_context(c, self.cmdp.d)
        if scheme.kind == "exact":
            return Demonstration(c, self.feature_expectations(c)[0], scheme)
        if rng is None:
            raise InvalidArgument("sampled demonstrations need an rng")
        mdp = instantiate(self.cmdp, c, self.w_star)
        policy = self.policy(c)
        states, actions = rollout(mdp, policy, scheme, rng)
        mu = trajectory_estimate(states, self.cmdp.features, self.cmdp.gamma, scheme.kind)
        return Demonstration(c, mu, scheme, Trajectory(tuple(states), tuple(actions)))


def exact_demonstration(cmdp, w_star, c, cfg=DEFAULT_CONFIG):
    """Exact expert feature expectations from ``xi`` at context ``c``."""
    return Expert(cmdp, w_star, cfg).demonstrate(c)


def sample_trajectory(cmdp, w_star, c, scheme, rng, cfg=DEFAULT_CONFIG):
    """One expert roll-out at ``c`` plus its feature estimate (``demo.mu``)."""
    return Expert(cmdp, w_star, cfg).demonstrate(c, scheme, rng)


def context_rng(master_seed, index):
    """Per-context generator: identical whether demos are made serially or in parallel."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


def demo_stream(expert, contexts, scheme, master_seed=0):
    """Yield one demonstration per context, seeded by ``(master_seed, index)``."""
    for i, c in enumerate(contexts):
        yield expert.demonstrate(c, scheme, context_rng(master_seed, i))


# ---------------------------------------------------------------------------
# Roll-outs


def _step(dynamics, policy, states, rng):
    rows = states * dynamics.n_actions + policy[states]
    probs = dynamics.matrix[rows]
    if hasattr(probs, "toarray"):
        probs = probs.toarray()
    cum = np.cumsum(probs, axis=1)
    u = rng.random(len(states)) * cum[:, -1]
    nxt = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(nxt, dynamics.n_states - 1)


def rollout(mdp, policy, scheme, rng, start=None):
    """Sample one trajectory; returns ``(states, actions)`` lists."""
    start = mdp.xi if start is None else start
    s = int(rng.choice(mdp.n_states, p=start))
    states, actions = [s], []
    if scheme.kind == "geometric":
        while rng.random() < mdp.gamma:
            a = int(policy[s])
            s = int(_step(mdp.dynamics, policy, np.array([s]), rng)[0])
            actions.append(a)
            states.append(s)
        return states, actions
    for _ in range(scheme.resolve_horizon(mdp.gamma)):
        a = int(policy[s])
        s = int(_step(mdp.dynamics, policy, np.array([s]), rng)[0])
        actions.append(a)
        states.append(s)
    return states, actions


def rollout_estimates(mdp, policy, scheme, n, rng, start=None):
    """``n`` independent feature estimates, simulated in lock-step.  Returns ``(n, k)``."""
    start = mdp.xi if start is None else np.asarray(start, dtype=float)
    policy = np.asarray(policy)
    phi = mdp.features
    states = rng.choice(mdp.n_states, size=n, p=start)
    total = phi[states].copy()
    if scheme.kind == "geometric":
        alive = np.ones(n, dtype=bool)
        alive &= rng.random(n) < mdp.gamma
        while alive.any():
            idx = np.flatnonzero(alive)
            states[idx] = _step(mdp.dynamics, policy, states[idx], rng)
            total[idx] += phi[states[idx]]
            alive[idx] = rng.random(len(idx)) < mdp.gamma
        return total
    weight = 1.0
    for _ in range(scheme.resolve_horizon(mdp.gamma)):
        weight *= mdp.gamma
        states = _step(mdp.dynamics, policy, states, rng)
        total += weight * phi[states]
    return total


def perturb_expert(w_star, eps, gamma, rng):
    """Near-optimal expert mapping within ``(1-gamma) eps / (8k)`` of ``w_star`` in l-inf.

    Each entry is drawn uniformly from the intersection of its radius interval
    with ``[-1, 1]``.
    """
    if not eps > 0:
        raise InvalidArgument(f"eps must be positive, got {eps}")
    W = as_matrix(w_star)
    k = W.shape[1]
    radius = (1.0 - gamma) * eps / (8.0 * k)
    lo = np.maximum(W - radius, -1.0)
    hi = np.minimum(W + radius, 1.0)
    return lo + (hi - lo) * rng.random(W.shape)


def near_optimal_radius(eps, gamma, k):
    return (1.0 - gamma) * eps / (8.0 * k)


def expert_state_feature_expectations(cmdp, w_star, c, cfg=DEFAULT_CONFIG):
    """Per-state feature expectations of the expert at ``c``: ``(S, k)``."""
    mdp = instantiate(cmdp, c, w_star)
    policy = Expert(cmdp, w_star, cfg).policy(c)
    return state_feature_expectations(mdp, policy)
