"""Comparison methods: apprenticeship learning on a stacked MDP, and behavioral cloning.

The stacked ("large") MDP folds a finite context set into the state: state
``(c, s)`` keeps the dynamics of context ``c`` and carries features
``c ⊙ phi(s)``, so any mapping ``W`` becomes a plain linear reward
``flatten(W) . phi'``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coirl.cmdp import Dynamics, InstantiatedMDP, check_context
from coirl.errors import InvalidArgument, SchemaError
from coirl.planner import DEFAULT_CONFIG, optimal_policies

# ---------------------------------------------------------------------------
# Stacked MDP


@dataclass(frozen=True, eq=False)
class LargeMDP:
    dynamics: Dynamics
    features: np.ndarray
    xi: np.ndarray
    gamma: float
    contexts: np.ndarray
    base_states: int

    @property
    def n_states(self):
        return self.dynamics.n_states

    @property
    def n_actions(self):
        return self.dynamics.n_actions

    def mdp(self, w):
        """Instantiate with the linear reward ``phi'(s) . w``."""
        return InstantiatedMDP(self.dynamics, self.features @ np.asarray(w, dtype=float).ravel(), self.features, self.xi, self.gamma)

    def block(self, j):
        """State indices of the copy for context ``j``."""
        return slice(j * self.base_states, (j + 1) * self.base_states)

    def split_policy(self, policy):
        return np.asarray(policy).reshape(len(self.contexts), self.base_states)


def build_large_mdp(cmdp, contexts, weights=None):
    """Stack one copy of the MDP per context.

    The start distribution is ``weights[j] * xi`` on copy ``j`` (uniform
    weights by default).
    """
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    contexts = np.stack([check_context(c, cmdp.d) for c in contexts])
    C, S, A = len(contexts), cmdp.n_states, cmdp.n_actions
    weights = np.full(C, 1.0 / C) if weights is None else np.asarray(weights, dtype=float)
    kernel = np.zeros((C * S, A, C * S))
    feats = np.empty((C * S, cmdp.d * cmdp.k))
    for j, c in enumerate(contexts):
        blk = slice(j * S, (j + 1) * S)
        kernel[blk, :, blk] = cmdp.kernel(c)
        feats[blk] = np.einsum("d,sk->sdk", c, cmdp.features).reshape(S, -1)
    xi = np.concatenate([w * cmdp.xi for w in weights])
    kernel.setflags(write=False)
    return LargeMDP(Dynamics(kernel), feats, xi, cmdp.gamma, contexts, S)


def large_feature_expectations(large, policy):
    """``mu`` of a deterministic stacked-MDP policy from the stacked start distribution."""
    mu_states = large.dynamics.solve_policy(np.asarray(policy), large.features, large.gamma)
    return large.xi @ mu_states


def large_best_response(large, w, cfg=DEFAULT_CONFIG):
    policy, _ = optimal_policies(large.dynamics, large.features @ np.asarray(w, dtype=float).ravel(), large.gamma, cfg)
    return policy, large_feature_expectations(large, policy)


@dataclass
class MixedPolicy:
    """A distribution over deterministic policies, sampled once at time 0."""

    policies: list
    weights: np.ndarray
    mus: list

    def feature_expectations(self):
        return np.asarray(self.weights) @ np.stack(self.mus)


@dataclass
class ALResult:
    mixture: MixedPolicy
    mu_bar: np.ndarray
    distances: list = field(default_factory=list)
    w_trace: list = field(default_factory=list)
    iteration_seconds: list = field(default_factory=list)


def al_projection(large, mu_E, T, tol=1e-6, cfg=DEFAULT_CONFIG):
    """Projection apprenticeship learning.

    Starting from the all-zeros policy, each iteration best-responds to the
    reward ``w = (mu_E - mu_bar) / ||mu_E - mu_bar||`` and moves ``mu_bar``
    to the point on the segment ``[mu_bar, mu(pi_t)]`` closest to ``mu_E``.
    Stops after ``T`` iterations or once ``||mu_bar - mu_E||_2 <= tol``.
    """
    mu_E = np.asarray(mu_E, dtype=float)
    pi0 = np.zeros(large.n_states, dtype=int)
    mu0 = large_feature_expectations(large, pi0)
    mix = MixedPolicy([pi0], np.array([1.0]), [mu0])
    mu_bar = mu0.copy()
    result = ALResult(mix, mu_bar, [float(np.linalg.norm(mu_E - mu_bar))])
    for _ in range(T):
        diff = mu_E - mu_bar
        dist = np.linalg.norm(diff)
        if dist <= tol:
            break
        start = time.perf_counter()
        w = diff / dist
        policy, mu = large_best_response(large, w, cfg)
        step = mu - mu_bar
        denom = float(step @ step)
        lam = 0.0 if denom == 0.0 else float(np.clip(step @ diff / denom, 0.0, 1.0))
        mu_bar = mu_bar + lam * step
        mix.weights = np.append((1.0 - lam) * mix.weights, lam)
        mix.policies.append(policy)
        mix.mus.append(mu)
        result.iteration_seconds.append(time.perf_counter() - start)
        result.w_trace.append(w)
        result.distances.append(float(np.linalg.norm(mu_E - mu_bar)))
    result.mu_bar = mu_bar
    return result


@dataclass
class MWALResult:
    mixture: MixedPolicy
    gaps: list
    bound: float


def mwal_bound(n_features, gamma, T):
    """Average-regret bound of exponential weights with losses in ``[-1/(1-gamma), 1/(1-gamma)]``."""
    return math.sqrt(2.0 * math.log(max(n_features, 2)) / T) / (1.0 - gamma)


def mwal(large, mu_E, T, cfg=DEFAULT_CONFIG):
    """Multiplicative-weights apprenticeship learning.

    The reward player keeps ``w`` on the simplex and runs exponential weights
    on the losses ``w . (mu(pi_t) - mu_E)``; the policy player best-responds
    to ``w_t``.  Returns the uniform mixture of ``pi_1 .. pi_T``.  ``gaps[t]``
    is ``max_j (mu_E - mu_mix)_j`` for the mixture of the first ``t + 1``
    policies, the worst value shortfall over simplex rewards.
    """
    if T < 1:
        raise InvalidArgument("T must be at least 1")
    mu_E = np.asarray(mu_E, dtype=float)
    K = len(mu_E)
    log_w = np.full(K, -math.log(K))
    D, L = math.sqrt(math.log(max(K, 2))), 1.0 / (1.0 - large.gamma)
    policies, mus, gaps = [], [], []
    total = np.zeros(K)
    for t in range(1, T + 1):
        w = np.exp(log_w - log_w.max())
        w /= w.sum()
        policy, mu = large_best_response(large, w, cfg)
        policies.append(policy)
        mus.append(mu)
        total += mu
        gaps.append(float(np.max(mu_E - total / t)))
        log_w = log_w - (D / L) * math.sqrt(2.0 / t) * (mu - mu_E)
    mix = MixedPolicy(policies, np.full(T, 1.0 / T), mus)
    return MWALResult(mix, gaps, mwal_bound(K, large.gamma, T))


# ---------------------------------------------------------------------------
# Behavioral cloning

BC_FEATURE_MAPS = ("concat", "interaction", "tabular")


def bc_inputs(contexts, states, features, kind="concat"):
    """Model inputs for ``(context, state)`` pairs.

    ``concat``: ``[c, phi(s), 1]``.  ``interaction``: ``c ⊗ [phi(s), 1]``.
    ``tabular``: ``c ⊗ onehot(s)``.
    """
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    states = np.asarray(states, dtype=int).ravel()
    phi = np.asarray(features)[states]
    ones = np.ones((len(states), 1))
    if kind == "concat":
        return np.hstack([contexts, phi, ones])
    if kind == "interaction":
        return np.einsum("nd,nf->ndf", contexts, np.hstack([phi, ones])).reshape(len(states), -1)
    if kind == "tabular":
        onehot = np.zeros((len(states), len(features)))
        onehot[np.arange(len(states)), states] = 1.0
        return np.einsum("nd,ns->nds", contexts, onehot).reshape(len(states), -1)
    raise InvalidArgument(f"unknown BC feature map {kind!r}; expected one of {BC_FEATURE_MAPS}")


@dataclass
class BCModel:
    """Linear softmax policy ``p(a | c, s) ∝ exp(x(c, s) . weights[:, a])``."""

    weights: np.ndarray
    kind: str = "concat"
    seed: int = 0

    def to_dict(self):
        return {"weights": self.weights.tolist(), "kind": self.kind, "seed": self.seed, "shape": list(self.weights.shape)}

    @classmethod
    def from_dict(cls, doc):
        try:
            weights = np.asarray(doc["weights"], dtype=float)
            if list(weights.shape) != list(doc["shape"]):
                raise SchemaError("BC weights do not match the recorded shape")
            return cls(weights, doc["kind"], int(doc.get("seed", 0)))
        except KeyError as exc:
            raise SchemaError(f"BC model document is missing {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def bc_loss_and_grad(weights, X, actions, l2=0.0):
    """Mean cross-entropy of the softmax policy and its gradient."""
    logits = X @ weights
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    n = len(actions)
    loss = float(np.mean(log_norm - z[np.arange(n), actions])) + 0.5 * l2 * float(np.sum(weights**2))
    probs = np.exp(z - log_norm[:, None])
    probs[np.arange(n), actions] -= 1.0
    return loss, X.T @ probs / n + l2 * weights


def bc_train(
    contexts,
    states,
    actions,
    features,
    n_actions,
    epochs=200,
    lr=0.5,
    decay=1.0,
    batch_size=32,
    kind="concat",
    l2=0.0,
    seed=0,
):
    """Fit a linear softmax policy to ``(c, s, a)`` triples by mini-batch gradient descent.

    The step at epoch ``e`` is ``lr * decay**e``; examples are reshuffled
    every epoch with a generator seeded by ``seed``.
    """
    actions = np.asarray(actions, dtype=int).ravel()
    if len(actions) == 0:
        raise InvalidArgument("behavioral cloning needs a non-empty dataset")
    X = bc_inputs(contexts, states, features, kind)
    rng = np.random.default_rng(seed)
    weights = np.zeros((X.shape[1], n_actions))
    n = len(actions)
    for epoch in range(epochs):
        step = lr * decay**epoch
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grad = bc_loss_and_grad(weights, X[idx], actions[idx], l2)
            weights -= step * grad
    return BCModel(weights, kind, seed)


def bc_predict(model, c, s, features):
    """Action distribution at ``(c, s)``; ``s`` may be an array of states."""
    states = np.atleast_1d(np.asarray(s, dtype=int))
    contexts = np.broadcast_to(np.asarray(c, dtype=float), (len(states), len(np.asarray(c))))
    probs = softmax(bc_inputs(contexts, states, features, model.kind) @ model.weights)
    return probs[0] if np.ndim(s) == 0 else probs


def bc_policy(model, c, features):
    """Greedy deterministic policy over every state (lowest action on ties)."""
    return bc_predict(model, c, np.arange(len(features)), features).argmax(axis=1)


def bc_accuracy(model, contexts, states, actions, features):
    contexts = np.atleast_2d(contexts)
    X = bc_inputs(contexts, states, features, model.kind)
    return float(np.mean((X @ model.weights).argmax(axis=1) == np.asarray(actions)))
