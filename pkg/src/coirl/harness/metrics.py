"""Holdout metrics: loss, normalized value, and action agreement with the expert."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from coirl.cmdp import as_matrix
from coirl.expert import Expert, plan_contexts, policy_feature_expectations
from coirl.planner import DEFAULT_CONFIG

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "seed", "n_demos", "loss", "rel_value", "accuracy", "wall_ms")
DEGENERATE_GAP = 1e-12


@dataclass
class MetricsRow:
    step: int
    seed: int
    n_demos: int
    loss: float | None = None
    rel_value: float | None = None
    accuracy: float | None = None
    wall_ms: float | None = None

    def as_list(self):
        return [getattr(self, c) for c in METRIC_COLUMNS]


def occupancy(dynamics, policy, start, gamma):
    """Normalized discounted state occupancy ``(1-gamma) start^T (I - gamma P_pi)^{-1}``."""
    transition = dynamics.policy_matrix(policy).T
    return (1.0 - gamma) * dynamics.solve(transition, start, gamma)


def random_policy_values(cmdp, W, contexts):
    """Value from ``xi`` of the uniform-random policy at each context."""
    out = np.empty(len(contexts))
    if cmdp.context_independent:
        dyn = cmdp.dynamics(contexts[0])
        mu = dyn.solve(dyn.mean_action_matrix(), cmdp.features, cmdp.gamma)
        return np.einsum("bk,k->b", contexts @ W, cmdp.xi @ mu)
    for b, c in enumerate(contexts):
        dyn = cmdp.dynamics(c)
        mu = dyn.solve(dyn.mean_action_matrix(), cmdp.features, cmdp.gamma)
        out[b] = (c @ W) @ (cmdp.xi @ mu)
    return out


class Evaluator:
    """Scores mappings or policies on a fixed holdout against the true mapping.

    ``rel_value`` is ``(V - V_rand) / (V* - V_rand)`` per context, clipped to
    ``[0, 1]`` and averaged; contexts where ``V* == V_rand`` are skipped.
    ``accuracy`` weights action agreement by the expert's discounted
    occupancy; ``accuracy_uniform`` weights states equally.
    """

    def __init__(self, cmdp, w_star, contexts, cfg=DEFAULT_CONFIG, expert=None):
        self.cmdp = cmdp
        self.w_star = as_matrix(w_star)
        self.contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
        self.cfg = cfg
        self.expert = Expert(cmdp, self.w_star, cfg) if expert is None else expert
        self.expert_policies = self.expert.policies(self.contexts)
        self.mu_star = policy_feature_expectations(cmdp, self.expert_policies, self.contexts)
        self.f_true = self.contexts @ self.w_star
        self.v_star = np.einsum("bk,bk->b", self.f_true, self.mu_star)
        self.v_rand = random_policy_values(cmdp, self.w_star, self.contexts)
        gap = self.v_star - self.v_rand
        self.valid = gap > DEGENERATE_GAP
        if not self.valid.all():
            log.warning("skipping %d holdout contexts where V* equals the random-policy value", int((~self.valid).sum()))
        self.weights = np.stack([self._occupancy(c, p) for c, p in zip(self.contexts, self.expert_policies)])

    def _occupancy(self, c, policy):
        return occupancy(self.cmdp.dynamics(c), policy, self.cmdp.xi, self.cmdp.gamma)

    def policy_scores(self, policies):
        """Metrics for explicit agent policies ``(B, S)``."""
        policies = np.atleast_2d(policies)
        mu = policy_feature_expectations(self.cmdp, policies, self.contexts)
        v = np.einsum("bk,bk->b", self.f_true, mu)
        rel = (v - self.v_rand)[self.valid] / (self.v_star - self.v_rand)[self.valid]
        match = policies == self.expert_policies
        return {
            "rel_value": float(np.clip(rel, 0.0, 1.0).mean()) if rel.size else float("nan"),
            "accuracy": float(np.mean(np.sum(self.weights * match, axis=1))),
            "accuracy_uniform": float(match.mean()),
            "values": v,
            "mu": mu,
        }

    def __call__(self, W):
        """Metrics for the policies a mapping ``W`` makes optimal."""
        W = as_matrix(W)
        policies, _ = plan_contexts(self.cmdp, W, self.contexts, self.cfg)
        scores = self.policy_scores(policies)
        scores["loss"] = float(np.mean(np.einsum("bk,bk->b", self.contexts @ W, scores["mu"] - self.mu_star)))
        return {key: scores[key] for key in ("loss", "rel_value", "accuracy", "accuracy_uniform")}


def evaluate(cmdp, W, contexts, w_star, cfg=DEFAULT_CONFIG):
    """One-shot holdout metrics for mapping ``W``."""
    return Evaluator(cmdp, w_star, contexts, cfg)(W)
