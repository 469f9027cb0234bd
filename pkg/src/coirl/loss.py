"""The COIRL objective, its subgradient, and the evolution-strategies estimator.

For a reward mapping ``W`` and demonstrations ``(c, mu_E)`` the loss is

    Loss(W) = mean_c  (c^T W) . (mu^{pi_c(W)} - mu_E)

where ``pi_c(W)`` is optimal for the reward ``W`` induces at ``c``.  With exact
demonstrations every term is non-negative and ``Loss(W*) = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coirl.cmdp import as_matrix
from coirl.errors import InvalidArgument
from coirl.expert import plan_contexts, policy_feature_expectations
from coirl.planner import DEFAULT_CONFIG, feature_expectations_many, optimal_policies


@dataclass(frozen=True)
class LossReport:
    value: float
    per_context: tuple

    @property
    def terms(self):
        return np.array([term for _, term in self.per_context])


def _stack_demos(demos):
    if not demos:
        raise InvalidArgument("need at least one demonstration")
    contexts = np.stack([np.asarray(d.context, dtype=float) for d in demos])
    mus = np.stack([np.asarray(d.mu, dtype=float) for d in demos])
    return contexts, mus


def agent_feature_expectations(cmdp, W, contexts, cfg=DEFAULT_CONFIG):
    """Feature expectations of the policies ``W`` makes optimal: ``(policies, mus)``."""
    policies, _ = plan_contexts(cmdp, W, contexts, cfg)
    return policies, policy_feature_expectations(cmdp, policies, contexts)


def evaluate_loss(cmdp, W, demos, cfg=DEFAULT_CONFIG):
    """Loss report and averaged subgradient from a single planning pass."""
    W = as_matrix(W)
    contexts, mu_expert = _stack_demos(demos)
    _, mu_agent = agent_feature_expectations(cmdp, W, contexts, cfg)
    diff = mu_agent - mu_expert
    terms = np.einsum("bk,bk->b", contexts @ W, diff)
    report = LossReport(float(terms.mean()), tuple(zip(contexts, terms.tolist())))
    grad = np.einsum("bd,bk->dk", contexts, diff) / len(demos)
    return report, grad


def coirl_loss(cmdp, W, demos, cfg=DEFAULT_CONFIG):
    """Mean over demonstrations of ``f_W(c) . (mu^{pi_c(W)} - mu_E)``."""
    return evaluate_loss(cmdp, W, demos, cfg)[0]


def subgradient(cmdp, W, demos, cfg=DEFAULT_CONFIG):
    """``mean_c c ⊙ (mu^{pi_c(W)} - mu_E)`` as a ``d x k`` matrix.

    ``demos`` may be a single demonstration (stochastic oracle) or a list.
    """
    if not isinstance(demos, (list, tuple)):
        demos = [demos]
    return evaluate_loss(cmdp, W, demos, cfg)[1]


def lipschitz_bounds(d, k, gamma):
    """Subgradient norm bounds ``(inf-norm, 2-norm)``: ``2/(1-gamma)`` and ``2 sqrt(dk)/(1-gamma)``."""
    return 2.0 / (1.0 - gamma), 2.0 * np.sqrt(d * k) / (1.0 - gamma)


def losses_many(cmdp, Ws, demos, cfg=DEFAULT_CONFIG, v0=None):
    """Loss at each of ``N`` mappings ``Ws (N, d, k)`` over the same demos -> ``(N,)``.

    With shared dynamics all ``N * B`` rewards are planned in one batch, and
    policies common to several columns are evaluated once.
    """
    Ws = np.asarray(Ws, dtype=float)
    contexts, mu_expert = _stack_demos(demos)
    N, B = len(Ws), len(contexts)
    if not cmdp.context_independent:
        return np.array([coirl_loss(cmdp, W, demos, cfg).value for W in Ws])
    rewards_ctx = np.einsum("bd,ndk->nbk", contexts, Ws)  # f_W(c) per (n, b)
    rewards = cmdp.features @ rewards_ctx.reshape(N * B, -1).T
    dyn = cmdp.dynamics(contexts[0])
    policies, _ = optimal_policies(dyn, rewards, cmdp.gamma, cfg, v0)
    mus = feature_expectations_many(dyn, policies, cmdp.features, cmdp.gamma, cmdp.xi).reshape(N, B, -1)
    terms = np.einsum("nbk,nbk->nb", rewards_ctx, mus - mu_expert[None])
    return terms.mean(axis=1)


# ---------------------------------------------------------------------------
# Evolution strategies


@dataclass(frozen=True)
class ESConfig:
    """Zeroth-order gradient estimator settings.

    Directions ``u_j ~ N(0, rho^2 I)`` are normalized to unit length and
    scaled by ``nu``; the average is divided by ``m * rho``.
    """

    m: int = 250
    rho: float = 1.0
    nu: float = 1e-3
    centered: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise InvalidArgument("m must be at least 1")
        if not (self.rho > 0 and self.nu > 0):
            raise InvalidArgument("rho and nu must be positive")


def es_directions(shape, cfg, rng):
    u = rng.normal(0.0, cfg.rho, size=(cfg.m,) + tuple(shape))
    norms = np.linalg.norm(u.reshape(cfg.m, -1), axis=1)
    return u / norms.reshape((cfg.m,) + (1,) * len(shape))


def es_estimate(loss_batch, W, cfg, rng, base=None):
    """ES gradient of an arbitrary loss.

    Args:
        loss_batch: maps an ``(N, *W.shape)`` stack to ``(N,)`` losses.
        base: ``loss(W)``, used when ``cfg.centered``; computed if omitted.
    """
    W = np.asarray(W, dtype=float)
    units = es_directions(W.shape, cfg, rng)
    steps = cfg.nu * units
    values = np.asarray(loss_batch(W[None] + steps), dtype=float)
    if cfg.centered:
        if base is None:
            base = float(np.asarray(loss_batch(W[None]))[0])
        values = values - base
    return np.tensordot(values, steps, axes=1) / (cfg.m * cfg.rho)


def es_gradient(cmdp, W, demos, cfg=ESConfig(), rng=None, planner=DEFAULT_CONFIG):
    """ES estimate of the COIRL loss gradient at ``W``.

    Perturbed points are evaluated as-is, without projecting back into the
    constraint set.  Value iteration for the perturbed rewards starts from the
    values at ``W``.
    """
    W = as_matrix(W)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    contexts, _ = _stack_demos(demos)
    v0 = None
    if cmdp.context_independent:
        _, values = plan_contexts(cmdp, W, contexts, planner)
        v0 = np.tile(values, (1, cfg.m))
    base = coirl_loss(cmdp, W, demos, planner).value if cfg.centered else None
    return es_estimate(lambda Ws: losses_many(cmdp, Ws, demos, planner, v0), W, cfg, rng, base)
