"""Cutting-plane learners that shrink an ellipsoid of feasible reward mappings.

The feasible set starts as the minimum-volume ellipsoid around the l-inf unit
box in ``R^{dk}`` (center 0, ``Q = dk I``).  Each cut keeps the half
``{theta : (theta - center)^T a >= 0}`` and replaces the ellipsoid by the
minimum-volume ellipsoid enclosing that half.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from coirl.cmdp import as_matrix, outer_flatten
from coirl.errors import DegenerateCut, InvalidArgument, NumericalFailure
from coirl.expert import Expert, near_optimal_radius, plan_contexts, policy_feature_expectations
from coirl.planner import (
    DEFAULT_CONFIG,
    optimal_policies,
    optimal_policies_stacked,
    state_feature_expectations_stacked,
)

TRACE_COLUMNS = ("round", "cut_applied", "det_Q", "volume_ratio", "suboptimal_count", "holdout_rel_value")


@dataclass(frozen=True)
class EllipsoidState:
    """Ellipsoid ``{theta : (theta - center)^T Q^{-1} (theta - center) <= 1}``."""

    center: np.ndarray
    Q: np.ndarray

    @classmethod
    def unit_box(cls, dim):
        """Minimum-volume ellipsoid around ``[-1, 1]^dim``: the ball of radius ``sqrt(dim)``."""
        return cls(np.zeros(dim), dim * np.eye(dim))

    @property
    def dim(self):
        return len(self.center)

    def membership(self, theta):
        """``(theta - center)^T Q^{-1} (theta - center)``; at most 1 inside."""
        diff = np.asarray(theta, dtype=float).ravel() - self.center
        return float(diff @ np.linalg.solve(self.Q, diff))

    def contains(self, theta, tol=1e-7):
        return self.membership(theta) <= 1.0 + tol

    def log_det(self):
        sign, logdet = np.linalg.slogdet(self.Q)
        if sign <= 0:
            raise NumericalFailure("ellipsoid shape matrix is not positive definite")
        return logdet

    def is_positive_definite(self):
        return bool(np.linalg.eigvalsh(self.Q).min() > 0)


def volume_ratio_bound(dim):
    """Per-cut volume shrink factor ``exp(-1 / (2 (dim + 1)))``."""
    return math.exp(-1.0 / (2.0 * (dim + 1)))


def mvee_halfspace_update(state, a):
    """Minimum-volume ellipsoid around ``{theta in state : (theta - center)^T a >= 0}``.

    Returns ``(new_state, volume_ratio)`` with ``volume_ratio = sqrt(det Q' / det Q)``.
    """
    D = state.dim
    if D < 2:
        raise InvalidArgument("the half-space update needs dimension at least 2")
    a = np.asarray(a, dtype=float).ravel()
    if a.shape != (D,):
        raise InvalidArgument(f"cut vector must have length {D}")
    if not np.any(a):
        raise DegenerateCut("cut vector is zero")
    Q = state.Q
    quad = float(a @ Q @ a)
    if not quad > 0.0:
        raise DegenerateCut(f"a^T Q a = {quad:.3g} is not positive")
    a_tilde = -a / math.sqrt(quad)
    Qa = Q @ a_tilde
    center = state.center - Qa / (D + 1)
    Q_new = (D * D / (D * D - 1.0)) * (Q - (2.0 / (D + 1)) * np.outer(Qa, Qa))
    Q_new = 0.5 * (Q_new + Q_new.T)
    new = EllipsoidState(center, Q_new)
    try:
        ratio = math.exp(0.5 * (new.log_det() - state.log_det()))
    except NumericalFailure as exc:
        raise NumericalFailure(f"cut produced a non-positive-definite Q (a^T Q a = {quad:.3g})") from exc
    return new, ratio


def clamp_center(state, max_cuts=10_000):
    """Cut along coordinate axes until the center lies in ``[-1, 1]^dim``.

    Each cut keeps the side of the offending coordinate that faces the box,
    so no box point is ever removed.
    """
    ratios = []
    for _ in range(max_cuts):
        over = np.flatnonzero(np.abs(state.center) > 1.0)
        if len(over) == 0:
            return state, ratios
        j = over[np.argmax(np.abs(state.center[over]))]
        a = np.zeros(state.dim)
        a[j] = -np.sign(state.center[j])
        state, ratio = mvee_halfspace_update(state, a)
        ratios.append(ratio)
    raise NumericalFailure(f"center did not re-enter the box after {max_cuts} coordinate cuts")


def cut_bound(d, k, gamma, eps):
    """Rounds with an eps-suboptimal agent under exact experts: ``2dk(dk+1) log(4k sqrt(dk) / ((1-gamma) eps))``."""
    dk = d * k
    return 2.0 * dk * (dk + 1) * math.log(4.0 * k * math.sqrt(dk) / ((1.0 - gamma) * eps))


@dataclass
class EllipsoidTrace:
    state: EllipsoidState
    rows: list = field(default_factory=list)
    n_cuts: int = 0
    suboptimal_rounds: int = 0
    rounds: int = 0
    volume_ratios: list = field(default_factory=list)
    membership: list = field(default_factory=list)
    cut_margins: list = field(default_factory=list)
    centers: list = field(default_factory=list)
    clamp_cuts: int = 0
    skipped_cuts: int = 0

    @property
    def W(self):
        return self.state.center

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for r in self.rows:
                writer.writerow(["" if r.get(c) is None else repr(r[c]) for c in TRACE_COLUMNS])


def _row(trace, t, cut, ratio, holdout=None):
    return {
        "round": t,
        "cut_applied": int(cut),
        "det_Q": float(np.exp(trace.state.log_det())),
        "volume_ratio": ratio,
        "suboptimal_count": trace.suboptimal_rounds,
        "holdout_rel_value": holdout,
    }


def run_ellipsoid(
    cmdp,
    w_star,
    contexts,
    eps,
    patience=None,
    evaluator: Callable | None = None,
    cfg=DEFAULT_CONFIG,
    chunk=64,
    record_rounds=True,
):
    """Ellipsoid learner with an exact sub-optimality oracle.

    Each round plans with the current center as the mapping.  When the agent
    is more than ``eps`` worse than the expert at that context, the expert's
    feature expectations are revealed and the cut
    ``a = c ⊙ (mu* - mu_agent)`` is applied.

    Args:
        contexts: array ``(N, d)`` of streamed contexts.
        patience: stop after this many consecutive rounds without a cut.
        evaluator: ``W -> holdout rel_value``, called after every cut.

    Returns:
        EllipsoidTrace; ``membership`` holds the true mapping's membership
        value after every cut.
    """
    if not eps > 0:
        raise InvalidArgument("eps must be positive")
    W_true = as_matrix(w_star)
    flat_true = W_true.ravel()
    d, k = cmdp.d, cmdp.k
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    expert = Expert(cmdp, W_true, cfg)
    trace = EllipsoidTrace(EllipsoidState.unit_box(d * k))
    trace.centers.append(trace.state.center.copy())
    quiet = 0
    t = 0
    N = len(contexts)
    while t < N:
        block = contexts[t : t + chunk]
        W = trace.state.center.reshape(d, k)
        _, mu_agent = _agent_mus(cmdp, W, block, cfg)
        mu_star = expert.feature_expectations(block)
        f_true = block @ W_true
        gaps = np.einsum("bk,bk->b", f_true, mu_star - mu_agent)
        bad = np.flatnonzero(gaps > eps)
        stop = len(block) if len(bad) == 0 else bad[0]
        if patience is not None and quiet + stop >= patience:
            take = patience - quiet
            _quiet_rows(trace, t, take, record_rounds)
            t += take
            break
        _quiet_rows(trace, t, stop, record_rounds)
        quiet += stop
        t += stop
        if len(bad) == 0:
            continue
        b = bad[0]
        a = outer_flatten(block[b], mu_star[b] - mu_agent[b])
        trace.cut_margins.append(float((flat_true - trace.state.center) @ a))
        trace.state, ratio = mvee_halfspace_update(trace.state, a)
        trace.n_cuts += 1
        trace.suboptimal_rounds += 1
        trace.volume_ratios.append(ratio)
        trace.membership.append(trace.state.membership(flat_true))
        trace.centers.append(trace.state.center.copy())
        holdout = None if evaluator is None else float(evaluator(trace.state.center.reshape(d, k)))
        trace.rows.append(_row(trace, t + 1, True, ratio, holdout))
        quiet = 0
        t += 1
    trace.rounds = t
    return trace


def _quiet_rows(trace, start, count, record):
    if record:
        logdet = float(np.exp(trace.state.log_det()))
        for i in range(count):
            trace.rows.append(
                {
                    "round": start + i + 1,
                    "cut_applied": 0,
                    "det_Q": logdet,
                    "volume_ratio": 1.0,
                    "suboptimal_count": trace.suboptimal_rounds,
                    "holdout_rel_value": None,
                }
            )


def _agent_mus(cmdp, W, contexts, cfg):
    policies, _ = plan_contexts(cmdp, W, contexts, cfg)
    return policies, policy_feature_expectations(cmdp, policies, contexts)


# ---------------------------------------------------------------------------
# Batched ellipsoid with sampled roll-outs and near-optimal experts


@dataclass(frozen=True)
class BatchConfig:
    """Batch ellipsoid settings.

    ``H`` is the roll-out length and ``n`` the number of examples aggregated
    per cut.  :meth:`theory` fills both from ``eps`` and ``delta``.
    """

    eps: float
    delta: float
    H: int
    n: int

    def __post_init__(self):
        if not self.eps > 0:
            raise InvalidArgument("eps must be positive")
        if not 0 < self.delta < 1:
            raise InvalidArgument("delta must lie in (0, 1)")
        if self.H < 0 or self.n < 1:
            raise InvalidArgument("H must be non-negative and n positive")

    @staticmethod
    def theory_horizon(k, gamma, eps):
        return int(math.ceil(math.log(8.0 * k / ((1.0 - gamma) * eps)) / (1.0 - gamma)))

    @staticmethod
    def theory_batch(d, k, gamma, eps, delta):
        dk = d * k
        inner = 4.0 * dk * (dk + 1) * math.log(16.0 * k * math.sqrt(dk) / ((1.0 - gamma) * eps)) / delta
        return int(math.ceil(512.0 * k * k / ((1.0 - gamma) ** 2 * eps**2) * math.log(inner)))

    @classmethod
    def theory(cls, d, k, gamma, eps, delta):
        return cls(eps, delta, cls.theory_horizon(k, gamma, eps), cls.theory_batch(d, k, gamma, eps, delta))

    def round_bound(self, d, k, gamma):
        """Rounds with a sub-optimal action: ``n * 2dk(dk+1) log(16k sqrt(dk) / ((1-gamma) eps))``."""
        return self.n * self.cut_bound(d, k, gamma)

    def cut_bound(self, d, k, gamma):
        dk = d * k
        return 2.0 * dk * (dk + 1) * math.log(16.0 * k * math.sqrt(dk) / ((1.0 - gamma) * self.eps))


def _plan_each(cmdp, Ws, contexts, cfg):
    """Optimal policy, Q and per-state feature expectations for ``(W_b, c_b)`` pairs."""
    B = len(contexts)
    rewards = np.einsum("sk,bk->bs", cmdp.features, np.einsum("bd,bdk->bk", contexts, Ws))
    if cmdp.n_states <= 64:
        if cmdp.context_independent:
            kernels = np.broadcast_to(cmdp.base_kernels[0], (B,) + cmdp.base_kernels.shape[1:])
        else:
            kernels = np.tensordot(contexts, cmdp.base_kernels, axes=1)
        policies, V = optimal_policies_stacked(kernels, rewards, cmdp.gamma, cfg)
        Q = rewards[:, :, None] + cmdp.gamma * np.einsum("bsat,bt->bsa", kernels, V)
        mus = state_feature_expectations_stacked(kernels, policies, cmdp.features, cmdp.gamma)
        return policies, V, Q, mus, kernels
    pols, Vs, Qs, mus, kernels = [], [], [], [], []
    for b in range(B):
        dyn = cmdp.dynamics(contexts[b])
        p, v = optimal_policies(dyn, rewards[b], cmdp.gamma, cfg)
        pols.append(p)
        Vs.append(v)
        Qs.append(rewards[b][:, None] + cmdp.gamma * dyn.expect(v))
        mus.append(dyn.solve_policy(p, cmdp.features, cmdp.gamma))
        kernels.append(dyn.kernel)
    return np.stack(pols), np.stack(Vs), np.stack(Qs), np.stack(mus), np.stack(kernels)


def _sample_next(kernels, states, actions, rng):
    probs = kernels[np.arange(len(states)), states, actions]
    cum = np.cumsum(probs, axis=1)
    u = rng.random(len(states)) * cum[:, -1]
    return np.minimum((cum <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


def run_batch_ellipsoid(
    cmdp,
    w_star,
    contexts_fn: Callable,
    cfg: BatchConfig,
    rng,
    max_rounds=10**7,
    max_cuts=None,
    perturb=True,
    planner=DEFAULT_CONFIG,
    chunk=20_000,
    evaluator: Callable | None = None,
):
    """Batch ellipsoid learner with action-level feedback and sampled roll-outs.

    Every round draws a context and (when ``perturb``) a near-optimal expert
    mapping within ``(1-gamma) eps / (8k)`` of ``w_star``.  The agent plays an
    ``H``-step episode with the center mapping.  At the first state where its
    action is more than ``eps`` worse than the expert's value, the expert rolls
    out ``H`` steps from that state and the pair ``(c ⊙ x_hat*, c ⊙ x_agent)``
    is added to the batch.  Every ``n`` examples the batch mean defines one cut.

    Rounds are simulated in vectorized chunks while the center is fixed; after
    a cut the unused tail of the chunk is discarded and re-drawn.

    Args:
        contexts_fn: ``(rng, count) -> (count, d)`` context sampler.
    """
    W_true = as_matrix(w_star)
    flat_true = W_true.ravel()
    d, k, S = cmdp.d, cmdp.k, cmdp.n_states
    gamma, H, n = cmdp.gamma, cfg.H, cfg.n
    radius = near_optimal_radius(cfg.eps, gamma, k)
    trace = EllipsoidTrace(EllipsoidState.unit_box(d * k))
    z_sum = np.zeros(d * k)
    z_star_sum = np.zeros(d * k)
    count = 0
    discounts = gamma ** np.arange(H + 1)
    while trace.rounds < max_rounds and (max_cuts is None or trace.n_cuts < max_cuts):
        B = int(min(chunk, max_rounds - trace.rounds))
        contexts = contexts_fn(rng, B)
        if perturb:
            lo = np.maximum(W_true - radius, -1.0)
            hi = np.minimum(W_true + radius, 1.0)
            experts = lo + (hi - lo) * rng.random((B, d, k))
        else:
            experts = np.broadcast_to(W_true, (B, d, k))
        e_pol, e_V, e_Q, _, kernels = _plan_each(cmdp, experts, contexts, planner)
        center = np.broadcast_to(trace.state.center.reshape(d, k), (B, d, k))
        a_pol, _, _, a_mu, _ = _plan_each(cmdp, center, contexts, planner)
        rows = np.arange(B)
        gap_ok = e_Q[rows[:, None], np.arange(S)[None, :], a_pol] + cfg.eps >= e_V
        # Agent episode: first visited state where its action is eps-suboptimal.
        states = rng.choice(S, size=B, p=cmdp.xi)
        err_state = np.full(B, -1)
        for _ in range(H + 1):
            fresh = (err_state < 0) & ~gap_ok[rows, states]
            err_state[fresh] = states[fresh]
            states = _sample_next(kernels, states, a_pol[rows, states], rng)
        erring = np.flatnonzero(err_state >= 0)
        # Expert roll-outs from the erring states.
        x_hat = np.zeros((len(erring), k))
        s = err_state[erring]
        sub_kernels = kernels[erring]
        sub_pol = e_pol[erring]
        idx = np.arange(len(erring))
        for h in range(H + 1):
            x_hat += discounts[h] * cmdp.features[s]
            if h < H:
                s = _sample_next(sub_kernels, s, sub_pol[idx, s], rng)
        x_agent = a_mu[erring, err_state[erring]]
        c_err = contexts[erring]
        need = n - count
        if len(erring) < need:
            z_star_sum += np.einsum("bd,bk->dk", c_err, x_hat).ravel()
            z_sum += np.einsum("bd,bk->dk", c_err, x_agent).ravel()
            count += len(erring)
            trace.suboptimal_rounds += len(erring)
            trace.rounds += B
            continue
        # Enough examples to cut inside this chunk: keep rounds up to the n-th example.
        last = erring[need - 1]
        z_star_sum += np.einsum("bd,bk->dk", c_err[:need], x_hat[:need]).ravel()
        z_sum += np.einsum("bd,bk->dk", c_err[:need], x_agent[:need]).ravel()
        trace.suboptimal_rounds += need
        trace.rounds += int(last) + 1
        a = (z_star_sum - z_sum) / n
        z_sum[:] = 0.0
        z_star_sum[:] = 0.0
        count = 0
        if not np.any(a):
            trace.skipped_cuts += 1
            continue
        trace.cut_margins.append(float((flat_true - trace.state.center) @ a))
        trace.state, ratio = mvee_halfspace_update(trace.state, a)
        trace.volume_ratios.append(ratio)
        trace.state, clamp_ratios = clamp_center(trace.state)
        trace.clamp_cuts += len(clamp_ratios)
        trace.n_cuts += 1
        trace.membership.append(trace.state.membership(flat_true))
        trace.centers.append(trace.state.center.copy())
        holdout = None if evaluator is None else float(evaluator(trace.state.center.reshape(d, k)))
        trace.rows.append(_row(trace, trace.rounds, True, ratio, holdout))
    trace.rows.append(_row(trace, trace.rounds, False, 1.0))
    return trace
