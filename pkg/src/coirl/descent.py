"""Mirror-descent learners for the COIRL loss.

Two geometries are supported: projected subgradient descent on the unit
l2 ball ("ball") and exponential weights on the simplex ("simplex").  The
evolution-strategies loop reuses the same projections.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from coirl.cmdp import in_geometry, project
from coirl.errors import DegenerateStep, InvalidArgument
from coirl.loss import ESConfig, coirl_loss, es_gradient, evaluate_loss
from coirl.planner import DEFAULT_CONFIG

MDA_GEOMETRIES = ("ball", "simplex")
TRACE_COLUMNS = ("step", "alpha", "grad_norm", "loss", "rel_value", "accuracy")


@dataclass(frozen=True)
class GeometryConstants:
    """Strong convexity ``sigma``, diameter ``D`` and Lipschitz constant ``L`` of a geometry."""

    geometry: str
    sigma: float
    D: float
    L: float
    dk: int

    def alpha(self, t):
        """Theory step ``(D / L) sqrt(2 sigma / t)``."""
        return (self.D / self.L) * math.sqrt(2.0 * self.sigma / t)

    def bound(self, T):
        """Averaged-iterate optimality gap bound ``D L sqrt(2 / (sigma T))``."""
        return self.D * self.L * math.sqrt(2.0 / (self.sigma * T))

    def es_alpha(self, T):
        """Constant ES step ``D / ((dk + 4) sqrt(T + 1) L)``."""
        return self.D / ((self.dk + 4) * math.sqrt(T + 1) * self.L)

    def es_horizon(self, eps):
        """ES iteration count ``4 (dk + 4)^2 D^2 L^2 / eps^2``."""
        return int(math.ceil(4.0 * (self.dk + 4) ** 2 * self.D**2 * self.L**2 / eps**2))


def theory_constants(d, k, gamma, geometry):
    """Closed-form constants for the l2 ball or the ``dk - 1`` simplex."""
    if d < 1 or k < 1:
        raise InvalidArgument("d and k must be positive")
    if not 0.0 <= gamma < 1.0:
        raise InvalidArgument("gamma must lie in [0, 1)")
    dk = d * k
    if geometry == "ball":
        return GeometryConstants("ball", 1.0, 1.0, 2.0 * math.sqrt(dk) / (1.0 - gamma), dk)
    if geometry == "simplex":
        if dk < 2:
            raise InvalidArgument("exponential weights needs dk >= 2")
        return GeometryConstants("simplex", 1.0, math.sqrt(math.log(dk)), 2.0 / (1.0 - gamma), dk)
    raise InvalidArgument(f"mirror descent supports {MDA_GEOMETRIES}, got {geometry!r}")


def initial_mapping(d, k, geometry):
    """Ball starts at zero; simplex starts uniform."""
    if geometry == "ball":
        return np.zeros((d, k))
    if geometry == "simplex":
        return np.full((d, k), 1.0 / (d * k))
    raise InvalidArgument(f"unknown geometry {geometry!r}")


def mda_step(W, g, alpha, geometry):
    """One mirror-descent update.

    Ball: ``W - alpha g`` rescaled to unit l2 norm.  Simplex: multiplicative
    update ``W * exp(-alpha g)`` renormalized, computed in log space.
    """
    W = np.asarray(W, dtype=float)
    g = np.asarray(g, dtype=float)
    if g.shape != W.shape:
        raise InvalidArgument(f"gradient shape {g.shape} does not match W {W.shape}")
    if not np.all(np.isfinite(g)):
        raise InvalidArgument("gradient has non-finite entries")
    if geometry == "ball":
        step = W - alpha * g
        norm = np.linalg.norm(step)
        if norm == 0.0 or not np.isfinite(norm):
            raise DegenerateStep("ball step produced a zero matrix; cannot renormalize")
        return step / norm
    if geometry == "simplex":
        with np.errstate(divide="ignore"):
            logits = np.log(W) - alpha * g
        logits = logits - logits.max()
        out = np.exp(logits)
        return out / out.sum()
    raise InvalidArgument(f"mirror descent supports {MDA_GEOMETRIES}, got {geometry!r}")


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    W_avg: np.ndarray | None = None
    W_last: np.ndarray | None = None
    W_best: np.ndarray | None = None
    best_loss: float = math.inf

    def column(self, name):
        return np.array([r.get(name, np.nan) for r in self.records], dtype=float)

    def checkpoints(self):
        return [r for r in self.records if r.get("loss") is not None or r.get("rel_value") is not None]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for r in self.records:
                writer.writerow(["" if r.get(c) is None else repr(r[c]) for c in TRACE_COLUMNS])


def _checkpoint(record, evaluator, W):
    if evaluator is None:
        return
    for key, value in evaluator(W).items():
        if key in TRACE_COLUMNS:
            record[key] = float(value)


def run_mda(
    cmdp,
    demo_stream,
    geometry,
    T,
    eval_every=10,
    evaluator: Callable | None = None,
    W1=None,
    schedule: Callable | None = None,
    planner=DEFAULT_CONFIG,
):
    """Online mirror descent with one demonstration per step.

    Args:
        demo_stream: iterable of demonstrations; step ``t`` consumes one.  A
            list of demonstrations per item is averaged into one subgradient.
        evaluator: optional ``W -> {"loss": ..., "rel_value": ..., ...}``
            called on the running average every ``eval_every`` steps and at
            step ``T``.
        schedule: ``t -> alpha_t``; defaults to the geometry's theory schedule.

    Returns:
        TrainTrace whose ``W_avg`` is the mean of ``W_1 .. W_T``.
    """
    if T < 1:
        raise InvalidArgument("T must be at least 1")
    consts = theory_constants(cmdp.d, cmdp.k, cmdp.gamma, geometry)
    schedule = consts.alpha if schedule is None else schedule
    W = initial_mapping(cmdp.d, cmdp.k, geometry) if W1 is None else np.array(W1, dtype=float)
    if not in_geometry(W, geometry):
        raise InvalidArgument(f"W1 does not lie in the {geometry} geometry")
    trace = TrainTrace()
    total = np.zeros_like(W)
    stream = iter(demo_stream)
    for t in range(1, T + 1):
        demo = next(stream)
        demos = list(demo) if isinstance(demo, (list, tuple)) else [demo]
        _, g = evaluate_loss(cmdp, W, demos, planner)
        alpha = float(schedule(t))
        total += W
        record = {"step": t, "alpha": alpha, "grad_norm": float(np.linalg.norm(g))}
        if t % eval_every == 0 or t == T:
            _checkpoint(record, evaluator, total / t)
        trace.records.append(record)
        W = mda_step(W, g, alpha, geometry)
    trace.W_avg = total / T
    trace.W_last = W
    return trace


def run_es(
    cmdp,
    demos,
    geometry,
    T,
    es_cfg=ESConfig(),
    step="theory",
    alpha0=0.1,
    decay=0.95,
    normalize_step=False,
    accept_if_decrease=False,
    W1=None,
    eval_every=10,
    evaluator: Callable | None = None,
    planner=DEFAULT_CONFIG,
):
    """Evolution-strategies descent on a fixed demonstration set.

    ``step="theory"`` uses the constant step ``D / ((dk+4) sqrt(T+1) L)``;
    ``step="practical"`` uses ``alpha0 * decay**t``.  ``normalize_step``
    rescales each ES direction to unit l2 norm and ``accept_if_decrease``
    keeps the current iterate when the candidate does not lower the loss.
    Returns the iterate with the lowest evaluated loss as ``W_best``.
    """
    if T < 1:
        raise InvalidArgument("T must be at least 1")
    if step not in ("theory", "practical"):
        raise InvalidArgument(f"unknown step rule {step!r}")
    consts = theory_constants(cmdp.d, cmdp.k, cmdp.gamma, geometry)
    rng = np.random.default_rng(es_cfg.seed)
    W = initial_mapping(cmdp.d, cmdp.k, geometry) if W1 is None else np.array(W1, dtype=float)
    loss = coirl_loss(cmdp, W, demos, planner).value
    trace = TrainTrace(W_best=W.copy(), best_loss=loss)
    total = np.zeros_like(W)
    for t in range(1, T + 1):
        g = es_gradient(cmdp, W, demos, es_cfg, rng, planner)
        alpha = consts.es_alpha(T) if step == "theory" else alpha0 * decay ** (t - 1)
        direction = g
        gnorm = float(np.linalg.norm(g))
        if normalize_step and gnorm > 0:
            direction = g / gnorm
        total += W
        if gnorm > 0:
            candidate = project(W - alpha * direction, geometry)
            cand_loss = coirl_loss(cmdp, candidate, demos, planner).value
            if not accept_if_decrease or cand_loss < loss:
                W, loss = candidate, cand_loss
        if loss < trace.best_loss:
            trace.W_best, trace.best_loss = W.copy(), loss
        record = {"step": t, "alpha": alpha, "grad_norm": gnorm, "loss": loss}
        if t % eval_every == 0 or t == T:
            _checkpoint(record, evaluator, trace.W_best)
            record["loss"] = loss
        trace.records.append(record)
    trace.W_avg = total / T
    trace.W_last = W
    return trace


def run_es_online(
    cmdp,
    demo_stream,
    geometry,
    T,
    es_cfg=ESConfig(m=500),
    alpha0=0.1,
    decay=0.95,
    eval_every=10,
    evaluator: Callable | None = None,
    W1=None,
    planner=DEFAULT_CONFIG,
    accept_window=None,
):
    """ES with one fresh demonstration per step.

    Each step estimates the gradient of the newest demonstration's loss and
    moves ``alpha0 * decay**(t-1)`` along the estimate divided by the running
    RMS of estimate norms, so demonstrations the current mapping already
    explains move it less.  On the ball the iterate is renormalized onto the
    unit sphere: the loss is positively homogeneous and would otherwise
    reward shrinking ``W``.  With ``accept_window`` set, a move is kept only
    if the loss over the last ``accept_window`` demonstrations decreases.
    """
    if accept_window is not None and accept_window < 1:
        raise InvalidArgument("accept_window must be at least 1")
    if T < 1:
        raise InvalidArgument("T must be at least 1")
    rng = np.random.default_rng(es_cfg.seed)
    W = initial_mapping(cmdp.d, cmdp.k, geometry) if W1 is None else np.array(W1, dtype=float)
    trace = TrainTrace()
    stream = iter(demo_stream)
    recent = []
    sq_sum = 0.0
    for t in range(1, T + 1):
        demo = next(stream)
        recent.extend(demo if isinstance(demo, (list, tuple)) else [demo])
        recent = recent[-(accept_window or 1):]
        g = es_gradient(cmdp, W, recent[-1:], es_cfg, rng, planner)
        gnorm = float(np.linalg.norm(g))
        sq_sum += gnorm * gnorm
        alpha = alpha0 * decay ** (t - 1)
        record = {"step": t, "alpha": alpha, "grad_norm": gnorm}
        if gnorm > 0:
            candidate = project(W - alpha * g / math.sqrt(sq_sum / t), geometry)
            if geometry == "ball" and np.any(candidate):
                candidate = candidate / np.linalg.norm(candidate)
            if accept_window is None or not np.any(W):
                W = candidate
            else:
                loss = coirl_loss(cmdp, W, recent, planner).value
                record["loss"] = loss
                if coirl_loss(cmdp, candidate, recent, planner).value < loss:
                    W = candidate
        if t % eval_every == 0 or t == T:
            _checkpoint(record, evaluator, W)
        trace.records.append(record)
    trace.W_last = W
    trace.W_avg = W
    return trace


def run_minibatch(
    cmdp,
    demos,
    geometry,
    iterations,
    batch_size,
    rng,
    alpha0=0.25,
    decay=0.95,
    eval_every=10,
    evaluator: Callable | None = None,
    W1=None,
    planner=DEFAULT_CONFIG,
):
    """Offline descent: each step averages the subgradient of a resampled mini-batch.

    Steps are ``alpha0 * decay**t``.  Returns the last iterate as ``W_last``
    and the running average as ``W_avg``.
    """
    if not demos:
        raise InvalidArgument("need at least one demonstration")
    W = initial_mapping(cmdp.d, cmdp.k, geometry) if W1 is None else np.array(W1, dtype=float)
    trace = TrainTrace()
    total = np.zeros_like(W)
    for t in range(1, iterations + 1):
        idx = rng.choice(len(demos), size=min(batch_size, len(demos)), replace=False)
        _, g = evaluate_loss(cmdp, W, [demos[i] for i in idx], planner)
        alpha = alpha0 * decay ** (t - 1)
        total += W
        record = {"step": t, "alpha": alpha, "grad_norm": float(np.linalg.norm(g))}
        if t % eval_every == 0 or t == iterations:
            _checkpoint(record, evaluator, W)
        trace.records.append(record)
        if np.any(g):
            W = mda_step(W, g, alpha, geometry)
    trace.W_avg = total / iterations
    trace.W_last = W
    return trace


def fit_revealed(
    cmdp,
    demos,
    W,
    alpha0,
    epochs=40,
    inner_decay=0.9,
    planner=DEFAULT_CONFIG,
):
    """Full-batch subgradient epochs over a revealed demonstration set.

    The subgradient is scaled to unit l-inf norm, the step shrinks by
    ``inner_decay`` every epoch, and every iterate is renormalized onto the
    unit l2 sphere (the loss is positively homogeneous, so the sphere removes
    the trivial minimizer at zero).  Returns the iterate with the lowest loss
    over ``demos``, the starting point included.
    """
    W = np.array(W, dtype=float)
    norm = np.linalg.norm(W)
    if norm == 0.0:
        raise DegenerateStep("fit_revealed needs a nonzero starting mapping")
    W = W / norm
    report, g = evaluate_loss(cmdp, W, demos, planner)
    best_W, best_loss = W, report.value
    alpha = alpha0
    for _ in range(epochs):
        gmax = np.abs(g).max()
        if gmax == 0.0 or best_loss <= 0.0:
            break
        W = W - alpha * g / gmax
        norm = np.linalg.norm(W)
        if norm == 0.0:
            break
        W = W / norm
        report, g = evaluate_loss(cmdp, W, demos, planner)
        if report.value < best_loss:
            best_W, best_loss = W, report.value
        alpha *= inner_decay
    return best_W, best_loss
