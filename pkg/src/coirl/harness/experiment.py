"""Experiment configuration and seeded runners that write metrics CSVs and a manifest."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import coirl
from coirl.baselines import al_projection, bc_accuracy, bc_policy, bc_train, build_large_mdp, large_feature_expectations, mwal
from coirl.cmdp import outer_flatten
from coirl.descent import fit_revealed, run_es_online, run_mda, run_minibatch
from coirl.ellipsoid import BatchConfig, run_batch_ellipsoid, run_ellipsoid
from coirl.environments import make_driving, make_preset, sample_context, with_w_star
from coirl.errors import COIRLError, InvalidArgument, SchemaError
from coirl.expert import Expert, SamplingScheme, context_rng, demo_stream, plan_contexts, policy_feature_expectations
from coirl.harness.metrics import METRIC_COLUMNS, Evaluator, MetricsRow
from coirl.loss import ESConfig, subgradient
from coirl.planner import PlannerConfig

log = logging.getLogger(__name__)

LEARNERS = ("psgd", "ew", "es", "ellipsoid", "batch-ellipsoid", "al-large", "mwal", "bc")
LEARNER_GEOMETRY = {"psgd": "ball", "ew": "simplex", "es": "ball"}
DEFAULT_HOLDOUT = {"grid": 100, "driving": 80, "synth": 300}
DEFAULT_TOL = {"grid": 1e-4, "driving": 1e-4, "synth": 1e-3}
HOLDOUT_SEED = 20_201
NORMALIZATION_NOTE = "rel_value = (V - V_uniform_random) / (V* - V_uniform_random) per holdout context, clipped to [0, 1]"


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: environment, learner, demonstration scheme and budget.

    Attributes:
        env: preset name (``grid:3x4``, ``driving``, ``synth:S,A,d,k,seed``).
        w_preset: for ``driving``, ``"online"`` or ``"ellipsoid"``.
        scheme: ``exact``, ``geometric`` or ``fixed``; ``horizon`` is used by ``fixed``.
        T: descent steps, ellipsoid rounds, or AL iterations.
        n_train: training contexts for offline learners (``bc``) and AL.
        params: learner-specific overrides, e.g. ``{"m": 500}`` for ES.
    """

    env: str = "grid:3x4"
    learner: str = "psgd"
    w_preset: str = "online"
    scheme: str = "fixed"
    horizon: int = 40
    T: int = 200
    epochs: int = 40
    batch_size: int = 1
    n_train: int = 25
    seeds: tuple = (0,)
    holdout: int | None = None
    eval_every: int = 10
    eps: float = 0.1
    out_dir: str = "runs"
    params: dict = field(default_factory=dict)
    record_wall_ms: bool = False

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise InvalidArgument(f"unknown learner {self.learner!r}; expected one of {LEARNERS}")
        if not self.seeds:
            raise InvalidArgument("seeds must be non-empty")
        if self.T < 1 or self.eval_every < 1:
            raise InvalidArgument("T and eval_every must be positive")
        family = self.family
        if family not in DEFAULT_HOLDOUT:
            raise InvalidArgument(f"unknown environment preset {self.env!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def family(self):
        return self.env.split(":")[0]

    def resolved_holdout(self):
        return DEFAULT_HOLDOUT[self.family] if self.holdout is None else self.holdout

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def seed_override(config):
    """Apply the ``COIRL_SEED`` environment variable, if set."""
    value = os.environ.get("COIRL_SEED")
    if value is None or value == "":
        return config
    try:
        seed = int(value)
    except ValueError as exc:
        raise InvalidArgument(f"COIRL_SEED must be an integer, got {value!r}") from exc
    return dataclasses.replace(config, seeds=(seed,))


def build_environment(config):
    """CMDP with its true mapping set according to the config."""
    family = config.family
    if family == "driving":
        env = make_driving()
        W = env.presets[config.w_preset]
        return with_w_star(env.cmdp, W, "box" if config.w_preset == "ellipsoid" else None)
    return make_preset(config.env)


def planner_for(config):
    return PlannerConfig(tol=config.params.get("tol", DEFAULT_TOL[config.family]))


def holdout_contexts(cmdp, size):
    return sample_context(np.random.default_rng(HOLDOUT_SEED), cmdp.d, size)


def train_contexts(cmdp, seed, size):
    return sample_context(np.random.default_rng(np.random.SeedSequence([seed, 1])), cmdp.d, size)


def _scheme(config):
    if config.scheme == "fixed":
        return SamplingScheme("fixed", horizon=config.horizon)
    return SamplingScheme(config.scheme, horizon=None)


def _row(step, seed, n_demos, metrics, start, record_wall):
    wall = (time.perf_counter() - start) * 1000.0 if record_wall else None
    return MetricsRow(step, seed, n_demos, metrics.get("loss"), metrics.get("rel_value"), metrics.get("accuracy"), wall)


# ---------------------------------------------------------------------------
# Protocols: each returns a list of MetricsRow for one seed.


def online_protocol(config, cmdp, seed, evaluator, planner):
    """One demonstration per step; PSGD/EW use theory steps, ES the practical rule."""
    contexts = train_contexts(cmdp, seed, config.T)
    expert = Expert(cmdp, cmdp.w_star, planner)
    stream = demo_stream(expert, contexts, _scheme(config), seed)
    geometry = LEARNER_GEOMETRY[config.learner]
    start = time.perf_counter()
    if config.learner == "es":
        es_cfg = ESConfig(m=config.params.get("m", 500), nu=config.params.get("nu", 1e-3), seed=seed)
        trace = run_es_online(
            cmdp, stream, geometry, config.T, es_cfg,
            alpha0=config.params.get("alpha0", 0.1), decay=config.params.get("decay", 0.95),
            accept_window=config.params.get("accept_window"), eval_every=config.eval_every, evaluator=evaluator, planner=planner,
        )
    else:
        trace = run_mda(cmdp, stream, geometry, config.T, config.eval_every, evaluator, planner=planner)
    rows = [_row(r["step"], seed, r["step"], r, start, config.record_wall_ms) for r in trace.records if "rel_value" in r]
    return rows, trace.W_avg if config.learner != "es" else trace.W_last


def ellipsoid_protocol(config, cmdp, seed, evaluator, planner):
    """Demonstrations revealed only on eps-suboptimal rounds; one row per cut."""
    contexts = train_contexts(cmdp, seed, config.T)
    start = time.perf_counter()
    trace = run_ellipsoid(
        cmdp, cmdp.w_star, contexts, config.eps, patience=config.params.get("patience"),
        evaluator=lambda W: evaluator(W)["rel_value"], cfg=planner, record_rounds=False,
    )
    rows = [_row(0, seed, 0, evaluator(np.zeros((cmdp.d, cmdp.k))), start, config.record_wall_ms)]
    for i, r in enumerate(trace.rows, start=1):
        rows.append(_row(r["round"], seed, i, {"rel_value": r["holdout_rel_value"]}, start, config.record_wall_ms))
    return rows, trace.state.center.reshape(cmdp.d, cmdp.k)


def framework_descent_protocol(cmdp, w_star, contexts, eps, evaluator, planner, alpha0=0.3, outer_decay=0.94, epochs=40):
    """Subgradient descent inside the ellipsoid protocol.

    A demonstration is revealed only when the current mapping is more than
    ``eps`` suboptimal at the streamed context; after each reveal the mapping
    is refit for ``epochs`` full-batch epochs over all revealed
    demonstrations.  Returns ``[(n_demos, metrics), ...]`` after every reveal.
    """
    expert = Expert(cmdp, w_star, planner)
    W = np.zeros((cmdp.d, cmdp.k))
    revealed, history = [], [(0, evaluator(W))]
    alpha = alpha0
    for c in contexts:
        policies, _ = plan_contexts(cmdp, W, c, planner)
        mu_agent = policy_feature_expectations(cmdp, policies, c)[0]
        demo = expert.demonstrate(c)
        if (c @ w_star) @ (demo.mu - mu_agent) <= eps:
            continue
        revealed.append(demo)
        if not np.any(W):
            W = np.reshape(outer_flatten(c, demo.mu - mu_agent), W.shape)
            W = W / np.linalg.norm(W)
        W, _ = fit_revealed(cmdp, revealed, W, alpha, epochs, planner=planner)
        alpha *= outer_decay
        history.append((len(revealed), evaluator(W)))
    return history


def batch_ellipsoid_protocol(config, cmdp, seed, evaluator, planner):
    params = config.params
    if params.get("theory", True):
        bcfg = BatchConfig.theory(cmdp.d, cmdp.k, cmdp.gamma, config.eps, params.get("delta", 0.1))
    else:
        bcfg = BatchConfig(config.eps, params.get("delta", 0.1), params["H"], params["n"])
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    trace = run_batch_ellipsoid(
        cmdp, cmdp.w_star, lambda r, n: sample_context(r, cmdp.d, n), bcfg, rng,
        max_rounds=params.get("max_rounds", 10**6), max_cuts=params.get("max_cuts"), planner=planner,
        evaluator=lambda W: evaluator(W)["rel_value"],
    )
    rows = [
        _row(r["round"], seed, r["suboptimal_count"], {"rel_value": r["holdout_rel_value"]}, start, config.record_wall_ms)
        for r in trace.rows
    ]
    return rows, trace.state.center.reshape(cmdp.d, cmdp.k)


def apprenticeship_protocol(config, cmdp, seed, evaluator, planner):
    """AL (projection) or MWAL on the stacked MDP of ``n_train`` training contexts.

    ``rel_value`` is measured on the training contexts, where the stacked
    policy is defined; rows are emitted every ``eval_every`` iterations.
    """
    contexts = train_contexts(cmdp, seed, config.n_train)
    large = build_large_mdp(cmdp, contexts)
    expert_pols = Expert(cmdp, cmdp.w_star, planner).policies(contexts)
    mu_E = large_feature_expectations(large, expert_pols.ravel())
    train_eval = Evaluator(cmdp, cmdp.w_star, contexts, planner)
    start = time.perf_counter()
    if config.learner == "al-large":
        result = al_projection(large, mu_E, config.T, cfg=planner)
        mixture = result.mixture
    else:
        mixture = mwal(large, mu_E, config.T, cfg=planner).mixture
    rows = []
    values = []
    for pol in mixture.policies:
        values.append(train_eval.policy_scores(large.split_policy(pol))["values"])
    for t in range(config.eval_every, len(mixture.policies) + 1, config.eval_every):
        w = mixture.weights[:t] / mixture.weights[:t].sum() if config.learner == "mwal" else None
        if w is None:
            w = np.full(t, 1.0 / t)
        v = np.asarray(w) @ np.stack(values[:t])
        rel = (v - train_eval.v_rand) / (train_eval.v_star - train_eval.v_rand)
        rows.append(_row(t, seed, config.n_train, {"rel_value": float(np.clip(rel, 0, 1).mean())}, start, config.record_wall_ms))
    return rows, None


def bc_protocol(config, cmdp, seed, evaluator, planner):
    dataset = offline_dataset(cmdp, cmdp.w_star, config.n_train, seed, config.horizon, planner)
    model = bc_train(
        dataset["contexts"], dataset["states"], dataset["actions"], cmdp.features, cmdp.n_actions,
        epochs=config.epochs, kind=config.params.get("kind", "tabular"), seed=seed,
    )
    policies = np.stack([bc_policy(model, c, cmdp.features) for c in evaluator.contexts])
    scores = evaluator.policy_scores(policies)
    return [MetricsRow(config.epochs, seed, config.n_train, None, scores["rel_value"], scores["accuracy"], None)], None


def offline_dataset(cmdp, w_star, n_train, seed, horizon, planner):
    """``n_train`` contexts, one fixed-horizon expert trajectory each."""
    contexts = train_contexts(cmdp, seed, n_train)
    expert = Expert(cmdp, w_star, planner)
    scheme = SamplingScheme("fixed", horizon=horizon)
    demos = [expert.demonstrate(c, scheme, context_rng(seed, i)) for i, c in enumerate(contexts)]
    ctx_rows, states, actions = [], [], []
    for demo in demos:
        traj = demo.trajectory
        for s, a in zip(traj.states, traj.actions):
            ctx_rows.append(demo.context)
            states.append(s)
            actions.append(a)
    return {
        "demos": demos,
        "contexts": np.array(ctx_rows),
        "states": np.array(states, dtype=int),
        "actions": np.array(actions, dtype=int),
    }


def dataset_accuracy_of_mapping(cmdp, W, dataset, planner):
    """Fraction of recorded expert actions the mapping's optimal policies reproduce."""
    demos = dataset["demos"]
    contexts = np.stack([d.context for d in demos])
    policies, _ = plan_contexts(cmdp, W, contexts, planner)
    hits = total = 0
    for pol, demo in zip(policies, demos):
        traj = demo.trajectory
        for s, a in zip(traj.states, traj.actions):
            hits += int(pol[s] == a)
            total += 1
    return hits / max(total, 1)


def coirl_offline(cmdp, dataset, seed, planner, iterations=60, batch_size=10, alpha0=0.25, decay=0.95, geometry="ball"):
    """Mini-batch descent on a fixed set of trajectory demonstrations."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    trace = run_minibatch(cmdp, dataset["demos"], geometry, iterations, batch_size, rng, alpha0, decay, planner=planner)
    return trace.W_last


def bc_offline(cmdp, dataset, seed, epochs=200, kind="tabular", lr=0.5):
    return bc_train(
        dataset["contexts"], dataset["states"], dataset["actions"], cmdp.features, cmdp.n_actions,
        epochs=epochs, lr=lr, kind=kind, seed=seed,
    )


def bc_train_accuracy(model, dataset, cmdp):
    return bc_accuracy(model, dataset["contexts"], dataset["states"], dataset["actions"], cmdp.features)


PROTOCOLS = {
    "psgd": online_protocol,
    "ew": online_protocol,
    "es": online_protocol,
    "ellipsoid": ellipsoid_protocol,
    "batch-ellipsoid": batch_ellipsoid_protocol,
    "al-large": apprenticeship_protocol,
    "mwal": apprenticeship_protocol,
    "bc": bc_protocol,
}


# ---------------------------------------------------------------------------
# Output


def write_metrics(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row.as_list()])


def aggregate_rows(per_seed):
    """Mean and std per checkpoint step across seeds that reached it."""
    by_step = {}
    for rows in per_seed:
        for r in rows:
            by_step.setdefault(r.step, []).append(r)
    out = []
    for step in sorted(by_step):
        group = by_step[step]
        entry = {"step": step, "n_seeds": len(group)}
        for col in ("n_demos", "loss", "rel_value", "accuracy"):
            vals = np.array([getattr(r, col) for r in group if getattr(r, col) is not None], dtype=float)
            entry[f"{col}_mean"] = float(vals.mean()) if vals.size else None
            entry[f"{col}_std"] = float(vals.std()) if vals.size else None
        out.append(entry)
    return out


def write_aggregate(entries, path):
    cols = ["step", "n_seeds"] + [f"{c}_{s}" for c in ("n_demos", "loss", "rel_value", "accuracy") for s in ("mean", "std")]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for e in entries:
            writer.writerow(["" if e[c] is None else repr(e[c]) if isinstance(e[c], float) else e[c] for c in cols])


def save_mapping(W, path):
    Path(path).write_text(json.dumps({"W": np.asarray(W, dtype=float).tolist()}) + "\n")


def load_mapping(path):
    try:
        W = np.asarray(json.loads(Path(path).read_text())["W"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: not a mapping document ({exc})") from exc
    if W.ndim != 2:
        raise SchemaError(f"{path}: mapping must be a 2-D array")
    return W


def bench_irl(cmdp, sizes, iterations=20, seed=0, planner=PlannerConfig()):
    """Median per-iteration wall time of AL on the stacked MDP and of one COIRL step.

    For each context-set size, AL runs ``iterations`` projection iterations on
    the stacked MDP of that many contexts, and COIRL takes ``iterations``
    subgradient steps drawing demonstrations from the same contexts.
    Returns rows ``{"n_contexts", "al_ms", "coirl_ms"}`` (medians).
    """
    out = []
    for size in sizes:
        contexts = train_contexts(cmdp, seed, size)
        expert = Expert(cmdp, cmdp.w_star, planner)
        large = build_large_mdp(cmdp, contexts)
        mu_E = large_feature_expectations(large, expert.policies(contexts).ravel())
        al = al_projection(large, mu_E, iterations, tol=0.0, cfg=planner)
        demos = [expert.demonstrate(c) for c in contexts]
        W = np.zeros((cmdp.d, cmdp.k))
        subgradient(cmdp, W, demos[0], planner)  # warm-up, untimed
        times = []
        for t in range(iterations):
            start = time.perf_counter()
            g = subgradient(cmdp, W, demos[t % size], planner)
            W = W - 0.1 * g
            times.append(time.perf_counter() - start)
        out.append({
            "n_contexts": int(size),
            "al_ms": 1000.0 * float(np.median(al.iteration_seconds)) if al.iteration_seconds else 0.0,
            "coirl_ms": 1000.0 * float(np.median(times)),
        })
    return out


def run_experiment(config):
    """Run every seed, write ``seed_<s>.csv``, ``aggregate.csv`` and ``manifest.json``.

    A seed that raises a library error is recorded in the manifest and the
    remaining seeds still run.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmdp = build_environment(config)
    planner = planner_for(config)
    holdout = holdout_contexts(cmdp, config.resolved_holdout())
    evaluator = Evaluator(cmdp, cmdp.w_star, holdout, planner)
    protocol = PROTOCOLS[config.learner]
    per_seed, diagnostics, files = [], {}, []
    for seed in config.seeds:
        try:
            rows, W = protocol(config, cmdp, seed, evaluator, planner)
        except COIRLError as exc:
            log.error("seed %d failed: %s", seed, exc)
            diagnostics[str(seed)] = f"{type(exc).__name__}: {exc}"
            continue
        path = out / f"seed_{seed}.csv"
        write_metrics(rows, path)
        files.append(path.name)
        per_seed.append(rows)
        if W is not None:
            save_mapping(W, out / f"W_seed_{seed}.json")
    write_aggregate(aggregate_rows(per_seed), out / "aggregate.csv")
    manifest = {
        "config": config.to_dict(),
        "config_sha256": config.digest(),
        "code_version": coirl.__version__,
        "resolved": {
            "planner_tol": planner.tol,
            "holdout_size": len(holdout),
            "holdout_seed": HOLDOUT_SEED,
            "geometry": LEARNER_GEOMETRY.get(config.learner),
            "normalization": NORMALIZATION_NOTE,
            "accuracy_weighting": "expert discounted occupancy",
        },
        "files": files,
        "diagnostics": diagnostics,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
