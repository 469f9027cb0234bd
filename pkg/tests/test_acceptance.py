"""End-to-end acceptance suite.

Each test prints one ``[PASS]`` or ``[FAIL]`` line (visible with ``pytest -s``
or in the ``-v`` log via the captured stdout of failures) and then asserts.
The slow ones are marked ``acceptance``; deselect with ``-m "not acceptance"``.
"""

import math
import time

import numpy as np
import pytest

from coirl.cmdp import ContextualMDP, instantiate
from coirl.descent import run_es_online, run_mda, theory_constants
from coirl.ellipsoid import BatchConfig, cut_bound, run_batch_ellipsoid, run_ellipsoid, volume_ratio_bound
from coirl.environments import (
    GridWorldSpec,
    SyntheticCMDPSpec,
    make_gridworld,
    make_preset,
    make_random_cmdp,
    sample_context,
    sample_mapping,
)
from coirl.expert import (
    Expert,
    SamplingScheme,
    demo_stream,
    fixed_horizon,
    fixed_horizon_bias_bound,
    rollout_estimates,
)
from coirl.harness.experiment import (
    ExperimentConfig,
    bc_offline,
    bc_train_accuracy,
    bench_irl,
    build_environment,
    coirl_offline,
    dataset_accuracy_of_mapping,
    framework_descent_protocol,
    holdout_contexts,
    offline_dataset,
    planner_for,
    train_contexts,
)
from coirl.harness.metrics import Evaluator
from coirl.loss import ESConfig, coirl_loss, es_estimate, evaluate_loss, losses_many, subgradient
from coirl.planner import PlannerConfig, policy_evaluation, state_feature_expectations
from coirl.transfer import bound_inputs, build_library, gpi_bound, gpi_policy, nearest_transfer
from coirl.baselines import bc_policy

pytestmark = pytest.mark.acceptance

TIGHT = PlannerConfig(tol=1e-10)
SEEDS = range(5)


def report(number, name, ok, detail, elapsed=None):
    timing = "" if elapsed is None else f" ({elapsed:.1f}s)"
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}{timing}", flush=True)
    return ok


def exact_demos(cmdp, contexts, cfg=TIGHT):
    expert = Expert(cmdp, cfg=cfg)
    return [expert.demonstrate(c) for c in contexts]


# ---------------------------------------------------------------------------
# 1. loss is zero at the truth and never negative


def test_criterion_1_loss_zero_and_nonnegative():
    start = time.perf_counter()
    cmdp = make_gridworld(GridWorldSpec(3, 4))
    rng = np.random.default_rng(101)
    demos = exact_demos(cmdp, sample_context(rng, cmdp.d, 30))
    at_truth = coirl_loss(cmdp, cmdp.w_star, demos, TIGHT).value
    worst = math.inf
    for geometry in ("ball", "simplex", "box"):
        Ws = np.stack([sample_mapping(rng, cmdp.d, cmdp.k, geometry) for _ in range(100)])
        worst = min(worst, float(losses_many(cmdp, Ws, demos, TIGHT).min()))
    elapsed = time.perf_counter() - start
    ok = at_truth <= 1e-8 and worst >= -1e-10 and elapsed < 60
    assert report(1, "loss zero at W* and nonnegative", ok, f"L(W*)={at_truth:.2e}, min L={worst:.3e}", elapsed)


# ---------------------------------------------------------------------------
# 2. subgradient inequality, norm bounds and convexity


def test_criterion_2_subgradient_properties():
    start = time.perf_counter()
    cmdp = make_gridworld(GridWorldSpec(3, 4))
    rng = np.random.default_rng(202)
    demos = exact_demos(cmdp, sample_context(rng, cmdp.d, 10))
    d, k, g_ = cmdp.d, cmdp.k, cmdp.gamma
    ineq_gap = math.inf
    for _ in range(50):
        W, W2 = (sample_mapping(rng, d, k, "ball") for _ in range(2))
        rep, g = evaluate_loss(cmdp, W, demos, TIGHT)
        L2 = coirl_loss(cmdp, W2, demos, TIGHT).value
        ineq_gap = min(ineq_gap, L2 - (rep.value + np.sum(g * (W2 - W))))
    inf_max = l2_max = 0.0
    for _ in range(1000):
        W = sample_mapping(rng, d, k, "box")
        c = sample_context(rng, d)
        g = subgradient(cmdp, W, exact_demos(cmdp, [c])[0], TIGHT)
        inf_max, l2_max = max(inf_max, np.abs(g).max()), max(l2_max, np.linalg.norm(g))
    convex_gap = math.inf
    for _ in range(100):
        W, W2 = (sample_mapping(rng, d, k, "ball") for _ in range(2))
        lam = rng.random()
        Ws = np.stack([W, W2, lam * W + (1 - lam) * W2])
        L = losses_many(cmdp, Ws, demos, TIGHT)
        convex_gap = min(convex_gap, lam * L[0] + (1 - lam) * L[1] - L[2])
    elapsed = time.perf_counter() - start
    inf_bound, l2_bound = 2 / (1 - g_), 2 * math.sqrt(d * k) / (1 - g_)
    ok = ineq_gap >= -1e-8 and inf_max <= inf_bound and l2_max <= l2_bound and convex_gap >= -1e-8 and elapsed < 120
    detail = (
        f"min ineq slack={ineq_gap:.2e}, max|g|inf={inf_max:.2f}<={inf_bound:.2f}, "
        f"max|g|2={l2_max:.2f}<={l2_bound:.2f}, min convexity slack={convex_gap:.2e}"
    )
    assert report(2, "subgradient inequality, norms, convexity", ok, detail, elapsed)


# ---------------------------------------------------------------------------
# 3. averaged-iterate guarantee of PSGD and EW


def test_criterion_3_mirror_descent_bound():
    start = time.perf_counter()
    cmdp = make_gridworld(GridWorldSpec(2, 2))
    T = 500
    rng = np.random.default_rng(303)
    eval_demos = exact_demos(cmdp, sample_context(rng, cmdp.d, 200))
    expert = Expert(cmdp, cfg=TIGHT)
    worst = -math.inf
    for geometry in ("ball", "simplex"):
        consts = theory_constants(cmdp.d, cmdp.k, cmdp.gamma, geometry)
        search = np.stack([sample_mapping(rng, cmdp.d, cmdp.k, geometry) for _ in range(4000)])
        floor = float(losses_many(cmdp, search, eval_demos, TIGHT).min())
        for seed in SEEDS:
            contexts = sample_context(np.random.default_rng(seed), cmdp.d, T)
            stream = demo_stream(expert, contexts, SamplingScheme("exact"), seed)
            evaluator = lambda W: {"loss": coirl_loss(cmdp, W, eval_demos, TIGHT).value}
            trace = run_mda(cmdp, stream, geometry, T, eval_every=50, evaluator=evaluator, planner=TIGHT)
            for r in trace.checkpoints():
                worst = max(worst, r["loss"] - floor - consts.bound(r["step"]))
    elapsed = time.perf_counter() - start
    ok = worst <= 0 and elapsed < 600
    assert report(3, "PSGD/EW averaged loss within bound", ok, f"max (L - floor - bound) = {worst:.3f}", elapsed)


# ---------------------------------------------------------------------------
# 4. ellipsoid learner on the driving environment


def test_criterion_4_ellipsoid_driving():
    start = time.perf_counter()
    cfg = ExperimentConfig(env="driving", learner="ellipsoid", w_preset="ellipsoid")
    cmdp = build_environment(cfg)
    planner = planner_for(cfg)
    eps = 0.1
    W_true = cmdp.w_star
    trace = run_ellipsoid(cmdp, W_true, train_contexts(cmdp, 0, 5000), eps, patience=2000, cfg=planner, record_rounds=False)
    dk = cmdp.d * cmdp.k
    bound = cut_bound(cmdp.d, cmdp.k, cmdp.gamma, eps)
    ratio_ok = all(r <= volume_ratio_bound(dk) + 1e-9 for r in trace.volume_ratios)
    member_ok = all(m <= 1 + 1e-7 for m in trace.membership)
    holdout = holdout_contexts(cmdp, 80)
    W = trace.state.center.reshape(cmdp.d, cmdp.k)
    ev = Evaluator(cmdp, W_true, holdout, planner)
    values = ev.policy_scores(Expert(cmdp, W, planner).policies(holdout))["values"]
    worst_gap = float((ev.v_star - values).max())
    elapsed = time.perf_counter() - start
    ok = trace.n_cuts <= bound and ratio_ok and member_ok and worst_gap <= eps and elapsed < 900
    detail = (
        f"cuts={trace.n_cuts}<={bound:.0f}, ratios ok={ratio_ok}, membership ok={member_ok}, "
        f"max holdout gap={worst_gap:.4f}<={eps}"
    )
    assert report(4, "ellipsoid on driving", ok, detail, elapsed)


# ---------------------------------------------------------------------------
# 5. batch ellipsoid with near-optimal experts and theory batch sizes


def four_state_cmdp():
    """Two base kernels over four states; action ``a`` heads to state ``a`` or ``a + 1``."""
    S = A = 4
    P = np.full((2, S, A, S), 0.1 / 3)
    for a in range(A):
        P[0, :, a, a] = 0.9
        P[1, :, a, (a + 1) % S] = 0.9
    phi = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    W = np.array([[-0.9, 0.3], [0.2, -0.8]])
    return ContextualMDP(P, phi, np.full(S, 0.25), 0.5, w_star=W, geometry="box", name="four-state")


def test_criterion_5_batch_ellipsoid_theory():
    start = time.perf_counter()
    cmdp = four_state_cmdp()
    bcfg = BatchConfig.theory(cmdp.d, cmdp.k, cmdp.gamma, 0.5, 0.1)
    bound = bcfg.round_bound(cmdp.d, cmdp.k, cmdp.gamma)
    results = []
    for seed in SEEDS:
        trace = run_batch_ellipsoid(
            cmdp, cmdp.w_star, lambda r, n: sample_context(r, cmdp.d, n), bcfg, np.random.default_rng(seed),
            max_rounds=1_500_000, planner=TIGHT, chunk=50_000,
        )
        kept = all(m <= 1 + 1e-7 for m in trace.membership) and all(m >= 0 for m in trace.cut_margins)
        results.append((trace.suboptimal_rounds <= bound and kept, trace.suboptimal_rounds, trace.n_cuts))
    elapsed = time.perf_counter() - start
    passed = sum(r[0] for r in results)
    ok = passed == 5 and all(r[2] >= 1 for r in results) and elapsed < 1200
    detail = (
        f"H={bcfg.H}, n={bcfg.n}, {passed}/5 seeds within {bound:.3g} suboptimal rounds "
        f"(observed {[r[1] for r in results]}, cuts {[r[2] for r in results]}), W* kept"
    )
    assert report(5, "batch ellipsoid suboptimal rounds", ok, detail, elapsed)


# ---------------------------------------------------------------------------
# 6. online convergence on driving and sample efficiency vs the ellipsoid


def first_reach(pairs, target=0.95):
    return next((n for n, rel in pairs if rel >= target), None)


def test_criterion_6_online_driving():
    start = time.perf_counter()
    cfg = ExperimentConfig(env="driving")
    cmdp = build_environment(cfg)
    planner = planner_for(cfg)
    evaluator = Evaluator(cmdp, cmdp.w_star, holdout_contexts(cmdp, 80), planner)
    expert = Expert(cmdp, cmdp.w_star, planner)
    scheme = fixed_horizon(horizon=40)
    reached = {"psgd": [], "ew": [], "es": []}
    for seed in SEEDS:
        contexts = train_contexts(cmdp, seed, 200)
        for method, geometry in (("psgd", "ball"), ("ew", "simplex")):
            trace = run_mda(cmdp, demo_stream(expert, contexts, scheme, seed), geometry, 200, 10, evaluator, planner=planner)
            reached[method].append(first_reach((r["step"], r["rel_value"]) for r in trace.records if "rel_value" in r))
        trace = run_es_online(
            cmdp, demo_stream(expert, contexts, scheme, seed), "ball", 200, ESConfig(m=500, seed=seed),
            eval_every=10, evaluator=evaluator, planner=planner,
        )
        reached["es"].append(first_reach((r["step"], r["rel_value"]) for r in trace.records if "rel_value" in r))
    online_ok = all(n is not None for runs in reached.values() for n in runs)

    ecfg = ExperimentConfig(env="driving", learner="ellipsoid", w_preset="ellipsoid")
    ecmdp = build_environment(ecfg)
    eplanner = planner_for(ecfg)
    eevaluator = Evaluator(ecmdp, ecmdp.w_star, holdout_contexts(ecmdp, 80), eplanner)
    wins, counts = 0, []
    for seed in SEEDS:
        contexts = train_contexts(ecmdp, seed, 400)
        trace = run_ellipsoid(
            ecmdp, ecmdp.w_star, contexts, 0.1, evaluator=lambda W: eevaluator(W)["rel_value"],
            cfg=eplanner, record_rounds=False,
        )
        ell = first_reach((i, r["holdout_rel_value"]) for i, r in enumerate((r for r in trace.rows if r["cut_applied"]), 1))
        history = framework_descent_protocol(ecmdp, ecmdp.w_star, contexts, 0.1, eevaluator, eplanner)
        desc = first_reach((n, m["rel_value"]) for n, m in history)
        counts.append((desc, ell))
        wins += desc is not None and (ell is None or desc < ell)
    elapsed = time.perf_counter() - start
    ok = online_ok and wins >= 4
    detail = (
        f"demos to 0.95: psgd {reached['psgd']}, ew {reached['ew']}, es {reached['es']}; "
        f"descent vs ellipsoid reveals {counts}, descent fewer on {wins}/5"
    )
    assert report(6, "online convergence on driving", ok, detail, elapsed)


# ---------------------------------------------------------------------------
# 7. runtime trend of AL on the stacked MDP vs COIRL


def test_criterion_7_runtime_trend():
    start = time.perf_counter()
    cmdp = make_preset("grid:3x4")
    rows = bench_irl(cmdp, [2, 4, 8, 16, 32], iterations=20, seed=0, planner=PlannerConfig(tol=1e-4))
    al = [r["al_ms"] for r in rows]
    co = [r["coirl_ms"] for r in rows]
    al_ratio = al[-1] / al[0]
    co_spread = max(co) / min(co)
    elapsed = time.perf_counter() - start
    ok = al_ratio >= 5 and co_spread < 1.5
    detail = f"AL time ratio |C|=32 vs 2: {al_ratio:.1f}x; COIRL max/min over sweep: {co_spread:.2f}x"
    assert report(7, "AL vs COIRL per-iteration time", ok, detail, elapsed)


# ---------------------------------------------------------------------------
# 8. transfer bounds


def policy_value(cmdp, c, policy):
    mdp = instantiate(cmdp, c)
    return float(mdp.xi @ policy_evaluation(mdp, policy))


def test_criterion_8_transfer_bounds():
    start = time.perf_counter()
    grid = make_gridworld(GridWorldSpec(3, 4))
    rng = np.random.default_rng(808)
    gpi_fail = dom_fail = 0
    for _ in range(100):
        W = sample_mapping(rng, grid.d, grid.k, "ball")
        lib = build_library(grid, W, sample_context(rng, grid.d, int(rng.integers(1, 6))), TIGHT)
        c = sample_context(rng, grid.d)
        mdp = instantiate(grid, c)
        reward = mdp.features @ (c @ W)
        expert_pol = Expert(grid, W, TIGHT).policy(c)
        value = lambda pol: float(mdp.xi @ mdp.dynamics.solve_policy(pol, reward, mdp.gamma))
        v_gpi = value(gpi_policy(lib, c))
        gpi_fail += value(expert_pol) - v_gpi > gpi_bound(lib, c) + 1e-6
        dom_fail += v_gpi < max(value(e.policy) for e in lib.entries) - 1e-6
    ctx_fail = 0
    for i in range(100):
        cmdp = make_random_cmdp(SyntheticCMDPSpec(n_states=8, n_actions=3, d=3, k=3, seed=1000 + i))
        lib = build_library(cmdp, cmdp.w_star, sample_context(rng, 3, 4), TIGHT)
        c = sample_context(rng, 3)
        pol, bound, _ = nearest_transfer(lib, c)
        gap = policy_value(cmdp, c, Expert(cmdp, cfg=TIGHT).policy(c)) - policy_value(cmdp, c, pol)
        ctx_fail += gap > bound + 1e-6
    elapsed = time.perf_counter() - start
    ok = gpi_fail == 0 and dom_fail == 0 and ctx_fail == 0 and elapsed < 600
    detail = f"GPI bound violations {gpi_fail}/100, dominance violations {dom_fail}/100, contextual bound violations {ctx_fail}/100"
    assert report(8, "transfer bounds", ok, detail, elapsed)


# ---------------------------------------------------------------------------
# 9. offline COIRL vs behavioral cloning


def offline_scores(cmdp, n_train, seed, evaluator, planner):
    data = offline_dataset(cmdp, cmdp.w_star, n_train, seed, 40, planner)
    W = coirl_offline(cmdp, data, seed, planner)
    model = bc_offline(cmdp, data, seed)
    bc_pols = np.stack([bc_policy(model, c, cmdp.features) for c in evaluator.contexts])
    return {
        "coirl_rel": evaluator(W)["rel_value"],
        "bc_rel": evaluator.policy_scores(bc_pols)["rel_value"],
        "coirl_train_acc": dataset_accuracy_of_mapping(cmdp, W, data, planner),
        "bc_train_acc": bc_train_accuracy(model, data, cmdp),
    }


def test_criterion_9_offline_vs_bc():
    start = time.perf_counter()
    cfg = ExperimentConfig(env="synth:300,4,5,5,0", learner="bc")
    cmdp = build_environment(cfg)
    planner = planner_for(cfg)
    evaluator = Evaluator(cmdp, cmdp.w_star, holdout_contexts(cmdp, 300), planner)
    budgets = (25, 100, 500)
    scores = {n: [offline_scores(cmdp, n, seed, evaluator, planner) for seed in SEEDS] for n in budgets}
    mean = lambda n, key: float(np.mean([s[key] for s in scores[n]]))
    small_gap = mean(25, "coirl_rel") - mean(25, "bc_rel")
    large_gap = abs(mean(500, "coirl_rel") - mean(500, "bc_rel"))
    acc_ok = all(mean(n, "bc_train_acc") > mean(n, "coirl_train_acc") for n in budgets)
    elapsed = time.perf_counter() - start
    ok = small_gap >= 0.1 and acc_ok and large_gap < 0.05
    summary = ", ".join(
        f"n={n}: coirl {mean(n, 'coirl_rel'):.3f}/bc {mean(n, 'bc_rel'):.3f} rel, "
        f"train acc coirl {mean(n, 'coirl_train_acc'):.3f}/bc {mean(n, 'bc_train_acc'):.3f}"
        for n in budgets
    )
    detail = f"gap@25={small_gap:.3f}, gap@500={large_gap:.3f}, bc train acc higher={acc_ok}; {summary}"
    assert report(9, "offline COIRL vs BC", ok, detail, elapsed)


# ---------------------------------------------------------------------------
# 10. estimators


def random_instance(seed, S=6, A=3, k=3, gamma=0.85):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(S), size=(1, S, A))
    phi = rng.uniform(-1, 1, size=(S, k))
    return ContextualMDP(P, phi, rng.dirichlet(np.ones(S)), gamma, w_star=sample_mapping(rng, 1, k, "ball"))


def test_criterion_10_estimators():
    start = time.perf_counter()
    bias_ok = True
    H = 10
    for seed in range(20):
        cmdp = random_instance(seed)
        mdp = instantiate(cmdp, [1.0])
        pol = Expert(cmdp).policy([1.0])
        P = mdp.kernel[np.arange(mdp.n_states), pol]
        dist, truncated = mdp.xi.copy(), np.zeros(cmdp.k)
        for t in range(H + 1):
            truncated += cmdp.gamma**t * dist @ cmdp.features
            dist = dist @ P
        exact = mdp.xi @ state_feature_expectations(mdp, pol)
        bias_ok &= bool(np.abs(truncated - exact).max() <= fixed_horizon_bias_bound(cmdp.gamma, H) + 1e-12)
    cmdp = random_instance(99)
    mdp = instantiate(cmdp, [1.0])
    pol = Expert(cmdp).policy([1.0])
    draws = rollout_estimates(mdp, pol, SamplingScheme("geometric"), 100_000, np.random.default_rng(7))
    exact = mdp.xi @ state_feature_expectations(mdp, pol)
    z = np.abs(draws.mean(axis=0) - exact) / (draws.std(axis=0) / math.sqrt(len(draws)))
    unbiased_ok = bool(np.all(z <= 3))
    G = np.random.default_rng(11).normal(size=(4, 4))
    linear = lambda Ws: np.tensordot(Ws, G, axes=([1, 2], [0, 1]))
    g = es_estimate(linear, np.zeros((4, 4)), ESConfig(m=2000), np.random.default_rng(12))
    cosine = float(np.sum(g * G) / (np.linalg.norm(g) * np.linalg.norm(G)))
    elapsed = time.perf_counter() - start
    ok = bias_ok and unbiased_ok and cosine >= 0.9
    detail = f"fixed-horizon bias within bound={bias_ok}, geometric max z={z.max():.2f}, ES cosine={cosine:.3f}"
    assert report(10, "estimators", ok, detail, elapsed)
