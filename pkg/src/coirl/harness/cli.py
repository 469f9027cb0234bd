"""Command-line entry point: ``coirl <subcommand> ...``.

Exit codes: 0 on success, 2 on a validation error, 3 on a numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from coirl.cmdp import load_cmdp, save_cmdp
from coirl.environments import sample_context
from coirl.errors import COIRLError, DegenerateCut, DegenerateStep, NonConvergence, NumericalFailure
from coirl.harness.experiment import (
    ExperimentConfig,
    bench_irl,
    build_environment,
    holdout_contexts,
    load_mapping,
    planner_for,
    run_experiment,
    seed_override,
)
from coirl.harness.metrics import Evaluator
from coirl.harness.plots import emit_plot
from coirl.transfer import bound_inputs, build_library, gpi_bound, gpi_policy, nearest_transfer

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (NonConvergence, NumericalFailure, DegenerateStep, DegenerateCut)


def _config_from_args(args):
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("env", "learner", "T", "out_dir"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    if args.seeds:
        doc["seeds"] = args.seeds
    return seed_override(ExperimentConfig.from_dict(doc))


def cmd_gen_env(args):
    cfg = ExperimentConfig(env=args.preset, w_preset=args.w_preset)
    cmdp = build_environment(cfg)
    save_cmdp(cmdp, args.out, sparse=args.sparse)
    print(f"wrote {cmdp.name}: {cmdp.n_states} states, {cmdp.n_actions} actions, d={cmdp.d}, k={cmdp.k} -> {args.out}")


def cmd_train(args):
    config = _config_from_args(args)
    out = run_experiment(config)
    print(f"results in {out}")


def cmd_eval(args):
    cfg = ExperimentConfig(env=args.preset, w_preset=args.w_preset, holdout=args.holdout)
    cmdp = load_cmdp(args.env_file) if args.env_file else build_environment(cfg)
    W = load_mapping(args.mapping)
    contexts = holdout_contexts(cmdp, cfg.resolved_holdout())
    metrics = Evaluator(cmdp, cmdp.w_star, contexts, planner_for(cfg))(W)
    print(json.dumps(metrics, indent=2, sort_keys=True))


def cmd_transfer(args):
    cfg = ExperimentConfig(env=args.preset, w_preset=args.w_preset)
    cmdp = build_environment(cfg)
    rng = np.random.default_rng(seed_override(dataclasses.replace(cfg, seeds=(args.seed,))).seeds[0])
    library = build_library(cmdp, cmdp.w_star, sample_context(rng, cmdp.d, args.library_size), planner_for(cfg))
    queries = sample_context(rng, cmdp.d, args.queries)
    evaluator = Evaluator(cmdp, cmdp.w_star, queries, planner_for(cfg))
    if cmdp.context_independent:
        policies = np.stack([gpi_policy(library, c) for c in queries])
        bounds = np.array([gpi_bound(library, c) for c in queries])
        method = "gpi"
    else:
        picked = [nearest_transfer(library, c) for c in queries]
        policies = np.stack([p for p, _, _ in picked])
        bounds = np.array([b for _, b, _ in picked])
        method = "nearest"
    scores = evaluator.policy_scores(policies)
    losses = evaluator.v_star - scores["values"]
    report = {
        "method": method,
        "library_size": len(library),
        "rel_value": scores["rel_value"],
        "max_value_loss": float(losses.max()),
        "mean_bound": float(bounds.mean()),
        "bound_holds": bool(np.all(losses <= bounds + 1e-6)),
        "v_max": bound_inputs(library).v_max,
    }
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_bench_irl(args):
    cfg = ExperimentConfig(env=args.preset)
    cmdp = build_environment(cfg)
    rows = bench_irl(cmdp, args.sizes, args.iterations, args.seed, planner_for(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["n_contexts", "al_ms", "coirl_ms"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(f"|C|={r['n_contexts']:4d}  AL {r['al_ms']:9.2f} ms/iter  COIRL {r['coirl_ms']:9.2f} ms/iter")


def cmd_plot(args):
    path = emit_plot(args.csv, args.out, metric=args.metric, title=args.title)
    print(f"wrote {path}")


def build_parser():
    parser = argparse.ArgumentParser(prog="coirl", description="Contextual inverse reinforcement learning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def env_args(p):
        p.add_argument("--preset", default="grid:3x4", help="grid:NxM, driving, or synth:S,A,d,k,seed")
        p.add_argument("--w-preset", default="online", choices=("online", "ellipsoid"), help="driving reward mapping")

    p = sub.add_parser("gen-env", help="write a preset CMDP to JSON")
    env_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--sparse", action="store_true", help="store kernels as sparse triplets")
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("train", help="run an experiment config")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--env")
    p.add_argument("--learner")
    p.add_argument("--T", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a learned mapping on the holdout")
    env_args(p)
    p.add_argument("--env-file", help="CMDP JSON (overrides --preset)")
    p.add_argument("--mapping", required=True, help='JSON document {"W": [[...]]}')
    p.add_argument("--holdout", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="zero-shot transfer from a policy library")
    env_args(p)
    p.add_argument("--library-size", type=int, default=20)
    p.add_argument("--queries", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("bench-irl", help="per-iteration runtime of AL on the stacked MDP vs COIRL")
    p.add_argument("--preset", default="grid:3x4")
    p.add_argument("--sizes", type=int, nargs="+", default=[2, 4, 8, 16, 32])
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench_irl.csv")
    p.set_defaults(func=cmd_bench_irl)

    p = sub.add_parser("plot", help="render metrics CSVs to SVG")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="rel_value", choices=("loss", "rel_value", "accuracy"))
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (COIRLError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
