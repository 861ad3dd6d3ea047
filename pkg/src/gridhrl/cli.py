"""Command line entry point: ``gridhrl train|eval|verify|export-curves|z-dump``.

Exit codes: 0 ok, 1 property or run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from .config import PRESETS, ExperimentConfig, load_config, parse_pairs, preset
from .envs import ConfigError
from .nn import CheckpointVersionError

OUTPUT_ROOT_ENV = "GRIDHRL_OUTPUT_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _resolve_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise UsageError("use either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config, args.overrides)
    else:
        cfg = parse_pairs(args.overrides, preset(args.preset) if args.preset else None)
    cfg.validate()
    return cfg


def _output_root(cfg: ExperimentConfig, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / cfg.output_dir if root else Path(cfg.output_dir)


def cmd_train(args) -> int:
    from .train import train_run

    cfg = _resolve_config(args)
    root = _output_root(cfg, args.out)
    summaries = []
    for seed in cfg.seed_list:
        out = root / f"{cfg.env}-{cfg.mode}-{cfg.method}" / f"seed{seed}"

        def progress(row, seed=seed):
            if not args.quiet:
                print(f"seed {seed} update {row['update_idx']} steps {row['env_steps']} "
                      f"score {row['mean_episode_score']:.3f}", flush=True)

        res = train_run(cfg, seed, out, progress=progress)
        summaries.append(res.summary)
        print(json.dumps({"seed": seed, "out": str(out), **_clean(res.summary)}, sort_keys=True))
    scores = np.array([s["converged_score"] for s in summaries], dtype=np.float64)
    steps = np.array([s["converged_steps"] for s in summaries], dtype=np.float64)
    agg = {
        "method": cfg.method,
        "env": cfg.env,
        "mode": cfg.mode,
        "seeds": cfg.seed_list,
        "score_mean": float(np.mean(scores)),
        "score_std": float(np.std(scores)),
        "steps_mean": float(np.mean(steps)),
        "steps_std": float(np.std(steps)),
    }
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"{cfg.env}-{cfg.mode}-{cfg.method}" / "summary.json"
    path.write_text(json.dumps(_clean(agg), indent=2, sort_keys=True))
    print(f"{cfg.method}: score {agg['score_mean']:.4f} ± {agg['score_std']:.4f}, "
          f"steps {agg['steps_mean']:.1f} ± {agg['steps_std']:.1f} over {len(scores)} seed(s)")
    return EXIT_OK


def eval_summary(results: list[dict]) -> dict:
    if not results:
        return {"n_episodes": 0, "score_mean": None, "score_std": None, "steps_mean": None, "steps_std": None}
    s = np.array([r["score"] for r in results], dtype=np.float64)
    t = np.array([r["steps"] for r in results], dtype=np.float64)
    return {
        "n_episodes": len(results),
        "score_mean": float(s.mean()),
        "score_std": float(s.std()),
        "steps_mean": float(t.mean()),
        "steps_std": float(t.std()),
    }


def cmd_eval(args) -> int:
    from .train import evaluate, load_agent

    agent, cfg, meta = load_agent(args.checkpoint)
    seed = meta.get("seed", 0) if args.seed is None else args.seed
    summary = eval_summary(evaluate(agent, seed, args.episodes))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    results = run_suite(fault=args.inject_fault, quick=args.quick)
    failed = False
    for r in results:
        print(r.line())
        for f in r.failures[:3]:
            dump = f.get("mdp") if isinstance(f, dict) else None
            info = {k: v for k, v in f.items() if k != "mdp"} if isinstance(f, dict) else f
            print(f"    counterexample: {info}")
            if dump:
                print("    " + dump.replace("\n", "\n    "))
        failed |= not r.passed
    print(f"{sum(r.passed for r in results)}/{len(results)} properties passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_export_curves(args) -> int:
    from .curves import export_curves

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        scores, steps = export_curves(args.runs, args.out, smooth=10 if args.smooth else 0)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"wrote {scores} and {steps}")
    return EXIT_OK


def cmd_z_dump(args) -> int:
    from .train import Worker, _decide, load_agent, stream_rng, EVAL_STREAM

    agent, cfg, meta = load_agent(args.checkpoint)
    if agent.abstraction is None:
        raise UsageError("z-dump needs a checkpoint trained with method=dchrl-sa")
    seed = meta.get("seed", 0) if args.seed is None else args.seed
    rng = stream_rng(seed, EVAL_STREAM)
    dim = cfg.dim_z
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["state_id", "episode", "decision", "agent_row", "agent_col"] + [f"z{i}" for i in range(dim)])
        for ep in range(args.episodes):
            worker = Worker(agent, seed, EVAL_STREAM, ep)
            worker.reset(ep)
            decision, done = 0, False
            while not done:
                _, stored, _, _, actions, _, _ = _decide(agent, [worker], rng, greedy=True)
                r, c = worker.env.state.agent_pos
                w.writerow([f"{ep}:{decision}", ep, decision, r, c] + [repr(float(v)) for v in stored[0]])
                _, _, done, _ = worker.act(int(actions[0]))
                decision += 1
    print(f"wrote {args.out}")
    return EXIT_OK


def _clean(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and v != v else v) for k, v in d.items()}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridhrl", description="Hierarchical RL with state abstraction on grid worlds")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one or more seeds")
    t.add_argument("--config", help="key=value config file (may start with preset=<name>)")
    t.add_argument("--preset", help=f"start from a preset: {', '.join(sorted(PRESETS))}")
    t.add_argument("--out", help=f"output root (default ${OUTPUT_ROOT_ENV}/output_dir or output_dir)")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the oracle property suite")
    v.add_argument("--inject-fault", choices=["missing-up"], default=None)
    v.add_argument("--quick", action="store_true", help="fewer planner windows and gradient points")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("export-curves", help="merge eval logs into mean/std curves")
    c.add_argument("runs", help="directory searched recursively for runs")
    c.add_argument("--out", default="curves.csv")
    c.add_argument("--smooth", action="store_true", help="trailing mean over 10 points")
    c.set_defaults(func=cmd_export_curves)

    z = sub.add_parser("z-dump", help="write abstract states visited by the greedy policy")
    z.add_argument("checkpoint")
    z.add_argument("--out", default="z.csv")
    z.add_argument("--episodes", type=int, default=1)
    z.add_argument("--seed", type=int, default=None)
    z.set_defaults(func=cmd_z_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
