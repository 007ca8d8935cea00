"""Command line entry point: ``transplant-rl <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, surgery
from .agent import AgentConfig
from .report import ReportError, report
from .surgery import TransplantSpec
from .training import EvalConfig


def _eval_args(p):
    p.add_argument("--eval-every", type=int, default=5000, help="environment steps between evaluations")
    p.add_argument("--eval-episodes", type=int, default=10)
    p.add_argument("--warmup", type=int, default=None, help="override warmup steps")


def _configs(args):
    agent = AgentConfig() if args.warmup is None else AgentConfig(warmup_steps=args.warmup)
    return agent, EvalConfig(interval=args.eval_every, episodes=args.eval_episodes)


def cmd_train_parent(args):
    agent_config, eval_config = _configs(args)
    ckpt, curve = harness.train_parent(args.env, args.steps, args.seed, args.out, agent_config, eval_config)
    record = harness.TrialRecord(harness.parent_trial_id(args.env), args.env, args.env, None, harness.SCRATCH, 0,
                                 args.seed, ckpt.metadata.get("config", {}), curve)
    curve_path = Path(args.out).with_suffix(".curve.csv")
    harness.write_curve_csv(curve_path, record.curve_rows())
    print(f"wrote {args.out} and {curve_path}; final eval {curve[-1].eval_return_mean:.3f}")


def cmd_transplant(args):
    parent = surgery.load(args.parent)
    child, mask = surgery.transplant(parent, TransplantSpec(args.k, args.mode, args.seed))
    rep = surgery.verify_transplant(parent, child, args.k)
    surgery.save(child, args.out, env=parent.metadata.get("env"), training_steps=0, seed=args.seed,
                 transplant={"k": args.k, "mode": args.mode, "parent_env": parent.metadata.get("env"),
                             "parent_hash": parent.architecture_hash, "frozen_layers": sorted(mask)})
    print(json.dumps({"out": str(args.out), "frozen_layers": sorted(mask), "verify": rep.to_dict()}, indent=1))
    return 0 if rep.passed or args.k == 0 else 1


def cmd_run_child(args):
    agent_config, eval_config = _configs(args)
    rec = harness.run_child(args.parent, args.env, args.k, args.mode, args.seed, args.steps, args.out_dir,
                            args.run, agent_config, eval_config)
    print(f"{rec.trial_id}: final eval {rec.curve[-1].eval_return_mean:.3f}")


def cmd_run_grid(args):
    grid = harness.ExperimentGrid.from_file(args.config)
    summary = harness.run_grid(grid, args.out_dir, args.workers)
    print(f"planned {len(summary['planned'])}, executed {len(summary['executed'])}, "
          f"skipped {len(summary['skipped'])}, failed {len(summary['failed'])}")
    return 1 if summary["failed"] else 0


def cmd_report(args):
    written = report(args.in_dir, args.out, figures=not args.no_figures)
    print(f"summary: {written['summary']}")
    print(f"curves: {written['curves']}")
    for env, path in written["plot_data"].items():
        print(f"plot data ({env}): {path}")
    for mode, path in written["figures"].items():
        print(f"figure ({mode}): {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transplant-rl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-parent", help="train a network from scratch and save it")
    p.add_argument("--env", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _eval_args(p)
    p.set_defaults(func=cmd_train_parent)

    p = sub.add_parser("transplant", help="build a child checkpoint from a parent")
    p.add_argument("--parent", required=True)
    p.add_argument("--k", type=int, required=True, choices=range(0, 6), metavar="{0..5}")
    p.add_argument("--mode", required=True, choices=surgery.MODES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transplant)

    p = sub.add_parser("run-child", help="transplant, train on an environment and log the curve")
    p.add_argument("--parent", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", required=True, choices=surgery.MODES)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    _eval_args(p)
    p.set_defaults(func=cmd_run_child)

    p = sub.add_parser("run-grid", help="run (or resume) the whole transfer grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_run_grid)

    p = sub.add_parser("report", help="summary table, plot data and figures from trial outputs")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except (harness.HarnessError, surgery.CheckpointError, ReportError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
