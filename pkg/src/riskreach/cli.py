"""``riskreach`` command line: train, evaluate, verify, report, run.

Exit codes: 0 success, 1 usage error (bad flags or configuration), 2 runtime
failure, 3 unverifiable
(reachability failed on more than half of the evaluated states).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, load_run_config
from .navsim import ConfigError, ScenarioError
from .pipeline import PipelineError, UnverifiableRun, evaluate_run, report_runs, train_run, verify_run
from .trainer import MODES, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_UNVERIFIABLE = 0, 1, 2, 3

log = logging.getLogger("riskreach")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seeds(text):
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("need at least one seed")
    return seeds


def _training_args(p):
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--scenario", help="key=value scenario file")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--alpha", type=float)
    p.add_argument("--budget", type=float, help="cost threshold b")
    p.add_argument("--epsilon", type=float, help="observation perturbation radius for verify")
    p.add_argument("--seed", type=int, action="append", dest="seed_list", help="repeatable")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seed list")
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes-per-epoch", type=int)
    p.add_argument("--updates-per-epoch", type=int)
    p.add_argument("--warmup-episodes", type=int)
    p.add_argument("--out", help="run directory (default: $RISKREACH_OUT/<mode>_a<alpha>)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="riskreach", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _training_args(sub.add_parser("train", help="train one policy per seed"))
    _training_args(sub.add_parser("run", help="train, evaluate and verify in one go"))

    p = sub.add_parser("evaluate", help="roll out trained policies on the fixed evaluation pairs")
    p.add_argument("run_dir")

    p = sub.add_parser("verify", help="reachable-set safety check on evaluated states")
    p.add_argument("run_dir")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--threshold", type=float, help="clearance threshold (default: d_col)")

    p = sub.add_parser("report", help="aggregate runs into comparison tables")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    seeds = args.seeds
    if args.seed_list:
        seeds = tuple(args.seed_list) + tuple(seeds or ())
    overrides = {
        "scenario": args.scenario,
        "mode": args.mode,
        "alpha": args.alpha,
        "budget": args.budget,
        "epsilon": args.epsilon,
        "seeds": seeds,
        "epochs": args.epochs,
        "episodes_per_epoch": args.episodes_per_epoch,
        "updates_per_epoch": args.updates_per_epoch,
        "warmup_episodes": args.warmup_episodes,
    }
    return apply_overrides(cfg, overrides)


def default_run_dir(cfg: RunConfig) -> Path:
    root = Path(os.environ.get("RISKREACH_OUT", "runs"))
    return root / f"{cfg.train.mode}_a{cfg.train.alpha:g}"


def _dispatch(args) -> int:
    if args.command in ("train", "run"):
        cfg = resolve_config(args)
        run_dir = Path(args.out) if args.out else default_run_dir(cfg)
        train_run(cfg, run_dir)
        print(f"trained {len(cfg.seeds)} seed(s) into {run_dir}")
        if args.command == "train":
            return EXIT_OK
        evaluate_run(run_dir)
        summaries = verify_run(run_dir)
        _print_summaries(summaries)
    elif args.command == "evaluate":
        for path in evaluate_run(args.run_dir):
            print(path)
    elif args.command == "verify":
        _print_summaries(verify_run(args.run_dir, args.epsilon, args.threshold))
    elif args.command == "report":
        out = report_runs(args.run_dirs, args.out)
        print((out / "comparison.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _print_summaries(summaries):
    for name, s in summaries.items():
        print(f"{name}: states={s['states']} safety={s['safety_overall']:.4f} "
              f"succ={s['safety_succ']:.4f} coll={s['safety_coll']:.4f} "
              f"danger={s['safety_overall_danger']:.4f} unverified={s['unverified_fraction']:.4f}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except UnverifiableRun as exc:
        print(f"riskreach: {exc}", file=sys.stderr)
        return EXIT_UNVERIFIABLE
    except ConfigError as exc:
        print(f"riskreach: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ScenarioError, PipelineError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"riskreach: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
