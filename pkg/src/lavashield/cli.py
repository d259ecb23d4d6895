"""Command-line entry point.

Subcommands mirror the pipeline stages: gen, solve, priors, train-encoder,
run, report.  Every subcommand accepts --config pointing at a flat
`key = value` file; explicit flags override file values, which override the
built-in defaults.
"""

from __future__ import annotations

import argparse
import sys

from .agent import MODES, AgentConfig
from .config import (
    ExperimentConfig,
    parse_int_list,
    parse_str_list,
    read_config_file,
    resolve,
)
from .gridworld import CellKind
from .harness import (
    cmd_gen,
    cmd_priors,
    cmd_report,
    cmd_run,
    cmd_solve,
    cmd_train_encoder,
)
from .latent import EncoderConfig
from .priors import PriorConfig
from .shield import ShieldConfig


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None,
                        help="flat key = value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lavashield",
        description="two-stage safe-exploration shield on crossing grids")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate crossing maps")
    _add_config_arg(p)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--crossings", type=int, default=None)
    p.add_argument("--obstacle", choices=("lava", "wall"), default=None)
    p.add_argument("--seeds", type=parse_int_list, default=None,
                   help="comma-separated seed list")
    p.add_argument("--outdir", default=None)

    p = sub.add_parser("solve", help="solve a map exactly")
    _add_config_arg(p)
    p.add_argument("--map", required=True)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("priors", help="distill a prior Q-table from maps")
    _add_config_arg(p)
    p.add_argument("--maps", nargs="+", required=True,
                   help="source maps; the first supplies successor dynamics")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None,
                   help="consistency score cutoff")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--outdir", required=True)

    p = sub.add_parser("train-encoder", help="train the contrastive encoder")
    _add_config_arg(p)
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--labeling", choices=("oracle", "experiential"),
                   default=None)
    p.add_argument("--rollout-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--outdir", required=True)

    p = sub.add_parser("run", help="train agents across modes and seeds")
    _add_config_arg(p)
    p.add_argument("--map", required=True)
    p.add_argument("--qp", default=None, help="prior Q-table path")
    p.add_argument("--encoder", default=None, help="encoder checkpoint path")
    p.add_argument("--modes", type=parse_str_list, default=None,
                   help=f"comma-separated subset of {','.join(MODES)}")
    p.add_argument("--seeds", type=parse_int_list, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--learner", choices=("tabular", "dqn"), default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--epsilon-start", type=float, default=None)
    p.add_argument("--epsilon-end", type=float, default=None)
    p.add_argument("--epsilon-decay-steps", type=int, default=None)
    p.add_argument("--distance-threshold", type=float, default=None)
    p.add_argument("--check-probability", type=float, default=None)
    p.add_argument("--sample-size", type=int, default=None)
    p.add_argument("--buffer-capacity", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--outdir", required=True)

    p = sub.add_parser("report", help="aggregate runs into tables and figures")
    _add_config_arg(p)
    p.add_argument("--runs", required=True)
    p.add_argument("--map", default=None,
                   help="optional map, used to outline obstacles on heatmaps")
    p.add_argument("--outdir", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    file_values = read_config_file(args.config) if args.config else {}

    def opt(name: str, convert, default):
        return resolve(getattr(args, name, None), file_values, name, convert,
                       default)

    if args.command == "gen":
        obstacle = opt("obstacle", str, "lava")
        kind = CellKind.LAVA if obstacle == "lava" else CellKind.WALL
        paths = cmd_gen(size=opt("size", int, 9),
                        crossings=opt("crossings", int, 1),
                        obstacle=kind,
                        seeds=opt("seeds", parse_int_list, [0]),
                        outdir=opt("outdir", str, "maps"))
        for path in paths:
            print(path)
        return 0

    if args.command == "solve":
        cmd_solve(args.map, args.out,
                  gamma=opt("gamma", float, 0.99),
                  tol=opt("tol", float, 1e-8))
        print(args.out)
        return 0

    if args.command == "priors":
        cfg = PriorConfig(
            consistency_threshold=opt("threshold", float, 0.1),
            gamma=opt("gamma", float, 0.9),
            learning_rate=opt("learning_rate", float, 0.5))
        qp_path, transitions_path = cmd_priors(args.maps, args.outdir, cfg)
        print(qp_path)
        print(transitions_path)
        return 0

    if args.command == "train-encoder":
        cfg = EncoderConfig(
            batch_size=opt("batch_size", int, 32),
            latent_dim=opt("latent_dim", int, 50),
            hidden_dim=opt("hidden_dim", int, 256))
        path = cmd_train_encoder(
            args.maps, args.outdir, cfg,
            steps=opt("steps", int, 2000),
            seed=opt("seed", int, 0),
            labeling=opt("labeling", str, "oracle"),
            rollout_steps=opt("rollout_steps", int, 5000))
        print(path)
        return 0

    if args.command == "run":
        agent = AgentConfig(
            learner=opt("learner", str, "tabular"),
            learning_rate=opt("learning_rate", float, 0.5),
            gamma=opt("gamma", float, 0.99),
            epsilon_start=opt("epsilon_start", float, 1.0),
            epsilon_end=opt("epsilon_end", float, 0.05),
            epsilon_decay_steps=opt("epsilon_decay_steps", int, None))
        shield = ShieldConfig(
            distance_threshold=opt("distance_threshold", float, 2.5),
            check_probability=opt("check_probability", float, 0.95),
            sample_size=opt("sample_size", int, 10),
            buffer_capacity=opt("buffer_capacity", int, 100))
        exp = ExperimentConfig(
            map_path=args.map,
            modes=opt("modes", parse_str_list, list(MODES)),
            seeds=opt("seeds", parse_int_list, [1, 2, 3]),
            steps=opt("steps", int, 50_000),
            outdir=args.outdir,
            qp_path=opt("qp", str, None),
            encoder_path=opt("encoder", str, None),
            workers=opt("workers", int, 1),
            agent=agent,
            shield=shield)
        for run_dir in cmd_run(exp):
            print(run_dir)
        return 0

    if args.command == "report":
        print(cmd_report(args.runs, args.outdir, map_path=args.map))
        return 0

    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
