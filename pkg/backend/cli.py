import argparse
import logging
import os
import sys
from typing import List, Optional

# Add backend directory to path so "from app.*" resolves to backend/app
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app.runner import cmd_attack, cmd_diagnose, cmd_report, cmd_train, cmd_tsr

logger = logging.getLogger("edlcm")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edlcm",
        description="Train and evaluate ensembles regularized for low, dispersed curvature.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: $EDLCM_OUTPUT_DIR or ./runs)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="attack worker threads (0 = sequential)")
    common.add_argument("--log-level", default=os.getenv("LOG_LEVEL", "INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="train an ensemble from a config")
    train.add_argument("--config", required=True, help="experiment config (JSON)")

    for name, help_text in (
        ("attack", "robust accuracy under the configured attack grid"),
        ("tsr", "transferability of member-targeted attacks"),
        ("diagnose", "curvature statistics, bounds and finite-difference sweep"),
    ):
        cmd = sub.add_parser(name, parents=[common], help=help_text)
        cmd.add_argument("--checkpoint", required=True, help="checkpoint written by train")
        cmd.add_argument("--config", help="config overriding the one stored in the checkpoint")

    report = sub.add_parser("report", parents=[common], help="merge reports into comparison tables")
    report.add_argument("reports", nargs="+", help="robustness_*.json or tsr_*.json files")
    return parser


def run(args: argparse.Namespace) -> None:
    if args.threads is not None and args.threads < 0:
        raise ValueError(f"--threads must be non-negative, got {args.threads}")
    if args.command == "train":
        paths = cmd_train(args.config, out=args.out, seed=args.seed, threads=args.threads)
    elif args.command == "report":
        paths = cmd_report(args.reports, out=args.out)
    else:
        command = {"attack": cmd_attack, "tsr": cmd_tsr, "diagnose": cmd_diagnose}[args.command]
        paths = command(args.checkpoint, config_path=args.config, out=args.out, seed=args.seed,
                        threads=args.threads)
    for role, path in paths.items():
        logger.info(f"{role}: {path}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level))
    try:
        run(args)
    except (ValueError, OSError) as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
