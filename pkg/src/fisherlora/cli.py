"""Command-line entry point: ``fisherlora <command> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import commands
from .harness.config import ConfigError, load

log = logging.getLogger("fisherlora")

COMMANDS = ("stats", "init", "train", "probe", "preliminary", "ablate", "overlap", "timing")


def _task_arg(text: str) -> tuple[str, Path]:
    name, sep, path = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected NAME=INIT_DIR")
    return name, Path(path)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a single config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fisherlora", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("stats", parents=[common], help="estimate Kronecker Fisher factors")
    p = sub.add_parser("init", parents=[common], help="build LoRA factors from saved factors")
    p.add_argument("--stats", type=Path, help="factor checkpoint directory")
    p = sub.add_parser("train", parents=[common], help="train adapters from saved inits")
    p.add_argument("--init", type=Path, help="LoRA checkpoint directory")
    p = sub.add_parser("probe", parents=[common], help="symmetric-perturbation curvature report")
    p.add_argument("--init", type=Path, help="LoRA checkpoint directory (probe.source = selected)")
    sub.add_parser("preliminary", parents=[common], help="direction-group ranking study")
    sub.add_parser("ablate", parents=[common], help="selection x scaling variant grid")
    p = sub.add_parser("overlap", parents=[common], help="selected-direction overlap between tasks")
    p.add_argument("--task", type=_task_arg, action="append", required=True, metavar="NAME=INIT_DIR")
    sub.add_parser("timing", parents=[common], help="per-phase initialization timings")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    try:
        cfg = load(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path(cfg.output.dir)
    try:
        if args.command == "stats":
            manifest = commands.cmd_stats(cfg, out)
        elif args.command == "init":
            manifest = commands.cmd_init(cfg, out, args.stats)
        elif args.command == "train":
            manifest = commands.cmd_train(cfg, out, args.init)
        elif args.command == "probe":
            manifest = commands.cmd_probe(cfg, out, args.init)
        elif args.command == "preliminary":
            manifest = commands.cmd_preliminary(cfg, out)
        elif args.command == "ablate":
            manifest = commands.cmd_ablate(cfg, out)
        elif args.command == "overlap":
            manifest = commands.cmd_overlap(cfg, out, dict(args.task))
        else:
            manifest = commands.cmd_timing(cfg, out)
    except commands.CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in manifest["artifact_paths"]:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
