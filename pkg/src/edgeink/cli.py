"""``edgeink`` command line."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import STAGES, load_config, preset_names
from .errors import EdgeInkError


def _common(p):
    p.add_argument("--config", required=True, help="YAML file or bundled preset name")
    p.add_argument("--seed", type=int, help="base seed; injector/poison/victim use seed, seed+1, seed+2")
    p.add_argument("--output", help="run directory (overrides output_dir)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. attack.pollution_ratio=0.05")
    p.add_argument("--force", action="store_true", help="redo stages whose outputs already exist")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeink", description="Edge-trigger backdoor toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-injector", help="train the injection network")
    _common(p)
    p = sub.add_parser("poison", help="build the poisoned training set")
    _common(p)
    p.add_argument("--injector", help="injector checkpoint (default: <run>/injector.ckpt)")
    p = sub.add_parser("train-victim", help="train the victim classifier on the poisoned set")
    _common(p)
    p.add_argument("--data", help="poisoned dataset directory (default: <run>/poisoned)")
    p = sub.add_parser("evaluate", help="CDA/ASR under transforms, image quality and defenses")
    _common(p)
    p.add_argument("--model", help="victim checkpoint (default: <run>/victim.ckpt)")
    p.add_argument("--injector", help="injector checkpoint (default: <run>/injector.ckpt)")
    p = sub.add_parser("run", help="run several stages in order")
    _common(p)
    p.add_argument("--stage", action="append", choices=STAGES, help="stage to run (repeatable; default: all)")
    p = sub.add_parser("report", help="tables and plots across run directories")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default="report", help="output directory")
    sub.add_parser("presets", help="list bundled presets")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "presets":
            print("\n".join(preset_names()))
            return 0
        if args.command == "report":
            from .report import render_report

            out = render_report(args.runs, args.out)
            print(f"wrote {out['csv']} and {out['markdown']} ({out['rows']} rows)")
            return 0
        from .runner import run_experiment

        cfg = load_config(args.config, args.set, args.seed, args.output)
        stages = args.stage if args.command == "run" else [args.command]
        run_dir = run_experiment(cfg, stages, args.force, injector=getattr(args, "injector", None),
                                 data=getattr(args, "data", None), model=getattr(args, "model", None))
        print(run_dir)
        return 0
    except EdgeInkError as exc:
        print(f"edgeink: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
