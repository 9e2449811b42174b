"""Command-line entry point: ``segadv <verb> --config FILE [--seed N] [--out DIR] [--force]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import attacks, segnet, targets
from . import tensor_core as tc
from .experiment import ExperimentError, Pipeline, load_config

log = logging.getLogger("segadv")

VERBS = {
    "gen-data": "generate train and validation scenes",
    "train": "train the victim model (and the second victim, if configured)",
    "gen-target": "build adversarial targets from clean predictions",
    "attack": "optimise the perturbation",
    "eval": "write metric reports for the saved perturbation",
    "sweep": "attack and evaluate over one parameter axis",
    "render": "write PPM/PGM images of clean, adversarial and perturbation views",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segadv", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")
    for verb, text in VERBS.items():
        p = sub.add_parser(verb, help=text, description=text)
        p.add_argument("--config", required=True, type=Path, help="experiment INI file")
        p.add_argument("--seed", type=int, help="override [experiment] seed")
        p.add_argument("--out", type=Path, help="output directory (default: [experiment] out, "
                                                "else runs/<config name>)")
        p.add_argument("--force", action="store_true",
                       help="accept artifacts stamped by a different config or model")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def make_pipeline(args) -> Pipeline:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = args.out or (Path(cfg.out) if cfg.out else Path("runs") / args.config.stem)
    return Pipeline(cfg, out, force=args.force)


def run(args) -> object:
    pipe = make_pipeline(args)
    pipe.out.mkdir(parents=True, exist_ok=True)
    verb = args.verb
    if verb == "gen-data":
        return pipe.gen_data()
    if verb == "train":
        return [str(p) for p in pipe.train()]
    if verb == "gen-target":
        return pipe.gen_target()
    if verb == "attack":
        return str(pipe.attack())
    if verb == "eval":
        return pipe.evaluate()
    if verb == "sweep":
        return str(pipe.sweep())
    if verb == "render":
        return str(pipe.render())
    raise AssertionError(verb)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (ExperimentError, tc.ShapeError, segnet.ConfigError, segnet.TrainingDiverged,
            attacks.AttackConfigError, attacks.AttackDiverged, targets.EmptyBackgroundError) as exc:
        print(f"segadv {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"segadv {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
