"""Command-line interface: one subcommand per pipeline stage.

Exit codes: 0 success, 2 bad input, 3 registration gate failure,
4 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from typing import Any

from .config import SECTIONS, PipelineConfig, load_config
from .core import RegistrationGateError, TrainingDivergedError

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_GATE = 3
EXIT_DIVERGED = 4

# (section, flag prefix) groups exposed by each subcommand
_FLAG_GROUPS = {
    "phantom": [("phantom", ""), ("acquisition", "")],
    "register": [("registration", "")],
    "train": [("preprocess", ""), ("tiling", ""), ("generator", "gen-"),
              ("discriminator", "disc-"), ("train", "")],
    "infer": [("eval", "")],
    "eval": [("eval", "")],
    "run": [("phantom", ""), ("acquisition", ""), ("registration", ""), ("preprocess", ""),
            ("tiling", ""), ("generator", "gen-"), ("discriminator", "disc-"), ("train", ""),
            ("eval", "")],
}
_SKIP = {("train", "seed"), ("generator", "input_size"), ("generator", "in_channels"),
         ("generator", "out_channels"), ("discriminator", "in_channels")}


def _add_section_flags(parser: argparse.ArgumentParser, command: str) -> None:
    seen: set[str] = set()
    for section, prefix in _FLAG_GROUPS[command]:
        group = parser.add_argument_group(f"{section} settings")
        for f in dataclasses.fields(SECTIONS[section]):
            if (section, f.name) in _SKIP:
                continue
            flag = f"--{prefix}{f.name.replace('_', '-')}"
            if flag in seen:
                continue
            seen.add(flag)
            dest = f"cfg__{section}__{f.name}"
            default = f.default if f.default is not dataclasses.MISSING else None
            if isinstance(default, bool):
                group.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None)
            elif isinstance(default, (int, float, str)):
                group.add_argument(flag, dest=dest, type=type(default), default=None,
                                   metavar=type(default).__name__.upper(), help=f"default {default}")


def _overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for key, value in vars(args).items():
        if key.startswith("cfg__") and value is not None:
            _, section, name = key.split("__", 2)
            out.setdefault(section, {})[name] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="virtualstain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML/JSON pipeline config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("phantom", help="synthesize a paired phantom dataset")
    common(p)
    _add_section_flags(p, "phantom")

    p = sub.add_parser("register", help="register an H&E image onto a non-radiative reference")
    common(p)
    p.add_argument("--reference", required=True, help="non-radiative channel image")
    p.add_argument("--moving", required=True, help="H&E image to register")
    p.add_argument("--points", required=True, help="control point CSV")
    p.add_argument("--holdout", help="held-out control point CSV for the residual gate")
    _add_section_flags(p, "register")

    p = sub.add_parser("train", help="train the colorization model")
    common(p)
    p.add_argument("--nr", nargs="+", required=True, help="non-radiative channel image(s)")
    p.add_argument("--rad", nargs="+", required=True, help="radiative channel image(s)")
    p.add_argument("--sc", nargs="+", required=True, help="scattering channel image(s)")
    p.add_argument("--label", nargs="+", required=True, help="registered H&E image(s)")
    _add_section_flags(p, "train")

    p = sub.add_parser("infer", help="virtually stain a whole image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nr", required=True)
    p.add_argument("--rad", required=True)
    p.add_argument("--sc", required=True)
    _add_section_flags(p, "infer")

    p = sub.add_parser("eval", help="Lab SSIM/RMSE over random patches")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--panel-input", help="raw input image to include in a comparison panel")
    _add_section_flags(p, "eval")

    p = sub.add_parser("run", help="phantom -> register -> train -> infer -> eval")
    common(p)
    _add_section_flags(p, "run")
    return parser


def _config(args) -> PipelineConfig:
    return load_config(args.config).with_overrides(_overrides(args), seed=args.seed)


def _dispatch(args) -> int:
    from . import pipeline

    cfg = _config(args)
    if args.command == "phantom":
        pipeline.run_phantom(cfg, args.out)
    elif args.command == "register":
        _, report = pipeline.run_register(cfg, args.reference, args.moving, args.points, args.out,
                                          holdout_file=args.holdout)
        print(json.dumps(report.to_dict()))
    elif args.command == "train":
        _, ckpt, history = pipeline.run_train(cfg, args.nr, args.rad, args.sc, args.label, args.out)
        print(f"best epoch {history.best_epoch} of {len(history.records)}, "
              f"val loss {ckpt.best_val_loss:.4f}")
    elif args.command == "infer":
        pipeline.run_infer(cfg, args.checkpoint, [args.nr, args.rad, args.sc], args.out)
    elif args.command == "eval":
        _, report = pipeline.run_eval(cfg, args.pred, args.truth, args.out,
                                      panel_input=args.panel_input)
        print(report.summary())
    elif args.command == "run":
        pipeline.run_all(cfg, args.out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except RegistrationGateError as exc:
        if exc.report is not None:
            print(json.dumps(exc.report.to_dict()))
        print(f"registration gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
