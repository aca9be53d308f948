"""Command line entry point: ``deltanerf <subcommand> [options]``.

Exit status: 0 on success, 1 for configuration or data errors, 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .numerics import ArchiveError
from .sceneio import DatasetError

log = logging.getLogger("deltanerf")


def _stage1(cfg):
    return P.run_stage1(cfg)


def _stage2(cfg):
    return P.run_stage2(cfg)


COMMANDS = {
    "gen-data": (P.gen_data, "generate prior training pairs, scene views and held-out references"),
    "train-ae": (P.train_ae, "pretrain and freeze the autoencoder"),
    "train-diffusion": (P.train_diffusion, "pretrain and freeze the latent denoiser"),
    "train-embed": (P.train_embed, "train and freeze the toy text-image embedding space"),
    "train-delta": (_stage1, "Stage 1: train the delta module and write the edited views"),
    "train-nerf": (_stage2, "Stage 2: train the conditioned NeRF and render the held-out orbit"),
    "render": (P.render, "re-render the held-out orbit from NeRF checkpoints"),
    "eval": (P.evaluate, "compute metrics for a finished run directory (metrics.csv)"),
    "ablate": (P.ablate, "run full / lambda_c=0 / zero-delta variants (ablation.csv)"),
    "run-all": (P.run_all, "every stage followed by eval"),
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deltanerf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="RunConfig JSON file (defaults are used when omitted)")
        p.add_argument("--out", dest="out_dir", help="run directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="FIELD=VALUE",
                       help="override a config field (value parsed as JSON when possible)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args: argparse.Namespace) -> P.RunConfig:
    base = P.RunConfig.from_json(args.config).to_dict() if args.config is not None else P.RunConfig().to_dict()
    if args.config is None and args.command not in ("gen-data", "run-all", "ablate"):
        # later stages read the config written by gen-data when no file is given
        out = args.out_dir or base["out_dir"]
        written = Path(out) / "config.json"
        if written.exists():
            base = P.RunConfig.from_json(written).to_dict()
    for item in args.overrides:
        if "=" not in item:
            raise P.ConfigError(f"override {item!r} is not of the form FIELD=VALUE")
        key, value = item.split("=", 1)
        base[key] = _parse_value(value)
    for key in ("out_dir", "seed", "workers"):
        if getattr(args, key) is not None:
            base[key] = getattr(args, key)
    return P.RunConfig.from_dict(base)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        fn, _ = COMMANDS[args.command]
        result = fn(cfg)
    except (P.ConfigError, P.MissingArtifactError, DatasetError, ArchiveError) as exc:
        print(f"deltanerf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if args.command in ("eval", "run-all"):
        print(f"metrics written to {P.RunDir(cfg.out_dir).metrics}")
    elif args.command == "ablate":
        print(f"ablation written to {Path(cfg.out_dir) / 'ablation.csv'}")
    log.info("%s finished: %s", args.command, type(result).__name__)
    return 0


if __name__ == "__main__":
    sys.exit(main())
