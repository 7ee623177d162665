"""Command-line entry point: ``blockflow <verb> [options]``.

Exit status is 0 on success, 1 when inputs or configuration are invalid and
2 when training or sampling produces non-finite numbers.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import checkpoint, pipeline
from . import preprocess as pp
from .vae import DivergenceError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("blockflow")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="root seed for every random stream")
    p.add_argument("--out", metavar="DIR", help="run directory holding inputs and outputs")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.lr=5e-4 (value parsed as JSON when possible)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="write a synthetic count dataset")
    _common(p)
    p.add_argument("--preset", choices=["acceptance", "perturbation"])
    p.add_argument("--cells", type=int)
    p.add_argument("--genes", type=int)
    p.add_argument("--effect", type=float)

    p = sub.add_parser("build-blocks", help="partition genes into equal-size blocks")
    _common(p)
    p.add_argument("--block-size", type=int)

    for verb, key in (("train-vae", "vae_epochs"), ("train-fm", "flow_epochs")):
        p = sub.add_parser(verb, help=f"train the {'VAE' if verb == 'train-vae' else 'latent flow model'}")
        _common(p)
        p.add_argument("--epochs", type=int, dest=key)
        p.add_argument("--exclude", action="append", metavar="COLUMN=LABEL",
                       help="hold out cells matching all given pairs")

    p = sub.add_parser("generate", help="sample cells for a condition assignment")
    _common(p)
    p.add_argument("--conditions", metavar="CSV", help="one row per cell to generate (default: training cells)")
    p.add_argument("--cfg-weight", type=float)
    p.add_argument("--ode-steps", type=int)

    p = sub.add_parser("transfer", help="re-decode cells under different conditions")
    _common(p)
    p.add_argument("--select", action="append", metavar="COLUMN=LABEL", help="cells to transfer")
    p.add_argument("--target", action="append", metavar="COLUMN=LABEL", help="condition column to replace")

    p = sub.add_parser("evaluate", help="per-condition WD, MMD and gene-mean statistics")
    _common(p)
    p.add_argument("--real", metavar="MATRIX")
    p.add_argument("--generated", metavar="MATRIX")
    p.add_argument("--column", action="append", dest="columns", metavar="NAME",
                   help="condition column(s) to group by (default: all)")
    p.add_argument("--space", choices=["raw", "preprocessed", "latent"])
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


FLAG_KEYS = {
    "seed": "seed",
    "out": "out_dir",
    "preset": "synth.preset",
    "cells": "synth.n_cells",
    "genes": "synth.n_genes",
    "effect": "synth.effect",
    "block_size": "blocks.block_size",
    "vae_epochs": "train.vae_epochs",
    "flow_epochs": "train.flow_epochs",
    "exclude": "train.exclude",
    "conditions": "generate.conditions",
    "cfg_weight": "flow.cfg_weight",
    "ode_steps": "flow.ode_steps",
    "select": "transfer.select",
    "target": "transfer.target",
    "real": "evaluate.real",
    "generated": "evaluate.generated",
    "columns": "evaluate.columns",
    "space": "evaluate.space",
}


def config_from_args(args: argparse.Namespace) -> dict:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise pipeline.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _parse_value(value)
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return pipeline.load_config(args.config, overrides)


STAGES = {
    "synth": pipeline.run_synth,
    "build-blocks": pipeline.run_build_blocks,
    "train-vae": pipeline.run_train_vae,
    "train-fm": pipeline.run_train_fm,
    "generate": pipeline.run_generate,
    "transfer": pipeline.run_transfer,
    "evaluate": pipeline.run_evaluate,
}

INVALID = (
    pipeline.ConfigError,
    checkpoint.CheckpointError,
    pp.PipelineOrderError,
    ValueError,
    KeyError,
    OSError,
    json.JSONDecodeError,
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        STAGES[args.verb](cfg)
    except (DivergenceError, FloatingPointError) as exc:
        print(f"blockflow {args.verb}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except INVALID as exc:
        print(f"blockflow {args.verb}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
