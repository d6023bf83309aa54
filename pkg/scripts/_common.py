"""Shared argument handling for the experiment scripts."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from seqlink import experiment as ex


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--full", action="store_true", help="full profile (K=1000, 200 epochs) instead of desk scale")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config(args, **defaults) -> ex.ExperimentConfig:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    cfg = ex.ExperimentConfig() if args.full else ex.desk_profile()
    for key, value in defaults.items():
        ex.set_path(cfg, key, value)
    for item in args.overrides:
        ex.set_path(cfg, *ex.parse_override(item))
    cfg.validate()
    return cfg


def out_dir(args, cfg: ex.ExperimentConfig, tag: str) -> Path:
    return args.out or ex.artifact_root() / f"{tag}-{cfg.config_hash()}"
