"""Command-line entry point: ``seqlink <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .autoencoder import TrajectoryBank
from .diffcore import ParameterStore
from .metrics import rank_sum_test
from .pyramid import PyramidSet


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults to the full profile)")
    p.add_argument("--desk", action="store_true", help="start from the small desk profile")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. --set hyper.epochs=30 (repeatable)")
    p.add_argument("--out", help="output directory (default: $SEQLINK_ARTIFACT_DIR/<name>-<hash>)")
    p.add_argument("--workers", type=int, default=1, help="parallel seed workers")


def _config(args) -> ex.ExperimentConfig:
    if args.desk and not args.config:
        cfg = ex.desk_profile()
        for item in args.overrides:
            ex.set_path(cfg, *ex.parse_override(item))
        cfg.validate()
        return cfg
    return ex.load_config(args.config, args.overrides)


def _out_dir(args, cfg: ex.ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    return ex.artifact_root() / f"{cfg.name}-{cfg.config_hash()}"


def _dump(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    data = ex.prepare_data(cfg)
    data.train.save(out / "train.npz")
    data.test.save(out / "test.npz")
    data.manifest.save(out / "dataset_manifest.json")
    print(f"wrote {data.train.K} train / {data.test.K} test samples to {out}")
    return 0


def cmd_train_ae(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    data = ex.prepare_data(cfg)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    from .autoencoder import train_autoencoder
    res = train_autoencoder(data.train, ex.ae_config(cfg, seed))
    bank_path = Path(args.bank_out) if args.bank_out else out / "bank.json"
    bank_path.parent.mkdir(parents=True, exist_ok=True)
    res.bank.save(bank_path)
    res.model.store.save(out / "ae_model.json")
    print(f"bank: {bank_path} (final reconstruction loss {res.final_loss:.5f})")
    return 0


def cmd_build_pyramid(args) -> int:
    cfg = _config(args)
    if args.levels is not None:
        cfg.hyper.levels = args.levels
    for path in (args.bank, args.ae):
        if not Path(path).exists():
            raise ex.MissingArtifactError(f"missing artifact: {path}")
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    bank = TrajectoryBank.load(args.bank)
    ae_store = ParameterStore.load(args.ae)
    data = ex.prepare_data(cfg)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    stage = ex.run_pyramid_stage(cfg, data, bank, ae_store, seed)
    stage.train.save(out / "pyramids_train.json")
    stage.test.save(out / "pyramids_test.json")
    print(f"pyramids (L={cfg.hyper.levels}) written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.bank:
        cfg.stages.run_autoencoder = False
        cfg.stages.bank_path = args.bank
        cfg.stages.ae_path = args.ae
    if args.pyramids:
        cfg.stages.run_pyramid = False
        cfg.stages.pyramid_train_path, cfg.stages.pyramid_test_path = args.pyramids
    report = ex.run_training(cfg, _out_dir(args, cfg), args.workers)
    print(ex.summarize(report))
    return 0


def cmd_eval(args) -> int:
    _dump(ex.evaluate_checkpoint(args.checkpoint))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    reports = ex.run_ablation(cfg, _out_dir(args, cfg), args.workers)
    for rep in reports.values():
        print(ex.summarize(rep))
    return 0


def _numbers(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    grid = ex.run_sparsity_sweep(cfg, [int(v) for v in _numbers(args.lengths)], _numbers(args.fractions),
                                 args.model, _out_dir(args, cfg), args.workers)
    print(ex.summarize(grid))
    return 0


def cmd_report(args) -> int:
    for path in args.paths:
        p = Path(path)
        if not p.exists():
            raise ex.MissingArtifactError(f"missing report: {p}")
        print(ex.summarize(json.loads(p.read_text())))
    return 0


def _sample(spec: str) -> list[float]:
    p = Path(spec)
    if p.exists():
        rep = json.loads(p.read_text())
        return [r["metrics"][rep["metric"]] for r in rep["per_seed"]]
    return _numbers(spec)


def cmd_ranktest(args) -> int:
    a, b = _sample(args.a), _sample(args.b)
    print(f"p = {rank_sum_test(a, b):.6g}  (n_a={len(a)}, n_b={len(b)})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqlink", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate (or ingest) and split a dataset")
    _add_config_args(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-ae", help="train the ODE auto-encoder and write the trajectory bank")
    _add_config_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--bank-out", help="path for the trajectory bank JSON")
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("build-pyramid", help="fit attention and sort pyramids from a bank")
    _add_config_args(p)
    p.add_argument("--bank", required=True)
    p.add_argument("--ae", required=True, help="auto-encoder checkpoint (its decoder scores reconstructions)")
    p.add_argument("--levels", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_build_pyramid)

    p = sub.add_parser("train", help="run the full pipeline for one model over all seeds")
    _add_config_args(p)
    p.add_argument("--bank", help="reuse a trajectory bank instead of training the auto-encoder")
    p.add_argument("--ae", help="auto-encoder checkpoint to pair with --bank")
    p.add_argument("--pyramids", nargs=2, metavar=("TRAIN", "TEST"), help="reuse pyramid files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model checkpoint on its test split")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full, unified, most- and least-related variants")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sequence length x sparsity grid")
    _add_config_args(p)
    p.add_argument("--lengths", default="100")
    p.add_argument("--fractions", default="0.1,0.2,0.3,0.4")
    p.add_argument("--model")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize metrics.json or sweep.json files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ranktest", help="Wilcoxon rank-sum test on two samples")
    p.add_argument("a", help="comma-separated values or a metrics.json")
    p.add_argument("b", help="comma-separated values or a metrics.json")
    p.set_defaults(func=cmd_ranktest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ex.MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ex.PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
