"""Config-driven pipelines: data -> auto-encoder -> pyramids -> model -> metrics."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .autoencoder import AEConfig, AEResult, TrajectoryBank, train_autoencoder
from .data import (DatasetManifest, Normalizer, TimeSeriesBatch, apply_sparsity,
                   generate_gaussian_periodic, load_csv, normalize_01, split_shuffled)
from .diffcore import ParameterStore
from .metrics import evaluate_auc, evaluate_mse
from .models import KINDS, SEQLINK_KINDS, SequenceModel
from .pyramid import (AttentionConfig, AttentionScorer, PyramidSet, build_pyramids, fit_attention,
                      select_level, unified_pyramids)
from .training import NonFiniteLoss, substream, train_loop

log = logging.getLogger(__name__)

ARTIFACT_ENV = "SEQLINK_ARTIFACT_DIR"
REPORT_VERSION = 1


class PipelineError(RuntimeError):
    def __init__(self, stage: str, seed, config_hash: str, message: str):
        self.stage = stage
        self.seed = seed
        self.config_hash = config_hash
        super().__init__(f"[stage={stage} seed={seed} config={config_hash}] {message}")


class MissingArtifactError(FileNotFoundError):
    pass


# configuration ---------------------------------------------------------------------

@dataclass
class DataSpec:
    source: str = "synthetic"
    K: int = 1000
    n: int = 100
    D: int = 1
    sparsity: float = 0.3
    gap_pattern: str = "contiguous"
    seed: int = 0
    csv_path: str | None = None
    train_fraction: float = 0.8


@dataclass
class SolverSpec:
    # training always integrates with fixed steps; "dopri5" only affects evaluation
    method: str = "rk4"
    substeps: int = 4
    rtol: float = 1e-3
    atol: float = 1e-4


@dataclass
class HyperSpec:
    lr: float = 0.01
    epochs: int = 200
    batch_size: int = 200
    latent: int = 10
    hidden: int = 10
    ode_hidden: list = field(default_factory=lambda: [100])
    levels: int = 5
    ae_epochs: int | None = None
    attn_epochs: int | None = None
    removal_fraction: float = 0.2
    step_weight: float = 1.0
    embed: int = 16
    gate_init: float = -3.0


@dataclass
class StageSpec:
    run_autoencoder: bool = True
    run_pyramid: bool = True
    bank_path: str | None = None
    ae_path: str | None = None
    pyramid_train_path: str | None = None
    pyramid_test_path: str | None = None


@dataclass
class ExperimentConfig:
    name: str = "run"
    model: str = "seqlink"
    task: str = "regression"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    data: DataSpec = field(default_factory=DataSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    hyper: HyperSpec = field(default_factory=HyperSpec)
    stages: StageSpec = field(default_factory=StageSpec)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def validate(self) -> None:
        if self.model not in KINDS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {KINDS}")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.solver.method not in ("euler", "rk4", "dopri5"):
            raise ValueError(f"unknown solver {self.solver.method!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")


def _build(cls, d: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = getattr(cls(), name) if name in known else None
        kwargs[name] = _build(type(default), value) if is_dataclass(default) and isinstance(value, dict) else value
    return cls(**kwargs)


def desk_profile(**overrides) -> ExperimentConfig:
    """Small profile used by the acceptance suite: K=100, n=100, 30 epochs, batch 20, 3 seeds."""
    cfg = ExperimentConfig()
    cfg.data.K = 100
    cfg.hyper.epochs = 30
    cfg.hyper.batch_size = 20
    for key, value in overrides.items():
        set_path(cfg, key, value)
    return cfg


def set_path(cfg, dotted: str, value) -> None:
    *parents, last = dotted.split(".")
    obj = cfg
    for p in parents:
        obj = getattr(obj, p)
    if not hasattr(obj, last):
        raise ValueError(f"unknown config key {dotted!r}")
    setattr(obj, last, value)


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override must look like key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | None = None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(json.loads(Path(path).read_text())) if path else ExperimentConfig()
    for item in overrides:
        set_path(cfg, *parse_override(item))
    cfg.validate()
    return cfg


def artifact_root(default="artifacts") -> Path:
    return Path(os.environ.get(ARTIFACT_ENV, default))


# data --------------------------------------------------------------------------------

@dataclass
class PreparedData:
    train: TimeSeriesBatch
    test: TimeSeriesBatch
    normalizer: Normalizer
    manifest: DatasetManifest


def raw_dataset(spec: DataSpec) -> TimeSeriesBatch:
    if spec.source == "synthetic":
        base = generate_gaussian_periodic(spec.K, spec.n, substream(spec.seed, "data").integers(2**31), spec.D)
    elif spec.source == "csv":
        if not spec.csv_path:
            raise ValueError("data.csv_path is required for csv sources")
        base = load_csv(spec.csv_path)
    else:
        raise ValueError(f"unknown data source {spec.source!r}")
    if spec.sparsity > 0:
        base = apply_sparsity(base, spec.sparsity, int(substream(spec.seed, "sparsity").integers(2**31)),
                              spec.gap_pattern)
    return base


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    """Dataset depends only on ``cfg.data``, so runs with different model seeds are paired."""
    spec = cfg.data
    base = raw_dataset(spec)
    if cfg.task == "classification":
        if base.target is None:
            raise ValueError("classification needs per-sample targets")
        if spec.source == "synthetic":
            # binary task on synthetic data: is the next value above zero?
            base = base.replace(target=(base.target[:, :1] > 0).astype(float))
        elif not np.isin(base.target, (0.0, 1.0)).all():
            raise ValueError("classification targets must be 0 or 1")
    train, test = split_shuffled(base, spec.train_fraction, int(substream(spec.seed, "split").integers(2**31)))
    scale_target = cfg.task == "regression"
    train, norm = normalize_01(train, scale_target=scale_target)
    test = norm.apply(test, scale_target)
    manifest = DatasetManifest(spec.source, base.K, base.n, base.D, spec.sparsity, spec.seed,
                               spec.gap_pattern, norm.lower.tolist(), norm.upper.tolist(),
                               [f"feature {d} constant" for d in np.where(norm.constant)[0]])
    return PreparedData(train, test, norm, manifest)


# stages ------------------------------------------------------------------------------

def ae_config(cfg: ExperimentConfig, seed: int) -> AEConfig:
    h = cfg.hyper
    return AEConfig(h.ae_epochs if h.ae_epochs is not None else h.epochs, h.lr, h.batch_size, h.latent,
                    tuple(h.ode_hidden), cfg.solver.substeps, h.removal_fraction, seed)


def attn_config(cfg: ExperimentConfig, seed: int) -> AttentionConfig:
    h = cfg.hyper
    return AttentionConfig(h.attn_epochs if h.attn_epochs is not None else h.epochs, h.lr, h.batch_size,
                           h.embed, h.embed, seed)


def decoded_bank(ae_store: ParameterStore, bank: TrajectoryBank) -> np.ndarray:
    return bank.trajectories @ ae_store["ae.dec.W"].data + ae_store["ae.dec.b"].data


@dataclass
class PyramidStage:
    train: PyramidSet
    test: PyramidSet
    scorer_store: ParameterStore
    attention_loss: list


def run_pyramid_stage(cfg: ExperimentConfig, data: PreparedData, bank: TrajectoryBank,
                      ae_store: ParameterStore, seed: int) -> PyramidStage:
    scorer, store, hist = fit_attention(data.train, bank, decoded_bank(ae_store, bank), attn_config(cfg, seed))
    L = cfg.hyper.levels
    return PyramidStage(build_pyramids(data.train, bank, scorer, L, exclude_self=True),
                        build_pyramids(data.test, bank, scorer, L, exclude_self=False),
                        store, hist.epoch_loss)


def variant_pyramids(kind: str, stage: PyramidStage, bank: TrajectoryBank,
                     data: PreparedData) -> tuple[PyramidSet, PyramidSet]:
    if kind == "seqlink":
        return stage.train, stage.test
    if kind == "seqlink_unified":
        return (unified_pyramids(data.train.ids, bank, exclude_self=True),
                unified_pyramids(data.test.ids, bank, exclude_self=False))
    which = {"seqlink_most": "most", "seqlink_least": "least"}[kind]
    return select_level(stage.train, which), select_level(stage.test, which)


def build_model(cfg: ExperimentConfig, kind: str, seed: int, data: PreparedData) -> SequenceModel:
    h = cfg.hyper
    out_dim = data.train.target.shape[1]
    return SequenceModel(kind, data.train.D, out_dim, h.hidden, tuple(h.ode_hidden), cfg.solver.substeps,
                         h.levels, h.latent, cfg.task, seed, h.gate_init)


def fit_model(cfg: ExperimentConfig, model: SequenceModel, data: PreparedData, seed: int,
              pyramids: PyramidSet | None = None):
    h = cfg.hyper
    train = data.train
    step_weight = h.step_weight if cfg.task == "regression" else 0.0

    def loss_fn(index, rng):
        return model.loss(train.subset(index), pyramids, step_weight)

    return train_loop(model.store, loss_fn, train.K, h.epochs, h.batch_size, h.lr,
                      substream(seed, "model.shuffle"), label=model.kind)


def evaluate(cfg: ExperimentConfig, model: SequenceModel, batch: TimeSeriesBatch,
             pyramids: PyramidSet | None = None) -> dict:
    ode = getattr(model.encoder, "ode_rnn", model.encoder)
    saved = getattr(ode, "method", None)
    if saved is not None:
        ode.method = cfg.solver.method
        ode.rtol, ode.atol = cfg.solver.rtol, cfg.solver.atol
    try:
        pred = model.predict(batch, pyramids)
    finally:
        if saved is not None:
            ode.method = saved
    if cfg.task == "classification":
        return {"auc": evaluate_auc(pred.ravel(), batch.target.ravel())}
    return {"mse": evaluate_mse(pred, batch.target)}


# reports -----------------------------------------------------------------------------

def aggregate(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()) if arr.size else None,
            "std": float(arr.std(ddof=1)) if arr.size >= 2 else None}


@dataclass
class SeedResult:
    seed: int
    metrics: dict
    loss_curve: list
    ae_loss: list = field(default_factory=list)
    attention_loss: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)


def make_report(cfg: ExperimentConfig, kind: str, results: list[SeedResult], failed: list,
                wall: float) -> dict:
    metric = "auc" if cfg.task == "classification" else "mse"
    values = [r.metrics[metric] for r in results]
    return {
        "format_version": REPORT_VERSION,
        "name": cfg.name,
        "model": kind,
        "metric": metric,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "per_seed": [asdict(r) for r in results],
        **aggregate(values),
        "partial": bool(failed),
        "failed_seeds": failed,
        "timing": {"wall_clock_s": wall},
    }


def long_records(report: dict, run_id: str | None = None) -> list[dict]:
    """Plot-ready rows: one per (seed, epoch) loss point plus one per seed metric."""
    run_id = run_id or f"{report['model']}-{report['config_hash']}"
    rows = []
    for r in report["per_seed"]:
        for e, v in enumerate(r["loss_curve"], start=1):
            rows.append({"run_id": run_id, "seed": r["seed"], "epoch": e, "metric": "train_loss", "value": v})
        for name, v in r["metrics"].items():
            rows.append({"run_id": run_id, "seed": r["seed"], "epoch": None, "metric": f"test_{name}", "value": v})
    return rows


def write_outputs(report: dict, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    curve_path = out_dir / "loss_curve.csv"
    with curve_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "epoch", "train_loss"])
        for r in report["per_seed"]:
            for e, v in enumerate(r["loss_curve"], start=1):
                w.writerow([r["seed"], e, repr(v)])
    plot_path = out_dir / "plot.json"
    plot_path.write_text(json.dumps(long_records(report), indent=1))
    return {"metrics": str(metrics_path), "loss_curve": str(curve_path), "plot": str(plot_path)}


# pipelines -----------------------------------------------------------------------------

def _load_required(path: str | None, what: str, loader):
    if not path:
        raise MissingArtifactError(f"missing {what}: no path configured and its stage is disabled")
    if not Path(path).exists():
        raise MissingArtifactError(f"missing {what}: {path}")
    return loader(path)


def obtain_bank(cfg: ExperimentConfig, data: PreparedData, seed: int) -> tuple[TrajectoryBank, ParameterStore, list]:
    st = cfg.stages
    if st.run_autoencoder:
        res = train_autoencoder(data.train, ae_config(cfg, seed))
        return res.bank, res.model.store, res.history.epoch_loss
    bank = _load_required(st.bank_path, "trajectory bank", TrajectoryBank.load)
    ae_store = None
    if st.run_pyramid:
        ae_store = _load_required(st.ae_path, "auto-encoder checkpoint", ParameterStore.load)
    return bank, ae_store, []


def obtain_pyramids(cfg, data, bank, ae_store, seed) -> PyramidStage:
    st = cfg.stages
    if st.run_pyramid:
        return run_pyramid_stage(cfg, data, bank, ae_store, seed)
    train = _load_required(st.pyramid_train_path, "training pyramids", PyramidSet.load)
    test = _load_required(st.pyramid_test_path, "test pyramids", PyramidSet.load)
    return PyramidStage(train, test, ParameterStore(), [])


def _seed_dir(out_dir: Path | None, seed: int) -> Path | None:
    if out_dir is None:
        return None
    d = out_dir / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def save_checkpoint(path: Path, cfg: ExperimentConfig, model: SequenceModel, bank_path=None,
                    pyramid_paths=None) -> None:
    payload = {"format_version": REPORT_VERSION, "config_hash": cfg.config_hash(), "config": cfg.to_dict(),
               "model": model.kind, "params": model.store.to_dict(), "bank_path": bank_path,
               "pyramid_paths": pyramid_paths}
    path.write_text(json.dumps(payload))


def run_seed(cfg: ExperimentConfig, kinds: list[str], seed: int, data: PreparedData,
             out_dir: Path | None = None) -> dict[str, SeedResult]:
    """Train every model in ``kinds`` for one seed; SeqLink variants share one bank and pyramid stage."""
    chash = cfg.config_hash()
    sdir = _seed_dir(out_dir, seed)
    stage_name = "autoencoder"
    results = {}
    try:
        bank = stage = None
        ae_loss: list = []
        if any(k in SEQLINK_KINDS for k in kinds):
            bank, ae_store, ae_loss = obtain_bank(cfg, data, seed)
            stage_name = "pyramid"
            stage = obtain_pyramids(cfg, data, bank, ae_store, seed)
            if sdir is not None:
                bank.save(sdir / "bank.json")
                if ae_store is not None:
                    ae_store.save(sdir / "ae_model.json")
                stage.train.save(sdir / "pyramids_train.json")
                stage.test.save(sdir / "pyramids_test.json")
        for kind in kinds:
            stage_name = f"train:{kind}"
            model = build_model(cfg, kind, seed, data)
            pyr_train = pyr_test = None
            if kind in SEQLINK_KINDS:
                pyr_train, pyr_test = variant_pyramids(kind, stage, bank, data)
            hist = fit_model(cfg, model, data, seed, pyr_train)
            stage_name = f"eval:{kind}"
            metrics = evaluate(cfg, model, data.test, pyr_test)
            artifacts = {}
            if sdir is not None:
                ck = sdir / f"{kind}_model.json"
                save_checkpoint(ck, cfg, model,
                                str(sdir / "bank.json") if bank is not None else None,
                                [str(sdir / "pyramids_train.json"), str(sdir / "pyramids_test.json")]
                                if bank is not None else None)
                artifacts["checkpoint"] = str(ck)
            results[kind] = SeedResult(seed, metrics, hist.epoch_loss, ae_loss,
                                       stage.attention_loss if stage else [], hist.warnings, artifacts)
    except (NonFiniteLoss, dc.NumericOverflowError) as exc:
        raise NonFiniteLoss(str(PipelineError(stage_name, seed, chash, str(exc)))) from exc
    except MissingArtifactError:
        raise
    except Exception as exc:
        raise PipelineError(stage_name, seed, chash, f"{type(exc).__name__}: {exc}") from exc
    return results


def _seed_outcome(cfg, kinds, seed, data, out_dir):
    try:
        return seed, run_seed(cfg, kinds, seed, data, out_dir), None
    except NonFiniteLoss as exc:
        return seed, None, str(exc)


def _run_kinds(cfg: ExperimentConfig, kinds: list[str], out_dir: Path | None,
               workers: int = 1) -> dict[str, dict]:
    cfg.validate()
    data = prepare_data(cfg)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        data.manifest.save(out_dir / "dataset_manifest.json")
    start = time.perf_counter()
    per_kind: dict[str, list[SeedResult]] = {k: [] for k in kinds}
    failed = []
    args = [(cfg, kinds, seed, data, out_dir) for seed in cfg.seeds]
    if workers > 1 and len(args) > 1:
        # every seed owns its parameters; results come back in seed order
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_seed_outcome, *zip(*args)))
    else:
        outcomes = [_seed_outcome(*a) for a in args]
    for seed, res, reason in outcomes:
        if res is None:
            log.warning("seed %s aborted: %s", seed, reason)
            failed.append({"seed": seed, "reason": reason})
            continue
        for k, r in res.items():
            per_kind[k].append(r)
    wall = time.perf_counter() - start
    reports = {}
    for k in kinds:
        rep = make_report(cfg, k, per_kind[k], failed, wall)
        if out_dir is not None:
            rep["artifacts"] = write_outputs(rep, out_dir / k if len(kinds) > 1 else out_dir)
        reports[k] = rep
    return reports


def run_training(cfg: ExperimentConfig, out_dir: Path | None = None, workers: int = 1) -> dict:
    """Full pipeline for ``cfg.model`` over every seed; returns the metrics report."""
    return _run_kinds(cfg, [cfg.model], out_dir, workers)[cfg.model]


def run_models(cfg: ExperimentConfig, kinds: list[str], out_dir: Path | None = None,
               workers: int = 1) -> dict[str, dict]:
    """Several models on the same data and seeds (SeqLink variants share their bank)."""
    return _run_kinds(cfg, list(kinds), out_dir, workers)


ABLATION_KINDS = ["seqlink", "seqlink_unified", "seqlink_most", "seqlink_least"]


def run_ablation(cfg: ExperimentConfig, out_dir: Path | None = None, workers: int = 1) -> dict[str, dict]:
    """Full pyramid plus the unified, most-related and least-related variants on a shared bank."""
    return _run_kinds(cfg, ABLATION_KINDS, out_dir, workers)


def run_sparsity_sweep(cfg: ExperimentConfig, lengths, fractions, model: str | None = None,
                       out_dir: Path | None = None, workers: int = 1) -> dict:
    """Grid of (length, sparsity) cells; every cell reuses the base data seed and model seeds."""
    model = model or cfg.model
    cells = []
    for n in lengths:
        for frac in fractions:
            c = copy.deepcopy(cfg)
            c.model = model
            c.data.n = int(n)
            c.data.sparsity = float(frac)
            c.name = f"{cfg.name}-n{n}-s{frac}"
            cell_dir = out_dir / f"n{n}_s{frac}" if out_dir is not None else None
            rep = run_training(c, cell_dir, workers)
            cells.append({"n": int(n), "sparsity": float(frac), "seeds": list(c.seeds),
                          "metric": rep["metric"], "mean": rep["mean"], "std": rep["std"],
                          "per_seed": [r["metrics"][rep["metric"]] for r in rep["per_seed"]],
                          "config_hash": rep["config_hash"]})
    grid = {"format_version": REPORT_VERSION, "kind": "sweep", "model": model,
            "lengths": [int(n) for n in lengths], "fractions": [float(f) for f in fractions],
            "cells": cells,
            "matrix": [[next(c["mean"] for c in cells if c["n"] == n and c["sparsity"] == f)
                        for f in fractions] for n in lengths]}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep.json").write_text(json.dumps(grid, indent=2))
    return grid


def load_model_checkpoint(path) -> tuple[ExperimentConfig, SequenceModel, PyramidSet | None]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing model checkpoint: {path}")
    payload = json.loads(path.read_text())
    cfg = ExperimentConfig.from_dict(payload["config"])
    data = prepare_data(cfg)
    seed = 0
    model = build_model(cfg, payload["model"], seed, data)
    stored = ParameterStore.from_dict(payload["params"])
    for name in model.store:
        model.store[name].data[...] = stored[name].data
    pyr_test = None
    if model.uses_pyramids:
        paths = payload.get("pyramid_paths") or [None, None]
        pyr_test = _load_required(paths[1], "test pyramids", PyramidSet.load)
    return cfg, model, pyr_test


def evaluate_checkpoint(path) -> dict:
    cfg, model, pyr_test = load_model_checkpoint(path)
    data = prepare_data(cfg)
    if pyr_test is not None and model.kind != "seqlink":
        # stored test pyramids hold the full pyramid; rebuild the variant view
        bank = TrajectoryBank.load(json.loads(Path(path).read_text())["bank_path"])
        stage = PyramidStage(pyr_test, pyr_test, ParameterStore(), [])
        _, pyr_test = variant_pyramids(model.kind, stage, bank, data)
    return evaluate(cfg, model, data.test, pyr_test)


def summarize(report: dict) -> str:
    if report.get("kind") == "sweep":
        head = "n \\ sparsity " + " ".join(f"{f:>8.2f}" for f in report["fractions"])
        lines = [head]
        for n, row in zip(report["lengths"], report["matrix"]):
            lines.append(f"{n:>12} " + " ".join(f"{v:8.4f}" for v in row))
        return "\n".join(lines)
    if report["mean"] is None:
        return f"{report['model']}: no successful seeds ({len(report['failed_seeds'])} failed)"
    std = report.get("std")
    std_txt = f" +/- {std:.4f}" if std is not None else ""
    flag = " (partial)" if report.get("partial") else ""
    return f"{report['model']}: {report['metric']} {report['mean']:.4f}{std_txt} over {len(report['per_seed'])} seeds{flag}"


def isfinite_report(report: dict) -> bool:
    return report["mean"] is not None and math.isfinite(report["mean"])
