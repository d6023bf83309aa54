"""ODE auto-encoder that produces the frozen trajectory bank.

Inputs are corrupted with ``cut_out``, encoded with an ODE-RNN, decoded per
time point by one affine layer and compared against the uncorrupted values on
every originally observed position.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import TimeSeriesBatch
from .diffcore import Array, ParameterStore
from .odesolve import ODEDynamics
from .recurrent import GRUCell, ODERNN, observed_steps
from .training import History, substream, train_loop

BANK_VERSION = 1


@dataclass
class CorruptionPlan:
    removal_count: int
    removed: list[np.ndarray]
    seed: int


def cut_out(batch: TimeSeriesBatch, removal_count: int, seed: int) -> tuple[TimeSeriesBatch, CorruptionPlan]:
    """Remove ``removal_count`` observed time points per sample (value and mask set to 0)."""
    obs = observed_steps(batch.m) > 0
    rng = np.random.default_rng(seed)
    keep = np.ones((batch.K, batch.n, 1))
    removed = []
    for k in range(batch.K):
        candidates = np.flatnonzero(obs[k])
        if removal_count > candidates.size:
            raise ValueError(f"sample {batch.ids[k]} has {candidates.size} observed points; "
                             f"cannot remove {removal_count}")
        idx = np.sort(rng.choice(candidates, size=removal_count, replace=False))
        keep[k, idx] = 0.0
        removed.append(idx)
    if removal_count == 0:
        out = batch.replace()
    else:
        out = batch.replace(x=batch.x * keep, m=batch.m * keep)
    return out, CorruptionPlan(removal_count, removed, seed)


@dataclass
class TrajectoryBank:
    """Per-sample latent trajectories ``(K, n, latent_dim)`` on the training grid."""

    trajectories: np.ndarray
    sample_ids: np.ndarray
    time_grid: np.ndarray
    format_version: int = BANK_VERSION

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=float)
        self.sample_ids = np.asarray(self.sample_ids)
        self.time_grid = np.asarray(self.time_grid, dtype=float)
        if self.trajectories.ndim != 3 or self.trajectories.shape[:2] != (len(self.sample_ids), len(self.time_grid)):
            raise ValueError(f"trajectory shape {self.trajectories.shape} does not match ids/grid")
        if not np.isfinite(self.trajectories).all():
            raise ValueError("trajectory bank contains non-finite values")

    @property
    def K(self) -> int:
        return self.trajectories.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.trajectories.shape[2]

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "sample_ids": self.sample_ids.tolist(),
            "time_grid": self.time_grid.tolist(),
            "latent_dim": self.latent_dim,
            "trajectories": self.trajectories.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryBank":
        if d.get("format_version") != BANK_VERSION:
            raise ValueError(f"unsupported bank format {d.get('format_version')!r}")
        traj = np.array(d["trajectories"], dtype=float).reshape(
            len(d["sample_ids"]), len(d["time_grid"]), d["latent_dim"])
        return cls(traj, np.array(d["sample_ids"]), np.array(d["time_grid"], dtype=float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TrajectoryBank":
        return cls.from_dict(json.loads(Path(path).read_text()))


class ODEAutoEncoder:
    def __init__(self, store: ParameterStore, data_dim: int, latent: int = 10,
                 ode_hidden: tuple = (100,), substeps: int = 4, seed: int = 0, prefix: str = "ae"):
        rng = substream(seed, f"init.{prefix}")
        self.store = store
        self.dynamics = ODEDynamics(store, f"{prefix}.ode", latent, ode_hidden, rng)
        self.cell = GRUCell(store, f"{prefix}.cell", latent, [2 * data_dim], rng)
        self.encoder = ODERNN(self.dynamics, self.cell, substeps)
        self.dec_W = store.add(f"{prefix}.dec.W", dc.uniform_init(rng, latent, (latent, data_dim)))
        self.dec_b = store.add(f"{prefix}.dec.b", np.zeros(data_dim))

    def encode(self, batch: TimeSeriesBatch) -> Array:
        """Latent trajectory ``(K, n, latent)`` at every grid index."""
        return dc.stack(self.encoder.forward(batch.x, batch.m, batch.t), axis=1)

    def decode(self, u: Array) -> Array:
        return dc.linear(u, self.dec_W, self.dec_b)

    def reconstruction_loss(self, corrupted: TimeSeriesBatch, original: TimeSeriesBatch) -> Array:
        y = self.decode(self.encode(corrupted))
        return dc.masked_mse(y, original.x, original.m)


@dataclass
class AEConfig:
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 20
    latent: int = 10
    ode_hidden: tuple = (100,)
    substeps: int = 4
    removal_fraction: float = 0.2
    seed: int = 0


@dataclass
class AEResult:
    bank: TrajectoryBank
    final_loss: float
    history: History
    model: ODEAutoEncoder
    warnings: list = field(default_factory=list)


def default_removal_count(batch: TimeSeriesBatch, fraction: float) -> int:
    observed = observed_steps(batch.m).sum(axis=1)
    return int(np.floor(fraction * observed.min() + 1e-9))


def train_autoencoder(batch: TimeSeriesBatch, cfg: AEConfig) -> AEResult:
    """Fit the auto-encoder on ``batch`` and freeze the clean-input encodings into a bank."""
    store = ParameterStore()
    model = ODEAutoEncoder(store, batch.D, cfg.latent, tuple(cfg.ode_hidden), cfg.substeps, cfg.seed)
    count = default_removal_count(batch, cfg.removal_fraction)

    def loss_fn(index, rng):
        original = batch.subset(index)
        corrupted, _ = cut_out(original, count, int(rng.integers(2**31)))
        return model.reconstruction_loss(corrupted, original)

    hist = train_loop(store, loss_fn, batch.K, cfg.epochs, cfg.batch_size, cfg.lr,
                      substream(cfg.seed, "ae.shuffle"), label="autoencoder")
    bank = TrajectoryBank(model.encode(batch).data.copy(), batch.ids.copy(), batch.t.copy())
    final = float(model.reconstruction_loss(batch, batch).data)
    return AEResult(bank, final, hist, model, list(hist.warnings))
