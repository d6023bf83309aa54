"""Sequence models with an output head: RNN, ODE-RNN and Link-ODE (SeqLink)."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .data import TimeSeriesBatch
from .diffcore import Array, ParameterStore
from .linkode import LinkODE, link_ode_forward
from .odesolve import ODEDynamics
from .pyramid import PyramidSet
from .recurrent import RNN, GRUCell, ODERNN, OutputHead
from .training import substream

SEQLINK_KINDS = ("seqlink", "seqlink_unified", "seqlink_most", "seqlink_least")
KINDS = ("rnn", "ode_rnn", *SEQLINK_KINDS)


class SequenceModel:
    def __init__(self, kind: str, data_dim: int, out_dim: int, hidden: int = 10,
                 ode_hidden: tuple = (100,), substeps: int = 4, levels: int = 5, latent: int = 10,
                 task: str = "regression", seed: int = 0, gate_init: float = -3.0):
        if kind not in KINDS:
            raise ValueError(f"unknown model {kind!r}; expected one of {KINDS}")
        # separate streams so every model kind starts from the same own-path and head weights
        own = substream(seed, "init.model.own")
        self.kind = kind
        self.task = task
        self.store = ParameterStore()
        if kind == "rnn":
            self.encoder = RNN(GRUCell(self.store, "model.cell", hidden, [2 * data_dim], own))
        elif kind == "ode_rnn":
            dyn = ODEDynamics(self.store, "model.ode", hidden, ode_hidden, own)
            cell = GRUCell(self.store, "model.cell", hidden, [2 * data_dim], own)
            self.encoder = ODERNN(dyn, cell, substeps)
        else:
            # ablation variants see a single level
            L = levels if kind == "seqlink" else 1
            self.encoder = LinkODE(self.store, data_dim, hidden, L, latent, ode_hidden, substeps,
                                   substream(seed, "init.model.link"), gate_init=gate_init,
                                   own_rng=own)
        self.head = OutputHead(self.store, "model.head", hidden, out_dim, task, substream(seed, "init.model.head"))

    @property
    def uses_pyramids(self) -> bool:
        return self.kind in SEQLINK_KINDS

    def states(self, batch: TimeSeriesBatch, pyramids: PyramidSet | None = None) -> list[Array]:
        if self.uses_pyramids:
            if pyramids is None:
                raise ValueError(f"model {self.kind!r} needs pyramids")
            return link_ode_forward(self.encoder, batch.x, batch.m, batch.t, pyramids.for_ids(batch.ids))
        return self.encoder.forward(batch.x, batch.m, batch.t)

    def predict(self, batch: TimeSeriesBatch, pyramids: PyramidSet | None = None) -> np.ndarray:
        return self.head(self.states(batch, pyramids)[-1]).data.copy()

    def loss(self, batch: TimeSeriesBatch, pyramids: PyramidSet | None = None,
             step_weight: float = 0.0) -> Array:
        """Final-target loss, plus ``step_weight`` times a one-step-ahead loss on observed points."""
        states = self.states(batch, pyramids)
        out = self.head(states[-1])
        if self.task == "classification":
            return dc.binary_cross_entropy(out, batch.target)
        loss = dc.mse(out, batch.target)
        if step_weight > 0 and batch.n > 1 and out.shape[1] == batch.D:
            steps = self.head(dc.stack(states[:-1], axis=1))
            mask = batch.m[:, 1:]
            if mask.sum() > 0:
                loss = dc.add(loss, dc.mul(dc.masked_mse(steps, batch.x[:, 1:], mask), step_weight))
        return loss
