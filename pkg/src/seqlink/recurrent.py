"""GRU cell, ODE-RNN recursion, plain RNN baseline and output heads.

All recursions are batched over samples: states are ``(B, H)`` arrays and a
sequence is given as values ``x`` and mask ``m`` of shape ``(B, n, D)`` on a
shared time grid ``t`` of length ``n``.

The cell never sees raw values: its observation input is ``concat(x*m, m)``,
so an unobserved entry cannot influence any state. A time step counts as
observed for a sample when any of its features is observed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Array, ParameterStore
from .odesolve import DivergenceError, ODEDynamics, SolveRequest, integrate_fixed, solve


def observation_features(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    return np.concatenate([x * m, m], axis=-1)


def observed_steps(m: np.ndarray) -> np.ndarray:
    """(B, n) float indicator: 1 where at least one feature is observed."""
    return (m.max(axis=-1) > 0).astype(float)


class GRUCell:
    """Gated recurrent cell taking one or more input blocks.

    Each input block gets its own weight matrix; summing the per-block products
    is the same map as one matrix applied to the concatenated inputs. Keeping
    blocks separate means an all-zero block adds exact zeros.
    """

    def __init__(self, store: ParameterStore, prefix: str, hidden: int,
                 input_sizes: Sequence[int], rng: np.random.Generator | None = None,
                 fan_in: int | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        self.input_sizes = list(input_sizes)
        fan_in = fan_in if fan_in is not None else hidden + sum(self.input_sizes)
        self.U = store.add(f"{prefix}.U", dc.uniform_init(rng, fan_in, (hidden, 3 * hidden)))
        self.b = store.add(f"{prefix}.b", np.zeros(3 * hidden))
        self.W = [store.add(f"{prefix}.W{j}", dc.uniform_init(rng, fan_in, (d, 3 * hidden)))
                  for j, d in enumerate(self.input_sizes)]

    def __call__(self, h: Array, inputs: Sequence) -> Array:
        if len(inputs) != len(self.W):
            raise dc.ShapeError("gru_cell", [tuple(np.shape(getattr(x, "data", x))) for x in inputs])
        H = self.hidden
        gx = dc.add(dc.matmul(inputs[0], self.W[0]), self.b)
        for x, w in zip(inputs[1:], self.W[1:]):
            gx = dc.add(gx, dc.matmul(x, w))
        gh = dc.matmul(h, self.U)
        zr = dc.sigmoid(dc.add(gx[..., : 2 * H], gh[..., : 2 * H]))
        z = zr[..., :H]
        r = zr[..., H:]
        cand = dc.tanh(dc.add(gx[..., 2 * H:], dc.mul(r, gh[..., 2 * H:])))
        # h' = (1 - z) * cand + z * h
        return dc.add(cand, dc.mul(z, dc.sub(h, cand)))


@dataclass
class HiddenState:
    value: Array
    time: float


def cell_update(cell: GRUCell, h: HiddenState, x) -> HiddenState:
    """Instantaneous update at an observation; the time is unchanged."""
    return HiddenState(cell(h.value, [x]), h.time)


def _blend(obs: np.ndarray, updated: Array, carried: Array) -> Array:
    """Per-sample select: ``updated`` where obs == 1, else ``carried``."""
    if obs.all():
        return updated
    if not obs.any():
        return carried
    w = obs[:, None]
    return dc.add(dc.mul(updated, w), dc.mul(carried, 1.0 - w))


class ODERNN:
    """h_i = cell(ODE-evolved h_{i-1}, x_i) if observed, else the ODE-evolved state."""

    def __init__(self, dynamics: ODEDynamics, cell: GRUCell, substeps: int = 4,
                 method: str = "rk4", rtol: float = 1e-3, atol: float = 1e-4):
        self.dynamics = dynamics
        self.cell = cell
        self.substeps = substeps
        self.method = method
        self.rtol = rtol
        self.atol = atol

    @property
    def hidden(self) -> int:
        return self.cell.hidden

    def _advance(self, h: Array, t0: float, t1: float) -> Array:
        if self.method == "dopri5":
            return solve(SolveRequest(self.dynamics, h, [t0, t1], "dopri5", self.rtol, self.atol)).states[-1]
        return integrate_fixed(self.dynamics, h, t0, t1, self.substeps, self.method)

    def evolve(self, h: Array, t0: float, t1: float) -> Array:
        try:
            return self._advance(h, t0, t1)
        except (dc.NumericOverflowError, DivergenceError) as exc:
            raise DivergenceError(t0, self._first_bad_row(h.data, t0, t1)) from exc

    def _first_bad_row(self, h: np.ndarray, t0: float, t1: float) -> int | None:
        if h.ndim != 2:
            return None
        for r in range(h.shape[0]):
            try:
                self._advance(Array(h[r:r + 1]), t0, t1)
            except (dc.NumericOverflowError, DivergenceError):
                return r
        return None

    def forward(self, x: np.ndarray, m: np.ndarray, t: np.ndarray) -> list[Array]:
        """Hidden states at every grid time, one ``(B, H)`` array per index."""
        B, n, _ = x.shape
        feats = observation_features(x, m)
        obs = observed_steps(m)
        h = Array(np.zeros((B, self.hidden)))
        states = []
        for i in range(n):
            if i > 0:
                h = self.evolve(h, float(t[i - 1]), float(t[i]))
            if obs[:, i].any():
                h = _blend(obs[:, i], self.cell(h, [feats[:, i]]), h)
            states.append(h)
        return states


class RNN:
    """Plain recurrent baseline: the cell runs at every grid step on zero-filled inputs."""

    def __init__(self, cell: GRUCell):
        self.cell = cell

    @property
    def hidden(self) -> int:
        return self.cell.hidden

    def forward(self, x: np.ndarray, m: np.ndarray, t: np.ndarray) -> list[Array]:
        B, n, _ = x.shape
        feats = observation_features(x, m)
        h = Array(np.zeros((B, self.hidden)))
        states = []
        for i in range(n):
            h = self.cell(h, [feats[:, i]])
            states.append(h)
        return states


def ode_rnn_forward(dynamics: ODEDynamics, cell: GRUCell, x, m, t, substeps: int = 4) -> list[Array]:
    return ODERNN(dynamics, cell, substeps).forward(x, m, t)


class OutputHead:
    TASKS = ("regression", "classification")

    def __init__(self, store: ParameterStore, prefix: str, hidden: int, out_dim: int,
                 task: str = "regression", rng: np.random.Generator | None = None):
        if task not in self.TASKS:
            raise ValueError(f"unknown task {task!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.task = task
        self.W = store.add(f"{prefix}.W", dc.uniform_init(rng, hidden, (hidden, out_dim)))
        self.b = store.add(f"{prefix}.b", np.zeros(out_dim))

    def __call__(self, h: Array) -> Array:
        out = dc.linear(h, self.W, self.b)
        return dc.sigmoid(out) if self.task == "classification" else out


def predict(head: OutputHead, h) -> Array:
    value = h.value if isinstance(h, HiddenState) else dc.as_array(h)
    return head(value)
