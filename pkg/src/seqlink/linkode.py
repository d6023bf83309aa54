"""Link-ODE recurrence: own ODE-evolved state plus pyramid context from related samples.

Between grid points the sample's own state is evolved by the ODE. The level
context at grid time i is ``p = [w_1 * l_1(t_i), ..., w_L * l_L(t_i)]`` and it
enters both branches through one scalar gate ``c = sigmoid(g)``:

* observed step: ``h = cell(h_ode, inputs=[obs_features, c * flat(p)])``
* unobserved step: ``h = h_ode + (c * flat(p)) @ W_gap``

With zero level weights the cross path contributes exact zeros and the
recursion is bit-for-bit the ODE-RNN one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Array, ParameterStore
from .odesolve import ODEDynamics
from .pyramid import PyramidSet, initial_level_weights
from .recurrent import GRUCell, ODERNN, _blend, observation_features, observed_steps


class LinkError(ValueError):
    pass


@dataclass
class LevelContext:
    p: Array  # (B, L, H_u), or (L, H_u) for a single sample

    @property
    def flat(self) -> Array:
        *lead, L, H = self.p.shape
        return dc.reshape(self.p, (*lead, L * H))


def level_combine(level_traj, weights, time_index: int) -> LevelContext:
    """Weighted level slices at one grid index.

    ``level_traj`` is (L, n, H) for one sample or (B, L, n, H) for a batch;
    empty levels carry zero trajectories, so their rows stay zero.
    """
    traj = np.asarray(getattr(level_traj, "data", level_traj))
    single = traj.ndim == 3
    if single:
        traj = traj[None]
    if not 0 <= time_index < traj.shape[2]:
        raise LinkError(f"time index {time_index} outside grid of length {traj.shape[2]}")
    w = dc.as_array(weights)
    p = dc.mul(traj[:, :, time_index, :], dc.reshape(w, (1, w.shape[0], 1)))
    if single:
        p = p[0]
    return LevelContext(p)


class LinkODE:
    """Own-state ODE-RNN path plus a gated cross-sample context path.

    ``own_rng`` draws the dynamics and the cell weights with the fan-in of a
    plain ODE-RNN cell, so both models can start from identical own-path
    weights. The gate starts near zero, so early training behaves like an
    ODE-RNN while the context weights warm up.
    """

    def __init__(self, store: ParameterStore, data_dim: int, hidden: int, levels: int, latent: int,
                 ode_hidden: tuple = (100,), substeps: int = 4, rng: np.random.Generator | None = None,
                 prefix: str = "model", gate_init: float = -3.0,
                 own_rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        own_rng = own_rng if own_rng is not None else rng
        self.levels = levels
        self.latent = latent
        self.dynamics = ODEDynamics(store, f"{prefix}.ode", hidden, ode_hidden, own_rng)
        self.cell = GRUCell(store, f"{prefix}.cell", hidden, [2 * data_dim, levels * latent], own_rng,
                            fan_in=hidden + 2 * data_dim)
        self.ode_rnn = ODERNN(self.dynamics, self.cell, substeps)
        self.w = store.add(f"{prefix}.levels.w", initial_level_weights(levels))
        self.W_gap = store.add(f"{prefix}.gap.W", dc.uniform_init(rng, levels * latent, (levels * latent, hidden)))
        self.g_gap = store.add(f"{prefix}.gap.g", np.array([gate_init]))

    @property
    def hidden(self) -> int:
        return self.cell.hidden

    def forward(self, x: np.ndarray, m: np.ndarray, t: np.ndarray, level_traj: np.ndarray) -> list[Array]:
        B, n, _ = x.shape
        if level_traj.shape[:3] != (B, self.levels, n) or level_traj.shape[3] != self.latent:
            raise LinkError(f"pyramid trajectories {level_traj.shape} do not match batch "
                            f"({B}, L={self.levels}, n={n}, H_u={self.latent})")
        feats = observation_features(x, m)
        obs = observed_steps(m)
        gate = dc.sigmoid(self.g_gap)
        h = Array(np.zeros((B, self.hidden)))
        states = []
        for i in range(n):
            if i > 0:
                h = self.ode_rnn.evolve(h, float(t[i - 1]), float(t[i]))
            p = dc.mul(gate, level_combine(level_traj, self.w, i).flat)
            gap_state = None
            if not obs[:, i].all():
                gap_state = dc.add(h, dc.matmul(p, self.W_gap))
            if obs[:, i].any():
                h = _blend(obs[:, i], self.cell(h, [feats[:, i], p]), gap_state)
            else:
                h = gap_state
            states.append(h)
        return states


def link_ode_forward(model: LinkODE, x, m, t, pyramids: PyramidSet) -> list[Array]:
    if pyramids.L != model.levels:
        raise LinkError(f"pyramid has L={pyramids.L}, model expects {model.levels}")
    if pyramids.trajectories.shape[2] != len(t):
        raise LinkError("pyramid and batch time grids differ")
    return model.forward(x, m, t, pyramids.trajectories)
