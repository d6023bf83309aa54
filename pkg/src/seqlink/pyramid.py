"""Cross-sample attention and pyramidal sorting of bank trajectories.

For each query sample, a softmax over bank samples gives importance weights.
Pyramidal sorting then peels the candidates into levels by repeated
mean-splitting: the lowest level takes every remaining candidate whose weight
is at or below the mean of the remaining weights, and so on upward; the apex
(level L) keeps whatever is left. Each level is summarised by the mean of its
members' trajectories.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .autoencoder import TrajectoryBank
from .data import TimeSeriesBatch
from .diffcore import Array, ParameterStore
from .recurrent import observed_steps
from .training import History, substream, train_loop

PYRAMID_VERSION = 1


class PyramidError(ValueError):
    pass


# attention -----------------------------------------------------------------------

class AttentionScorer:
    """Score s(query, candidate) from time-aligned (value, trajectory) pairs.

    Values and trajectories are embedded separately, concatenated, and scored
    by a one-hidden-layer tanh network. Per-time scores are averaged over the
    query's observed time points.
    """

    def __init__(self, store: ParameterStore, data_dim: int, latent: int, embed: int = 16,
                 score_hidden: int = 16, rng: np.random.Generator | None = None, prefix: str = "attn"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.Wx = store.add(f"{prefix}.Wx", dc.uniform_init(rng, data_dim, (data_dim, embed)))
        self.bx = store.add(f"{prefix}.bx", np.zeros(embed))
        self.Wu = store.add(f"{prefix}.Wu", dc.uniform_init(rng, latent, (latent, embed)))
        self.bu = store.add(f"{prefix}.bu", np.zeros(embed))
        # concat(e_x, e_u) @ Ws is split into the two halves of Ws
        self.Ws_x = store.add(f"{prefix}.Ws_x", dc.uniform_init(rng, 2 * embed, (embed, score_hidden)))
        self.Ws_u = store.add(f"{prefix}.Ws_u", dc.uniform_init(rng, 2 * embed, (embed, score_hidden)))
        self.bs = store.add(f"{prefix}.bs", np.zeros(score_hidden))
        self.v = store.add(f"{prefix}.v", dc.uniform_init(rng, score_hidden, (score_hidden, 1)))

    def scores(self, x: np.ndarray, m: np.ndarray, traj) -> Array:
        """Raw pooled scores ``(Q, K)`` for queries ``x, m`` (Q, n, D) against ``traj`` (K, n, H)."""
        traj = dc.as_array(traj)
        if traj.shape[1] != x.shape[1]:
            raise dc.ShapeError("attention_scores", [x.shape, traj.shape])
        ex = dc.linear(x * m, self.Wx, self.bx)                       # (Q, n, E)
        eu = dc.linear(traj, self.Wu, self.bu)                        # (K, n, E)
        a = dc.matmul(ex, self.Ws_x)                                  # (Q, n, S)
        b = dc.add(dc.matmul(eu, self.Ws_u), self.bs)                 # (K, n, S)
        Q, n, S = a.shape
        hidden = dc.tanh(dc.add(dc.reshape(a, (Q, 1, n, S)), dc.reshape(b, (1, *b.shape))))
        per_time = dc.reshape(dc.matmul(hidden, self.v), (Q, b.shape[0], n))
        obs = observed_steps(m)
        weight = obs / np.maximum(obs.sum(axis=1, keepdims=True), 1.0)
        return dc.sum(dc.mul(per_time, weight[:, None, :]), axis=2)


@dataclass
class ImportanceMatrix:
    alpha: np.ndarray
    query_ids: np.ndarray
    bank_ids: np.ndarray
    allowed: np.ndarray


def candidate_mask(query_ids, bank_ids, exclude_self: bool) -> np.ndarray:
    query_ids, bank_ids = np.asarray(query_ids), np.asarray(bank_ids)
    if not exclude_self:
        return np.ones((len(query_ids), len(bank_ids)), dtype=bool)
    return query_ids[:, None] != bank_ids[None, :]


def importance_from_scores(scores, allowed: np.ndarray | None = None) -> Array:
    return dc.softmax(dc.as_array(scores), axis=-1, allowed=allowed)


def attention_scores(scorer: AttentionScorer, batch: TimeSeriesBatch, bank: TrajectoryBank,
                     exclude_self: bool = True, chunk: int = 20) -> ImportanceMatrix:
    """Importance weights of every bank sample for every sample in ``batch``."""
    if bank.K == 0:
        raise PyramidError("empty trajectory bank")
    allowed = candidate_mask(batch.ids, bank.sample_ids, exclude_self)
    rows = []
    for start in range(0, batch.K, chunk):
        sl = slice(start, start + chunk)
        raw = scorer.scores(batch.x[sl], batch.m[sl], bank.trajectories)
        rows.append(importance_from_scores(raw, allowed[sl]).data)
    return ImportanceMatrix(np.concatenate(rows), batch.ids.copy(), bank.sample_ids.copy(), allowed)


@dataclass
class AttentionConfig:
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 20
    embed: int = 16
    score_hidden: int = 16
    seed: int = 0


def fit_attention(batch: TimeSeriesBatch, bank: TrajectoryBank, decoded_bank: np.ndarray,
                  cfg: AttentionConfig) -> tuple[AttentionScorer, ParameterStore, History]:
    """Train the scorer so the importance-weighted mix of other samples' decoded
    trajectories reconstructs each query's observed values.

    ``decoded_bank`` (K, n, D) is the auto-encoder decoder applied to the bank.
    Queries never see their own bank entry.
    """
    store = ParameterStore()
    scorer = AttentionScorer(store, batch.D, bank.latent_dim, cfg.embed, cfg.score_hidden,
                             substream(cfg.seed, "init.attn"))
    allowed = candidate_mask(batch.ids, bank.sample_ids, exclude_self=True)
    K, n, D = decoded_bank.shape
    flat = decoded_bank.reshape(K, n * D)

    def loss_fn(index, rng):
        q = batch.subset(index)
        alpha = importance_from_scores(scorer.scores(q.x, q.m, bank.trajectories), allowed[index])
        mix = dc.reshape(dc.matmul(alpha, flat), (len(index), n, D))
        return dc.masked_mse(mix, q.x, q.m)

    hist = train_loop(store, loss_fn, batch.K, cfg.epochs, cfg.batch_size, cfg.lr,
                      substream(cfg.seed, "attn.shuffle"), label="attention")
    return scorer, store, hist


# pyramidal sorting -----------------------------------------------------------------

@dataclass
class PyramidLevels:
    """Levels of one query: ``members[j]`` are bank row indices of level j+1."""

    members: list[np.ndarray]
    trajectories: np.ndarray  # (L, n, H)


def sort_levels(alpha: np.ndarray, candidates: np.ndarray, L: int,
                as_printed: bool = False) -> list[np.ndarray]:
    """Split ``candidates`` (indices into ``alpha``) into ``L`` levels, lowest first.

    Default rule: at each level below the apex, take the remaining candidates
    whose weight is <= the mean weight of the remaining candidates; if that
    would take all of them (all equal), the level stays empty and they move
    up. The apex takes everything left, so it always holds the largest weight.

    ``as_printed=True`` follows the original listing literally: the mean
    divides by the total candidate count every time, all L levels use the
    same <= rule, and anything left after level L is dropped.
    """
    if L < 1:
        raise PyramidError("L must be >= 1")
    remaining = np.asarray(candidates, dtype=int)
    if L > remaining.size:
        raise PyramidError(f"L={L} exceeds the {remaining.size} available candidates")
    total = remaining.size
    levels = []
    for j in range(L):
        if as_printed:
            if remaining.size == 0:
                levels.append(remaining)
                continue
            mean_v = alpha[remaining].sum() / total
            take = alpha[remaining] <= mean_v
            levels.append(remaining[take])
            remaining = remaining[~take]
            continue
        if j == L - 1:
            levels.append(remaining)
            break
        if remaining.size == 0:
            levels.append(remaining)
            continue
        vals = alpha[remaining]
        take = vals <= vals.sum() / remaining.size
        if take.all():
            levels.append(remaining[:0])
        else:
            levels.append(remaining[take])
            remaining = remaining[~take]
    return levels


def level_trajectories(members: list[np.ndarray], traj: np.ndarray) -> np.ndarray:
    out = np.zeros((len(members), *traj.shape[1:]))
    for j, idx in enumerate(members):
        if idx.size:
            out[j] = traj[idx].mean(axis=0)
    return out


def pyramidal_sort(alpha_row: np.ndarray, bank: TrajectoryBank, L: int,
                   allowed: np.ndarray | None = None, as_printed: bool = False) -> PyramidLevels:
    alpha_row = np.asarray(alpha_row, dtype=float)
    allowed = np.ones(alpha_row.size, dtype=bool) if allowed is None else np.asarray(allowed, dtype=bool)
    members = sort_levels(alpha_row, np.flatnonzero(allowed), L, as_printed)
    return PyramidLevels(members, level_trajectories(members, bank.trajectories))


@dataclass
class PyramidSet:
    """Pyramids for a set of query samples over one bank."""

    L: int
    query_ids: np.ndarray
    bank_ids: np.ndarray
    members: list[list[np.ndarray]]      # per query, per level: bank row indices
    trajectories: np.ndarray              # (Q, L, n, H)
    weights: np.ndarray                   # (L,) initial level weights
    alpha: np.ndarray | None = None       # (Q, K_bank)
    format_version: int = PYRAMID_VERSION

    def subset(self, rows) -> "PyramidSet":
        rows = np.asarray(rows)
        return PyramidSet(self.L, self.query_ids[rows], self.bank_ids,
                          [self.members[r] for r in rows], self.trajectories[rows], self.weights,
                          None if self.alpha is None else self.alpha[rows])

    def for_ids(self, ids) -> "PyramidSet":
        where = {q: i for i, q in enumerate(self.query_ids.tolist())}
        try:
            rows = [where[i] for i in np.asarray(ids).tolist()]
        except KeyError as exc:
            raise PyramidError(f"no pyramid for sample {exc.args[0]!r}") from None
        return self.subset(rows)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "L": self.L,
            "weights": self.weights.tolist(),
            "bank_ids": self.bank_ids.tolist(),
            "samples": [
                {
                    "id": qid,
                    "levels": [
                        {"members": self.bank_ids[idx].tolist(), "bank_rows": idx.tolist(),
                         "trajectory": self.trajectories[q, j].tolist()}
                        for j, idx in enumerate(self.members[q])
                    ],
                    "alpha": None if self.alpha is None else self.alpha[q].tolist(),
                }
                for q, qid in enumerate(self.query_ids.tolist())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PyramidSet":
        if d.get("format_version") != PYRAMID_VERSION:
            raise PyramidError(f"unsupported pyramid format {d.get('format_version')!r}")
        samples = d["samples"]
        members = [[np.array(lv["bank_rows"], dtype=int) for lv in s["levels"]] for s in samples]
        traj = np.array([[lv["trajectory"] for lv in s["levels"]] for s in samples], dtype=float)
        alpha = None
        if samples and samples[0]["alpha"] is not None:
            alpha = np.array([s["alpha"] for s in samples], dtype=float)
        return cls(int(d["L"]), np.array([s["id"] for s in samples]), np.array(d["bank_ids"]),
                   members, traj, np.array(d["weights"], dtype=float), alpha)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PyramidSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def initial_level_weights(L: int) -> np.ndarray:
    return np.arange(1, L + 1) / L


def pyramids_from_alpha(imp: ImportanceMatrix, bank: TrajectoryBank, L: int,
                        as_printed: bool = False) -> PyramidSet:
    members, traj = [], []
    for q in range(imp.alpha.shape[0]):
        lv = pyramidal_sort(imp.alpha[q], bank, L, imp.allowed[q], as_printed)
        members.append(lv.members)
        traj.append(lv.trajectories)
    return PyramidSet(L, imp.query_ids, imp.bank_ids, members, np.array(traj),
                      initial_level_weights(L), imp.alpha)


def build_pyramids(batch: TimeSeriesBatch, bank: TrajectoryBank, scorer: AttentionScorer, L: int,
                   exclude_self: bool = True, as_printed: bool = False) -> PyramidSet:
    imp = attention_scores(scorer, batch, bank, exclude_self)
    return pyramids_from_alpha(imp, bank, L, as_printed)


# ablation variants ---------------------------------------------------------------------

def unified_pyramids(query_ids, bank: TrajectoryBank, exclude_self: bool = True) -> PyramidSet:
    """Single level holding every candidate: the attention stage is bypassed."""
    allowed = candidate_mask(query_ids, bank.sample_ids, exclude_self)
    flat = np.ones(bank.K)
    imp = ImportanceMatrix(np.tile(flat, (len(allowed), 1)), np.asarray(query_ids), bank.sample_ids, allowed)
    out = pyramids_from_alpha(imp, bank, 1)
    out.alpha = None
    return out


def select_level(pyr: PyramidSet, which: str) -> PyramidSet:
    """Keep only the apex (``"most"``) or the bottom level (``"least"``) as a one-level pyramid."""
    j = {"most": pyr.L - 1, "least": 0}[which]
    return PyramidSet(1, pyr.query_ids, pyr.bank_ids, [[m[j]] for m in pyr.members],
                      pyr.trajectories[:, j:j + 1].copy(), np.ones(1), pyr.alpha)
