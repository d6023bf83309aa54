"""Minibatch Adam loop shared by every trainable stage."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Array, ParameterStore

log = logging.getLogger(__name__)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible generator for one named use of a run seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class History:
    epoch_loss: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def train_loop(store: ParameterStore, loss_fn: Callable[[np.ndarray, np.random.Generator], Array],
               n_samples: int, epochs: int, batch_size: int, lr: float,
               rng: np.random.Generator, names: Sequence[str] | None = None,
               label: str = "train") -> History:
    """Run ``epochs`` passes of shuffled minibatches; ``loss_fn(index, rng)`` builds the loss.

    The epoch loss is the sample-weighted mean of batch losses. A non-finite
    loss raises :class:`NonFiniteLoss`.
    """
    hist = History()
    for epoch in range(epochs):
        order = rng.permutation(n_samples)
        total, count = 0.0, 0
        for start in range(0, n_samples, batch_size):
            index = np.sort(order[start:start + batch_size])
            store.zero_grad()
            with dc.Tape() as tape:
                try:
                    loss = loss_fn(index, rng)
                except dc.NumericOverflowError as exc:
                    raise NonFiniteLoss(f"{label}: non-finite value in epoch {epoch + 1}") from exc
            if not math.isfinite(float(loss.data)):
                raise NonFiniteLoss(f"{label}: non-finite loss in epoch {epoch + 1}")
            tape.backward(loss)
            dc.adam_step(store, lr=lr, names=names)
            total += float(loss.data) * len(index)
            count += len(index)
        hist.epoch_loss.append(total / count)
        log.debug("%s epoch %d loss %.6f", label, epoch + 1, hist.epoch_loss[-1])
    if len(hist.epoch_loss) > 1 and hist.epoch_loss[-1] >= hist.epoch_loss[0]:
        hist.warnings.append(f"{label}: loss did not decrease over the run")
    return hist
