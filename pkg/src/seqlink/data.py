"""Irregular time series batches: synthetic generator, sparsity, CSV ingestion,
(0, 1) scaling and shuffled splits."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class DataError(ValueError):
    pass


class CSVParseError(DataError):
    def __init__(self, line: int | None, message: str):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass
class TimeSeriesBatch:
    """Values ``x`` and mask ``m`` of shape (K, n, D) on a shared grid ``t`` (n,).

    ``target`` is (K, D_out) or None. Values under a zero mask are forced to 0.
    """

    x: np.ndarray
    m: np.ndarray
    t: np.ndarray
    target: np.ndarray | None = None
    ids: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.m = np.asarray(self.m, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if self.x.ndim != 3 or self.x.shape != self.m.shape:
            raise DataError(f"x and m must share a (K, n, D) shape, got {self.x.shape} and {self.m.shape}")
        if self.t.shape != (self.x.shape[1],):
            raise DataError(f"time grid has shape {self.t.shape}, expected ({self.x.shape[1]},)")
        if not np.isin(self.m, (0.0, 1.0)).all():
            raise DataError("mask must be binary")
        if self.t.size > 1 and not np.all(np.diff(self.t) > 0):
            raise DataError("time grid must be strictly ascending")
        self.x = np.where(self.m == 0, 0.0, self.x)
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=float)
            if self.target.ndim == 1:
                self.target = self.target[:, None]
            if self.target.shape[0] != self.K:
                raise DataError("target must have one row per sample")
        if self.ids is None:
            self.ids = np.arange(self.K)
        self.ids = np.asarray(self.ids)

    @property
    def K(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def D(self) -> int:
        return self.x.shape[2]

    def subset(self, index) -> "TimeSeriesBatch":
        index = np.asarray(index)
        return TimeSeriesBatch(self.x[index], self.m[index], self.t,
                               None if self.target is None else self.target[index],
                               self.ids[index], dict(self.params))

    def replace(self, **kw) -> "TimeSeriesBatch":
        fields = dict(x=self.x, m=self.m, t=self.t, target=self.target, ids=self.ids,
                      params=dict(self.params))
        fields.update(kw)
        return TimeSeriesBatch(**fields)

    def check_mask_coupling(self) -> None:
        if np.any(self.x[self.m == 0] != 0):
            raise DataError("value present where mask is zero")

    def save(self, path) -> None:
        np.savez(path, x=self.x, m=self.m, t=self.t, ids=self.ids,
                 target=np.array([]) if self.target is None else self.target,
                 has_target=self.target is not None)

    @classmethod
    def load(cls, path) -> "TimeSeriesBatch":
        with np.load(path, allow_pickle=False) as z:
            target = z["target"] if bool(z["has_target"]) else None
            return cls(z["x"], z["m"], z["t"], target, z["ids"])


@dataclass
class DatasetManifest:
    source: str
    K: int
    n: int
    D: int
    sparsity: float = 0.0
    seed: int = 0
    gap_pattern: str = "contiguous"
    lower: list | None = None
    upper: list | None = None
    warnings: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls(**json.loads(Path(path).read_text()))


# synthetic data ------------------------------------------------------------------

def generate_gaussian_periodic(K: int, n: int, seed: int, D: int = 1, cycles: float = 4.0,
                               noise: float = 0.1, span: float = 10.0) -> TimeSeriesBatch:
    """Noisy sinusoids whose amplitude, frequency and phase come from N(0, 1) draws.

    For sample k and feature d: ``a*sin(2*pi*f*s + phi) + noise*eps`` with
    ``a = exp(0.25 z_a)``, ``f = cycles*exp(0.25 z_f)`` cycles per window,
    ``phi = pi*z_phi`` and ``s`` the position in the window. The target is the
    next point after the window. The grid spans ``[0, span)``.
    """
    if K < 1 or n < 1:
        raise DataError("K and n must be positive")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((3, K, 1, D))
    amp = np.exp(0.25 * z[0])
    freq = cycles * np.exp(0.25 * z[1])
    phase = np.pi * z[2]
    s = (np.arange(n + 1) / n)[None, :, None]
    full = amp * np.sin(2 * np.pi * freq * s + phase)
    full = full + noise * rng.standard_normal(full.shape)
    t = np.arange(n) * (span / n)
    params = {"z_amplitude": z[0].ravel().tolist(), "z_frequency": z[1].ravel().tolist(),
              "z_phase": z[2].ravel().tolist()}
    return TimeSeriesBatch(full[:, :n], np.ones((K, n, D)), t, full[:, n], np.arange(K), params)


def _composition(rng: np.random.Generator, total: int, parts: int, minimum: int) -> np.ndarray:
    """Random split of ``total`` into ``parts`` integers each >= ``minimum``."""
    free = total - parts * minimum
    bars = np.sort(rng.choice(free + parts - 1, size=parts - 1, replace=False))
    edges = np.concatenate([[-1], bars, [free + parts - 1]])
    return np.diff(edges) - 1 + minimum


def _contiguous_gaps(rng: np.random.Generator, n: int, removed: int, mean_run: int) -> np.ndarray:
    kept = n - removed
    runs = max(1, min(math.ceil(removed / mean_run), kept + 1))
    run_lengths = _composition(rng, removed, runs, 1)
    # inner gaps between runs hold at least one observed point so runs stay distinct
    inner = _composition(rng, kept - (runs - 1), runs + 1, 0)
    inner[1:-1] += 1
    out = np.zeros(n, dtype=bool)
    pos = 0
    for j in range(runs):
        pos += inner[j]
        out[pos:pos + run_lengths[j]] = True
        pos += run_lengths[j]
    return out


def removal_count(n: int, fraction: float) -> int:
    # guard against 0.3 * 100 = 30.000000000000004 style float noise
    return int(math.floor(fraction * n + 1e-9))


def apply_sparsity(batch: TimeSeriesBatch, fraction: float, seed: int,
                   pattern: str = "contiguous", mean_run: int = 5) -> TimeSeriesBatch:
    """Zero ``floor(fraction*n)`` time points per sample in both ``x`` and ``m``.

    ``pattern="contiguous"`` removes runs (intermittent gaps, mean length
    ``mean_run``); ``pattern="iid"`` removes isolated random points.
    """
    if not 0.0 <= fraction < 1.0:
        raise DataError(f"sparsity fraction must lie in [0, 1), got {fraction}")
    if pattern not in ("contiguous", "iid"):
        raise DataError(f"unknown gap pattern {pattern!r}")
    removed = removal_count(batch.n, fraction)
    if removed == 0:
        return batch.replace()
    rng = np.random.default_rng(seed)
    drop = np.zeros((batch.K, batch.n), dtype=bool)
    for k in range(batch.K):
        if pattern == "contiguous":
            drop[k] = _contiguous_gaps(rng, batch.n, removed, mean_run)
        else:
            drop[k, rng.choice(batch.n, size=removed, replace=False)] = True
    keep = (~drop)[:, :, None].astype(float)
    out = batch.replace(x=batch.x * keep, m=batch.m * keep)
    out.check_mask_coupling()
    return out


# CSV ingestion ---------------------------------------------------------------------

def load_csv(path) -> TimeSeriesBatch:
    """Parse ``series_id,time,value_1..value_D[,mask_1..mask_D][,target]``.

    Rows may come in any order. Series are aligned on the union of their time
    stamps; a time missing from a series is unobserved there. Without mask
    columns every listed value counts as observed.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CSVParseError(None, "no data rows") from None
        rows = [(reader.line_num, row) for row in reader if any(c.strip() for c in row)]
    if not rows:
        raise CSVParseError(None, "no data rows")
    for required in ("series_id", "time"):
        if required not in header:
            raise CSVParseError(1, f"missing column {required!r}")
    value_cols = sorted((h for h in header if h.startswith("value_")), key=lambda h: int(h[6:]))
    if not value_cols:
        raise CSVParseError(1, "missing value_1..value_D columns")
    D = len(value_cols)
    mask_cols = [f"mask_{d + 1}" for d in range(D)]
    has_mask = all(c in header for c in mask_cols)
    if any(h.startswith("mask_") for h in header) and not has_mask:
        raise CSVParseError(1, f"mask columns must be exactly {mask_cols}")
    has_target = "target" in header
    col = {h: j for j, h in enumerate(header)}

    def number(line, row, name):
        try:
            value = float(row[col[name]])
        except (ValueError, IndexError):
            raise CSVParseError(line, f"non-numeric or missing value in column {name!r}") from None
        if not math.isfinite(value):
            raise CSVParseError(line, f"non-finite value in column {name!r}")
        return value

    series: dict[str, dict[float, tuple]] = {}
    targets: dict[str, float] = {}
    for line, row in rows:
        if len(row) != len(header):
            raise CSVParseError(line, f"expected {len(header)} fields, got {len(row)}")
        sid = row[col["series_id"]].strip()
        t = number(line, row, "time")
        vals = [number(line, row, c) for c in value_cols]
        mask = [number(line, row, c) for c in mask_cols] if has_mask else [1.0] * D
        if any(v not in (0.0, 1.0) for v in mask):
            raise CSVParseError(line, "mask values must be 0 or 1")
        entries = series.setdefault(sid, {})
        if t in entries:
            raise CSVParseError(line, f"duplicated time {t!r} in series {sid!r}")
        entries[t] = (vals, mask)
        if has_target and row[col["target"]].strip():
            tv = number(line, row, "target")
            if sid in targets and targets[sid] != tv:
                raise CSVParseError(line, f"conflicting target for series {sid!r}")
            targets[sid] = tv
    grid = np.array(sorted({t for entries in series.values() for t in entries}))
    where = {t: i for i, t in enumerate(grid)}
    ids = list(series)
    x = np.zeros((len(ids), grid.size, D))
    m = np.zeros_like(x)
    for k, sid in enumerate(ids):
        for t, (vals, mask) in series[sid].items():
            x[k, where[t]] = vals
            m[k, where[t]] = mask
    target = None
    if has_target:
        missing = [s for s in ids if s not in targets]
        if missing:
            raise CSVParseError(None, f"no target for series {missing[0]!r}")
        target = np.array([[targets[s]] for s in ids])
    return TimeSeriesBatch(x, m, grid, target, np.array(ids))


# scaling and splitting -------------------------------------------------------------

@dataclass
class Normalizer:
    lower: np.ndarray
    upper: np.ndarray
    constant: np.ndarray

    @classmethod
    def fit(cls, batch: TimeSeriesBatch) -> "Normalizer":
        D = batch.D
        lower, upper = np.zeros(D), np.ones(D)
        for d in range(D):
            seen = batch.x[:, :, d][batch.m[:, :, d] > 0]
            if seen.size == 0:
                raise DataError(f"feature {d} has no observed values")
            lower[d], upper[d] = seen.min(), seen.max()
        constant = upper == lower
        for d in np.where(constant)[0]:
            warnings.warn(f"feature {d} is constant; mapped to 0.5", RuntimeWarning, stacklevel=2)
        return cls(lower, upper, constant)

    def _scale(self, values: np.ndarray) -> np.ndarray:
        width = np.where(self.constant, 1.0, self.upper - self.lower)
        return np.where(self.constant, 0.5, (values - self.lower) / width)

    def invert(self, values: np.ndarray) -> np.ndarray:
        width = np.where(self.constant, 0.0, self.upper - self.lower)
        return np.where(self.constant, self.lower, values * width + self.lower)

    def apply(self, batch: TimeSeriesBatch, scale_target: bool = True) -> TimeSeriesBatch:
        x = np.where(batch.m > 0, self._scale(batch.x), 0.0)
        target = batch.target
        if scale_target and target is not None and target.shape[1] == batch.D:
            target = self._scale(target)
        return batch.replace(x=x, target=target)


def normalize_01(batch: TimeSeriesBatch, fit_on: TimeSeriesBatch | None = None,
                 scale_target: bool = True) -> tuple[TimeSeriesBatch, Normalizer]:
    """Map observed values to [0, 1] with per-feature bounds from ``fit_on`` (default: ``batch``)."""
    norm = Normalizer.fit(fit_on if fit_on is not None else batch)
    return norm.apply(batch, scale_target), norm


def split_shuffled(batch: TimeSeriesBatch, train_fraction: float = 0.8,
                   seed: int = 0) -> tuple[TimeSeriesBatch, TimeSeriesBatch]:
    if batch.K < 2:
        raise DataError("need at least two samples to split")
    order = np.random.default_rng(seed).permutation(batch.K)
    n_train = int(math.floor(train_fraction * batch.K + 1e-9))
    return batch.subset(np.sort(order[:n_train])), batch.subset(np.sort(order[n_train:]))
