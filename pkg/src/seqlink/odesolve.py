"""ODE integration for learned dynamics dh/dt = f(h, t).

Fixed-step Euler and RK4 are built from differentiable primitives, so a solve
run under a :class:`~seqlink.diffcore.Tape` can be backpropagated step by
step. Dopri5 uses the same primitives but is meant for inference and
validation; its accepted/rejected step sizes are logged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Array, ParameterStore

Dynamics = Callable[[Array, float], Array]


class SolverError(RuntimeError):
    pass


class NonConvergenceError(SolverError):
    def __init__(self, last_time: float, steps: int):
        self.last_time = last_time
        self.steps = steps
        super().__init__(f"max_steps={steps} exceeded; last time reached {last_time!r}")


class DivergenceError(SolverError):
    def __init__(self, time: float, sample: int | None = None):
        self.time = time
        self.sample = sample
        where = f" (sample {sample})" if sample is not None else ""
        super().__init__(f"non-finite state near t={time!r}{where}")


class ODEDynamics:
    """MLP vector field with tanh hidden layers; autonomous (ignores t)."""

    def __init__(self, store: ParameterStore, prefix: str, dim: int,
                 hidden: Sequence[int] = (100,), rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.prefix = prefix
        self.layers: list[tuple[Array, Array]] = []
        sizes = [dim, *hidden, dim]
        for j, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = store.add(f"{prefix}.W{j}", dc.uniform_init(rng, a, (a, b)))
            bias = store.add(f"{prefix}.b{j}", np.zeros(b))
            self.layers.append((w, bias))

    @property
    def param_names(self) -> list[str]:
        return [p.name for layer in self.layers for p in layer]

    def __call__(self, h: Array, t: float = 0.0) -> Array:
        out = h
        last = len(self.layers) - 1
        for j, (w, b) in enumerate(self.layers):
            out = dc.linear(out, w, b)
            if j < last:
                out = dc.tanh(out)
        return out


@dataclass
class SolveRequest:
    dynamics: Dynamics
    h0: Array
    output_times: Sequence[float]
    method: str = "rk4"
    rtol: float = 1e-3
    atol: float = 1e-4
    max_steps: int = 100_000
    substeps: int = 4

    def __post_init__(self):
        times = np.asarray(self.output_times, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise ValueError("output_times must be a non-empty 1-d sequence")
        diffs = np.diff(times)
        # descending grids are accepted so a solve can be run backwards in time
        if diffs.size and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("output_times must be strictly monotone")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps <= 0 or self.substeps <= 0:
            raise ValueError("max_steps and substeps must be positive")
        self.h0 = dc.as_array(self.h0)


@dataclass
class SolveResult:
    states: list[Array]
    times: np.ndarray
    step_log: list[tuple[float, float, bool]] = field(default_factory=list)

    def as_numpy(self) -> np.ndarray:
        return np.stack([s.data for s in self.states])


def euler_step(f: Dynamics, h: Array, t: float, dt: float) -> Array:
    return h + f(h, t) * dt


def rk4_step(f: Dynamics, h: Array, t: float, dt: float) -> Array:
    half = 0.5 * dt
    k1 = f(h, t)
    k2 = f(h + k1 * half, t + half)
    k3 = f(h + k2 * half, t + half)
    k4 = f(h + k3 * dt, t + dt)
    return h + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)


FIXED_STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def integrate_fixed(f: Dynamics, h: Array, t0: float, t1: float, substeps: int = 4,
                    method: str = "rk4") -> Array:
    """Advance ``h`` from ``t0`` to ``t1`` with ``substeps`` equal steps."""
    step = FIXED_STEPPERS[method]
    dt = (t1 - t0) / substeps
    for j in range(substeps):
        h = step(f, h, t0 + j * dt, dt)
    return h


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


def _combine(h: Array, ks: list[Array], coeffs: Sequence[float], dt: float) -> Array:
    acc = None
    for k, c in zip(ks, coeffs):
        if c == 0.0:
            continue
        term = k * (c * dt)
        acc = term if acc is None else acc + term
    return h if acc is None else h + acc


def _rms_error(err: np.ndarray, y0: np.ndarray, y1: np.ndarray, rtol: float, atol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def initial_step(f: Dynamics, t0: float, y0: Array, f0: Array, direction: float,
                 rtol: float, atol: float, order: int = 5) -> float:
    """Starting step size heuristic from Hairer, Norsett & Wanner (II.4)."""
    scale = atol + np.abs(y0.data) * rtol
    d0 = float(np.sqrt(np.mean((y0.data / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0.data / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + f0 * (direction * h0)
    f1 = f(y1, t0 + direction * h0)
    d2 = float(np.sqrt(np.mean(((f1.data - f0.data) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1)


def _dopri5(req: SolveRequest) -> SolveResult:
    f = req.dynamics
    times = [float(t) for t in req.output_times]
    y = req.h0
    states = [y]
    log: list[tuple[float, float, bool]] = []
    if len(times) == 1:
        return SolveResult(states, np.asarray(times), log)
    direction = 1.0 if times[-1] > times[0] else -1.0
    t = times[0]
    k1 = f(y, t)
    dt = initial_step(f, t, y, k1, direction, req.rtol, req.atol)
    attempts = 0
    for target in times[1:]:
        while direction * (target - t) > 0:
            if attempts >= req.max_steps:
                raise NonConvergenceError(t, req.max_steps)
            attempts += 1
            remaining = abs(target - t)
            last = dt >= remaining
            step = remaining if last else dt
            sdt = direction * step
            ks = [k1]
            try:
                for i in range(1, 7):
                    yi = _combine(y, ks, _A[i], sdt)
                    ks.append(f(yi, t + _C[i] * sdt))
                y_new = _combine(y, ks, _A[6], sdt)
            except dc.NumericOverflowError as exc:
                raise DivergenceError(t) from exc
            err = np.zeros_like(y.data)
            for k, e in zip(ks, _E):
                err += (e * sdt) * k.data
            ratio = _rms_error(err, y.data, y_new.data, req.rtol, req.atol)
            accepted = ratio <= 1.0
            log.append((t, step, accepted))
            if ratio == 0.0:
                factor = MAX_FACTOR
            else:
                factor = min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * ratio ** -0.2))
            if accepted:
                # clamp to the requested time exactly
                t = target if last else t + sdt
                y = y_new
                k1 = ks[6]
                if not last:
                    dt = step * factor
                else:
                    dt = max(dt, step * factor)
            else:
                dt = step * min(1.0, factor)
        states.append(y)
    return SolveResult(states, np.asarray(times), log)


def _fixed(req: SolveRequest) -> SolveResult:
    times = [float(t) for t in req.output_times]
    y = req.h0
    states = [y]
    for t0, t1 in zip(times[:-1], times[1:]):
        try:
            y = integrate_fixed(req.dynamics, y, t0, t1, req.substeps, req.method)
        except dc.NumericOverflowError as exc:
            raise DivergenceError(t0) from exc
        states.append(y)
    return SolveResult(states, np.asarray(times))


METHODS = {"euler": _fixed, "rk4": _fixed, "dopri5": _dopri5}


def solve(req: SolveRequest) -> SolveResult:
    """Integrate ``req.dynamics`` from ``req.h0`` and return states at every output time."""
    return METHODS[req.method](req)


def odesolve(f: Dynamics, h0, times: Sequence[float], method: str = "rk4", **kw) -> SolveResult:
    return solve(SolveRequest(f, dc.as_array(h0), times, method, **kw))


# convergence utility -------------------------------------------------------------

@dataclass
class TestProblem:
    """An ODE with closed-form solution, used to measure solver order."""

    rhs: Dynamics
    h0: np.ndarray
    t_end: float
    exact: Callable[[float], np.ndarray]

    __test__ = False  # not a pytest class


def decay_problem(rate: float = 1.0, t_end: float = 1.0) -> TestProblem:
    return TestProblem(lambda h, t: h * (-rate), np.array([1.0]), t_end,
                       lambda t: np.array([math.exp(-rate * t)]))


def zero_problem(t_end: float = 1.0) -> TestProblem:
    return TestProblem(lambda h, t: h * 0.0, np.array([2.5, -1.0]), t_end,
                       lambda t: np.array([2.5, -1.0]))


def oscillator_problem(t_end: float = 2 * math.pi) -> TestProblem:
    def rhs(h, t):
        return dc.concat([h[1:2], h[0:1] * -1.0])

    return TestProblem(rhs, np.array([0.0, 1.0]), t_end,
                       lambda t: np.array([math.sin(t), math.cos(t)]))


@dataclass
class ConvergenceResult:
    order: float
    step_sizes: list[float]
    errors: list[float]


def convergence_order(method: str, problem: TestProblem,
                      steps: Sequence[int] = (8, 16, 32, 64)) -> ConvergenceResult:
    """Slope of log(global error) against log(step size) over ``steps`` step counts.

    An ``order`` of ``inf`` means the method was exact at every step size.
    """
    if method not in FIXED_STEPPERS:
        raise ValueError(f"convergence_order needs a fixed-step method, got {method!r}")
    sizes, errors = [], []
    exact = problem.exact(problem.t_end)
    for count in steps:
        h = integrate_fixed(problem.rhs, Array(problem.h0), 0.0, problem.t_end, count, method)
        sizes.append(problem.t_end / count)
        errors.append(float(np.max(np.abs(h.data - exact))))
    if max(errors) == 0.0:
        return ConvergenceResult(math.inf, sizes, errors)
    slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
    return ConvergenceResult(float(slope), sizes, errors)
