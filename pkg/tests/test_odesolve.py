import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import analytic_grad, numeric_grad, rel_error
from seqlink import diffcore as dc
from seqlink.diffcore import Array, ParameterStore
from seqlink.odesolve import (DivergenceError, NonConvergenceError, ODEDynamics, SolveRequest,
                              convergence_order, decay_problem, odesolve, oscillator_problem, solve,
                              zero_problem)


def decay(h, t):
    return h * -1.0


def test_constant_solution():
    res = odesolve(lambda h, t: h * 0.0, [5.0], [0.0, 1.0], "dopri5")
    np.testing.assert_array_equal(res.as_numpy(), [[5.0], [5.0]])


def test_dopri5_exponential_decay():
    res = odesolve(decay, [1.0], [0.0, 1.0], "dopri5", rtol=1e-8, atol=1e-8)
    assert abs(res.states[-1].data[0] - math.exp(-1)) < 1e-7


def test_dopri5_oscillator_full_period():
    prob = oscillator_problem()
    res = odesolve(prob.rhs, prob.h0, [0.0, 2 * math.pi], "dopri5", rtol=1e-8, atol=1e-8)
    assert np.max(np.abs(res.states[-1].data - [0.0, 1.0])) < 1e-6


def test_states_start_exactly_at_h0_and_hit_every_time():
    h0 = np.array([0.3, -0.7])
    times = [0.0, 0.25, 1.0, 1.1, 3.0]
    for method in ("euler", "rk4", "dopri5"):
        res = odesolve(decay, h0, times, method)
        assert len(res.states) == len(times)
        assert np.array_equal(res.states[0].data, h0)
        np.testing.assert_array_equal(res.times, times)


def test_dopri5_step_log_clamps_to_requested_times():
    times = [0.0, 0.3, 0.31, 2.0]
    res = odesolve(decay, [1.0], times, "dopri5", rtol=1e-6, atol=1e-6)
    accepted = [(t, dt) for t, dt, ok in res.step_log if ok]
    ends = np.cumsum([dt for _, dt in accepted])
    for t in times[1:]:
        assert np.min(np.abs(ends - t)) < 1e-12


def test_dopri5_accepted_steps_meet_tolerance():
    # re-run every accepted step on its own and check the embedded error estimate
    from seqlink.odesolve import _A, _C, _E, _combine, _rms_error
    rtol = atol = 1e-6
    res = odesolve(decay, [1.0], [0.0, 3.0], "dopri5", rtol=rtol, atol=atol)
    y = Array([1.0])
    for t, dt, ok in res.step_log:
        ks = [decay(y, t)]
        for i in range(1, 7):
            ks.append(decay(_combine(y, ks, _A[i], dt), t + _C[i] * dt))
        y_new = _combine(y, ks, _A[6], dt)
        err = sum((e * dt) * k.data for k, e in zip(ks, _E))
        ratio = _rms_error(err, y.data, y_new.data, rtol, atol)
        assert (ratio <= 1.0) == ok
        if ok:
            y = y_new


@pytest.mark.parametrize("method,lo,hi", [("euler", 0.9, 1.1), ("rk4", 3.8, 4.2)])
def test_convergence_order_on_decay(method, lo, hi):
    res = convergence_order(method, decay_problem())
    assert lo <= res.order <= hi
    assert len(res.step_sizes) >= 4


def test_rk4_exact_on_zero_dynamics():
    res = convergence_order("rk4", zero_problem())
    assert res.order == math.inf
    assert max(res.errors) == 0.0


def test_tolerance_monotonicity():
    errors = []
    for tol in (1e-4, 1e-5, 1e-6, 1e-7, 1e-8):
        res = odesolve(decay, [1.0], [0.0, 1.0], "dopri5", rtol=tol, atol=tol)
        errors.append(abs(res.states[-1].data[0] - math.exp(-1)))
    assert all(b <= a for a, b in zip(errors, errors[1:]))


def test_reverse_consistency_rk4():
    store = ParameterStore()
    f = ODEDynamics(store, "f", 3, (8,), np.random.default_rng(5))
    h0 = np.array([0.2, -0.4, 0.1])
    fwd = odesolve(f, h0, [0.0, 1.0], "rk4", substeps=64)
    back = odesolve(f, fwd.states[-1], [1.0, 0.0], "rk4", substeps=64)
    assert np.max(np.abs(back.states[-1].data - h0)) < 1e-6


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_fixed_step_gradient_wrt_h0(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    f = ODEDynamics(store, "f", 3, (6,), rng)
    h0 = Array(rng.normal(size=3), requires_grad=True)

    def loss():
        h1 = odesolve(f, h0, [0.0, 0.7], "rk4").states[-1]
        return dc.sum(dc.square(h1))

    (g,) = analytic_grad(loss, [h0])
    (n,) = numeric_grad(lambda: float(loss().data), [h0])
    assert rel_error(g, n) < 1e-4


def test_fixed_step_gradient_wrt_dynamics_params():
    rng = np.random.default_rng(3)
    store = ParameterStore()
    f = ODEDynamics(store, "f", 2, (5,), rng)
    h0 = rng.normal(size=2)

    def loss():
        return dc.sum(dc.square(odesolve(f, h0, [0.0, 0.5, 1.0], "euler").states[-1]))

    params = [store[n] for n in store]
    for g, n in zip(analytic_grad(loss, params), numeric_grad(lambda: float(loss().data), params)):
        assert rel_error(g, n) < 1e-4


def test_max_steps_raises_nonconvergence_with_time():
    with pytest.raises(NonConvergenceError) as info:
        odesolve(decay, [1.0], [0.0, 10.0], "dopri5", rtol=1e-10, atol=1e-10, max_steps=3)
    assert 0.0 <= info.value.last_time < 10.0


@pytest.mark.parametrize("method", ["rk4", "dopri5"])
def test_blow_up_raises_divergence(method):
    with pytest.raises(DivergenceError):
        odesolve(lambda h, t: dc.exp(h * 3.0), [1.0], [0.0, 5.0], method, max_steps=10_000)


def test_request_validation():
    with pytest.raises(ValueError):
        SolveRequest(decay, Array([1.0]), [0.0, 1.0, 0.5])
    with pytest.raises(ValueError):
        SolveRequest(decay, Array([1.0]), [0.0, 1.0], rtol=0.0)
    with pytest.raises(ValueError):
        SolveRequest(decay, Array([1.0]), [0.0, 1.0], method="midpoint")
    with pytest.raises(ValueError):
        SolveRequest(decay, Array([1.0]), [0.0, 1.0], max_steps=0)


def test_dynamics_output_shape_matches_state():
    store = ParameterStore()
    f = ODEDynamics(store, "f", 4, (100,), np.random.default_rng(0))
    assert f(Array(np.zeros((7, 4))), 0.0).shape == (7, 4)
    assert sorted(f.param_names) == sorted(store.names("f."))


def test_solver_suite_is_fast():
    start = time.perf_counter()
    convergence_order("euler", decay_problem())
    convergence_order("rk4", decay_problem())
    odesolve(oscillator_problem().rhs, [0.0, 1.0], [0.0, 2 * math.pi], "dopri5", rtol=1e-8, atol=1e-8)
    assert time.perf_counter() - start < 10.0


def test_solve_dispatch_matches_wrapper():
    req = SolveRequest(decay, Array([2.0]), [0.0, 0.5], "rk4", substeps=8)
    a = solve(req).as_numpy()
    b = odesolve(decay, [2.0], [0.0, 0.5], "rk4", substeps=8).as_numpy()
    assert np.array_equal(a, b)
