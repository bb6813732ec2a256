import math

import numpy as np
import pytest

from vandisc.bsde import (BsdePath, backward_semigroup, g_expectation,
                          solve_infinite_horizon, truncation_horizon,
                          y_bound_check)
from vandisc.model import builtin_problem
from vandisc.sde import ConstantPolicy


def discrete_annuity(lam, horizon, dt):
    """Exact fixed point of y_k = (y_{k+1} + dt) / (1 + lam dt), y_K = 0."""
    steps = max(1, int(round(horizon / dt)))
    dt = horizon / steps
    beta = 1.0 / (1.0 + lam * dt)
    return dt * beta * (1.0 - beta ** steps) / (1.0 - beta), steps, dt


def test_truncation_horizon_formula():
    m = truncation_horizon(bound_M=1.0, lam=0.5, tol=1e-6, horizon_T=1.0)
    assert m == pytest.approx(1.0 + math.log(1.0 / (0.5 * 1e-6)) / 0.5)
    # tail bound at the returned horizon hits the tolerance exactly
    assert (1.0 / 0.5) * math.exp(-0.5 * (m - 1.0)) == pytest.approx(1e-6)
    assert truncation_horizon(0.0, 0.5, 1e-6, 2.5) == 2.5
    assert truncation_horizon(1e-9, 1.0, 1.0, 3.0) == 3.0  # negative extension clamps
    with pytest.raises(ValueError):
        truncation_horizon(1.0, 0.0, 1e-6, 1.0)
    with pytest.raises(ValueError):
        truncation_horizon(1.0, 0.5, 0.0, 1.0)
    with pytest.raises(ValueError, match="floating-point range"):
        truncation_horizon(1.0, 1.0, 1e-310, 1.0)


def test_constant_cost_matches_discrete_annuity():
    problem = builtin_problem("constant_cost")  # psi = 1, frozen state
    lam, dt = 0.5, 0.05
    path = solve_infinite_horizon(problem, [0.0], ConstantPolicy(0), lam,
                                  tol=1e-4, dt=dt, path_count=64, seed=0)
    oracle, steps, dt_actual = discrete_annuity(lam, path.truncation_horizon, dt)
    assert path.y0 == pytest.approx(oracle, abs=1e-12)
    # discrete value sits within one tail + discretisation of the closed form
    closed = (1.0 - math.exp(-lam * path.truncation_horizon)) / lam
    assert abs(path.y0 - closed) <= lam * dt_actual * closed + 1e-12
    assert path.tail_error_bound <= 1e-4 + 1e-15
    assert path.time_grid.size == steps + 1


def test_semigroup_terminal_discounting_is_exact():
    problem = builtin_problem("constant_cost")
    lam, horizon, dt = 0.5, 2.0, 0.1
    zero, batch = backward_semigroup(problem, [0.0], ConstantPolicy(0), lam,
                                     horizon, dt, path_count=32, seed=1)
    lifted, batch2 = backward_semigroup(problem, [0.0], ConstantPolicy(0), lam,
                                        horizon, dt, path_count=32, seed=1,
                                        terminal=3.0, batch=batch)
    assert batch2 is batch  # supplied forward batch is reused, not resimulated
    steps = batch.times.size - 1
    beta = 1.0 / (1.0 + lam * (horizon / steps))
    assert lifted.y0 - zero.y0 == pytest.approx(3.0 * beta ** steps, abs=1e-12)
    # callable terminals see the forward batch
    state_term, _ = backward_semigroup(problem, [0.0], ConstantPolicy(0), lam,
                                       horizon, dt, path_count=32, seed=1,
                                       terminal=lambda b: b.states[:, -1, 0],
                                       batch=batch)
    assert state_term.y0 == pytest.approx(zero.y0, abs=1e-12)  # state frozen at 0


def test_g_expectation_constant_short_circuits():
    problem = builtin_problem("h5_violator")
    g = lambda z: -np.abs(z[..., 0])
    res = g_expectation(problem, g, 2.5, [0.0], ConstantPolicy(0),
                        horizon=1.0, dt=0.1, path_count=128, seed=3)
    assert res.degenerate
    assert res.value == 2.5
    assert res.std_error == 0.0
    assert np.all(res.y_values == 2.5)
    assert np.all(res.z_values == 0.0)


def test_zero_driver_reduces_to_sample_mean():
    problem = builtin_problem("h5_violator")
    terminal = lambda batch: batch.brownian[:, -1, 0] ** 2
    res = g_expectation(problem, lambda z: 0.0 * z[..., 0], terminal, [0.0],
                        ConstantPolicy(0), horizon=1.0, dt=0.1,
                        path_count=512, seed=4)
    grid = np.linspace(0.0, 1.0, 11)
    from vandisc.sde import simulate_batch
    batch = simulate_batch(problem, [0.0], ConstantPolicy(0), grid, 4, 512)
    assert res.value == pytest.approx(batch.brownian[:, -1, 0].var(ddof=0)
                                      + batch.brownian[:, -1, 0].mean() ** 2,
                                      abs=1e-10)
    assert res.std_error > 0.0


def test_g_expectation_of_brownian_terminal():
    # driver g(z) = -|z| and terminal W_T give value -T with Z = 1
    problem = builtin_problem("h5_violator")
    T = 1.0
    res = g_expectation(problem, lambda z: -np.abs(z[..., 0]),
                        lambda batch: batch.brownian[:, -1, 0],
                        [0.0], ConstantPolicy(0), horizon=T, dt=0.05,
                        path_count=20_000, seed=5)
    assert not res.degenerate
    tol = max(4.0 * res.std_error, 0.03)
    assert res.value == pytest.approx(-T, abs=tol)
    assert res.z_values[:, 0].mean() == pytest.approx(1.0, abs=0.05)


def test_y_bound_check_accepts_and_rejects():
    problem = builtin_problem("h5_violator")
    lam = 0.5
    path = solve_infinite_horizon(problem, [0.0], ConstantPolicy(0), lam,
                                  tol=1e-3, dt=0.05, path_count=2048, seed=6)
    report = y_bound_check(path, problem)
    assert report.passed, report.details
    assert report.details["y_max"] <= problem.bound_M / lam + path.tail_error_bound

    doctored = BsdePath(time_grid=path.time_grid,
                        y_values=path.y_values + 3.0 * problem.bound_M / lam,
                        z_values=path.z_values, z_square=path.z_square,
                        lam=lam, truncation_horizon=path.truncation_horizon,
                        tail_error_bound=path.tail_error_bound,
                        std_error=path.std_error, y_abs_max=path.y_abs_max)
    report = y_bound_check(doctored, problem)
    assert not report.passed
    assert report.witness["y_max"] > report.witness["y_cap"]
