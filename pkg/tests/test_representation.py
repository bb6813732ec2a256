import numpy as np
import pytest

from vandisc.hjb import solve_discounted
from vandisc.limit import lambda_sweep
from vandisc.model import builtin_problem
from vandisc.representation import (dpp_residual, generalized_upper_bound,
                                    representation_crosscheck,
                                    representation_value, split_driver)


def test_split_driver_requires_split_cost():
    g = split_driver(builtin_problem("split_homogeneous"))
    np.testing.assert_allclose(g(np.array([[0.4], [-0.2]])), [-0.4, -0.2])
    with pytest.raises(ValueError, match="no split cost"):
        split_driver(builtin_problem("h5_violator"))


def test_dpp_residual_constant_cost_exact():
    # frozen state, constant cost: semigroup and field share the fixed point
    problem = builtin_problem("constant_cost")
    field = solve_discounted(problem, 0.5, 51)
    res = dpp_residual(problem, field, [0.0], t=0.5, dt=0.05, path_count=64,
                       seed=0)
    assert res.residual <= 1e-12, res
    assert res.value_pde == pytest.approx(2.0, abs=1e-10)  # V = 1 / lambda


def test_dpp_residual_decay_within_budget():
    problem = builtin_problem("decay_quadratic")
    lam = 0.5
    field = solve_discounted(problem, lam, 201)
    res = dpp_residual(problem, field, [0.5], t=0.25, dt=0.01,
                       path_count=1024, seed=1)
    budget = 3.0 * res.std_error + problem.nonexp_c0 * field.grid.h[0] + 10.0 * 0.01
    assert res.residual <= budget, res
    assert res.best_policy in {"constant_1", "feedback"}


def test_representation_value_split_homogeneous():
    # deterministic contraction with psi1 = x^2 >= 0 and g <= 0: the curve
    # decreases toward 0 = w0 as the horizon grows
    problem = builtin_problem("split_homogeneous")
    res = representation_value(problem, [0.6], t_grid=[0.5, 1.0, 2.0, 4.0],
                               dt=0.05, path_count=512, seed=2)
    assert res.t_at_min == 4.0
    assert res.value >= -3.0 * res.std_error - 1e-9
    assert res.value <= 0.6 ** 2  # no worse than stopping immediately
    curve, _ = res.table[res.policy_at_min]
    assert np.all(np.diff(curve) <= 1e-9)  # horizon curve monotone down
    with pytest.raises(ValueError, match="dt lattice"):
        representation_value(problem, [0.0], t_grid=[0.33], dt=0.05,
                             path_count=64, seed=2)
    with pytest.raises(ValueError, match="positive and increasing"):
        representation_value(problem, [0.0], t_grid=[-1.0, 1.0], dt=0.05,
                             path_count=64, seed=2)


def test_representation_crosscheck_split_homogeneous():
    problem = builtin_problem("split_homogeneous")
    sweep = lambda_sweep(problem, (0.5, 0.25, 0.125, 0.0625, 0.03125),
                         201, tol=1e-8)
    report = representation_crosscheck(problem, sweep,
                                       nodes=[[-0.5], [0.0], [0.5]],
                                       t_grid=[1.0, 2.0, 4.0], dt=0.05,
                                       path_count=512, seed=3)
    assert report.passed, report.details
    for row in report.details["nodes"]:
        assert row["gap"] <= row["budget"]


def test_generalized_upper_bound_exact_face():
    # h5_violator: w0 = 1, recessed driver |z| >= 0, so the bound holds with
    # room; the constant-control path keeps the terminal at w0 = 1
    problem = builtin_problem("h5_violator")
    sweep = lambda_sweep(problem, (0.5, 0.25, 0.125, 0.0625), 101, tol=1e-8)
    report = generalized_upper_bound(problem, sweep, [0.0], t=1.0, dt=0.05,
                                     path_count=512, seed=4)
    assert report.passed, report.details
    assert report.details["lhs_w0"] == pytest.approx(1.0, abs=1e-6)
    assert report.details["rhs_recessed"] >= report.details["lhs_w0"] - 1e-6
    with pytest.raises(ValueError, match="decreasing and positive"):
        generalized_upper_bound(problem, sweep, [0.0], t=1.0,
                                lambda_pair=(1e-4, 1e-3))
