import numpy as np
import pytest

from vandisc.conditions import (coupling_gap, feedback_selector,
                                nonexpansivity_check,
                                stochastic_nonexpansivity_probe)
from vandisc.model import builtin_problem, catalog_names


def test_coupling_gap_closed_form():
    # example_2_3: drift -3x, diffusion x, K_z = 1, single control.
    # gap = -3 d^2 + 0.5 d^2 + 1 * |d| * |d| = -1.5 d^2 with d = x - x'
    problem = builtin_problem("example_2_3")
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(200, 1))
    xp = rng.uniform(-1, 1, size=(200, 1))
    u = problem.control_set[0]
    gap = coupling_gap(problem, x, xp, u, u)
    np.testing.assert_allclose(gap, -1.5 * (x - xp)[:, 0] ** 2, atol=1e-13)


def test_coupling_gap_expanding_is_positive():
    # outward drift x against itself: gap = (x - x') (x - x') = d^2 > 0
    problem = builtin_problem("expanding")
    x = np.array([[0.5]])
    xp = np.array([[-0.25]])
    u = problem.control_set[0]
    gap = coupling_gap(problem, x, xp, u, u)
    assert gap[0] == pytest.approx(0.75 ** 2)


def test_static_classification():
    # dissipative pairs admit a closing response; outward drift cannot
    passing = {"constant_cost", "decay_quadratic", "split_homogeneous",
               "steerable", "example_2_3", "h5_violator", "elliptic_ou"}
    for name in catalog_names():
        report = nonexpansivity_check(builtin_problem(name), n_pairs=256, seed=0)
        assert report.passed == (name in passing), (name, report.details)
    report = nonexpansivity_check(builtin_problem("expanding"), n_pairs=256, seed=0)
    assert report.witness is not None
    assert report.details["worst_relative_gap"] > 0.5  # gap ~ d^2 itself


def test_feedback_selector_prefers_matching_control():
    # steerable's active controls are noiseless, so every response closes the
    # gap equally at x = x'; the tie must keep the pair on the same control
    problem = builtin_problem("steerable")
    select = feedback_selector(problem)
    x = np.array([[0.3], [-0.7], [0.0]])
    u_idx = np.array([2, 0, 1])
    v_idx, gap = select(x, x.copy(), u_idx)
    np.testing.assert_array_equal(v_idx, u_idx)
    np.testing.assert_allclose(gap, 0.0, atol=1e-15)


def test_feedback_selector_minimises_gap():
    problem = builtin_problem("steerable")
    select = feedback_selector(problem)
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, size=(50, 1))
    xp = rng.uniform(-1, 1, size=(50, 1))
    u_idx = rng.integers(0, 3, size=50)
    v_idx, gap = select(x, xp, u_idx)
    for k in range(50):
        u = problem.control_set[u_idx[k]]
        all_gaps = [coupling_gap(problem, x[k], xp[k], u, v)[()]
                    for v in problem.control_set]
        assert gap[k] == pytest.approx(min(all_gaps), abs=1e-12)
        assert all_gaps[v_idx[k]] == pytest.approx(min(all_gaps), abs=1e-12)


def test_probe_coincident_start_stays_exact():
    # identical starts + tie-preserving selector: paths never separate
    problem = builtin_problem("steerable")
    report = stochastic_nonexpansivity_probe(problem, [0.4], [0.4],
                                             horizon=1.0, dt=0.02,
                                             n_paths=256, seed=3)
    assert report.passed, report.details
    assert report.details["worst_rms_distance"] == 0.0
    assert report.details["cost_gap"] == 0.0


def test_probe_contracts_separated_pair():
    problem = builtin_problem("example_2_3")
    report = stochastic_nonexpansivity_probe(problem, [0.6], [-0.2],
                                             horizon=2.0, dt=0.01,
                                             n_paths=2048, seed=4)
    assert report.passed, report.details
    d0 = report.details["initial_distance"]
    assert d0 == pytest.approx(0.8)
    assert report.details["worst_rms_distance"] <= d0 + 1e-9
    # exponential martingale weights stay centered at one
    assert report.details["weight_mean_final"] == pytest.approx(
        1.0, abs=4.0 * report.details["weight_se_final"] + 1e-12)


def test_probe_flags_expanding_dynamics():
    problem = builtin_problem("expanding")
    report = stochastic_nonexpansivity_probe(problem, [0.3], [-0.3],
                                             horizon=2.0, dt=0.01,
                                             n_paths=512, seed=5)
    assert not report.passed
    assert report.details["rms_excess"] > 0.0
    assert report.witness is not None
