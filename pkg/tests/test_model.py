import numpy as np
import pytest

from vandisc.model import (Ball, Box, ConfigError, builtin_problem,
                           catalog_names, lipschitz_audit, parse_config,
                           parse_problem)

TWO_DIM_CONFIG = """
[problem]
name = planar_decay
dim = 2
noise_dim = 2
[dynamics]
drift = -u1 * x1 ; -u1 * x2
diffusion = 0 ; 0 ; 0 ; 0
[cost]
psi = x1^2 + x2^2
[domain]
kind = box
lower = -1, -1
upper = 1, 1
[constants]
M = 2
K_x = 4
K_z = 0
c = 2
c0 = 4
M0 = 4
[controls]
values = 0.5 ; 1
"""


def test_catalog_builds_and_audits():
    for name in catalog_names():
        problem = builtin_problem(name)
        report = lipschitz_audit(problem, sample_count=1024, seed=0)
        assert report.passed, (name, report.details, report.witness)


def test_catalog_names_stable():
    assert set(catalog_names()) == {
        "constant_cost", "decay_quadratic", "elliptic_ou", "example_2_3",
        "expanding", "h5_violator", "split_homogeneous", "steerable",
    }


def test_unknown_builtin_lists_catalog():
    with pytest.raises(KeyError) as err:
        builtin_problem("nope")
    assert "constant_cost" in str(err.value)


def test_config_round_trip():
    problem = parse_problem(TWO_DIM_CONFIG)
    assert problem.dim == 2 and problem.noise_dim == 2
    cfg = parse_config(problem.source_text)
    again = parse_config(cfg.to_text()).build()
    x = np.array([[0.3, -0.4]])
    z = np.zeros((1, 2))
    for u in problem.control_set:
        np.testing.assert_array_equal(problem.drift(x, u), again.drift(x, u))
        np.testing.assert_array_equal(problem.running_cost(x, z, u),
                                      again.running_cost(x, z, u))


def test_two_dim_coefficients():
    problem = parse_problem(TWO_DIM_CONFIG)
    x = np.array([[0.5, -0.25], [1.0, 1.0]])
    u = problem.control(1)
    np.testing.assert_allclose(problem.drift(x, u), -x, rtol=0, atol=0)
    sig = problem.diffusion(x, u)
    assert sig.shape == (2, 2, 2)
    np.testing.assert_array_equal(sig, np.zeros((2, 2, 2)))
    np.testing.assert_allclose(problem.running_cost(x, np.zeros((2, 2)), u),
                               (x ** 2).sum(axis=1))


def test_problem_hash_tracks_source():
    a = builtin_problem("decay_quadratic")
    b = builtin_problem("decay_quadratic")
    assert a.problem_hash() == b.problem_hash()
    cfg = parse_config(a.source_text)
    cfg.cost_expr = "x1^2 + 0.5"
    cfg.source_text = ""
    assert cfg.build().problem_hash() != a.problem_hash()


def test_box_operations():
    box = Box(lower=np.array([-1.0, 0.0]), upper=np.array([1.0, 2.0]))
    assert box.contains(np.array([[0.0, 1.0]]))[0]
    assert not box.contains(np.array([[1.5, 1.0]]))[0]
    proj = box.project(np.array([[2.0, -1.0]]))
    np.testing.assert_array_equal(proj, [[1.0, 0.0]])
    assert box.distance_outside(np.array([[2.0, 1.0]]))[0] == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    pts = box.sample(rng, 256)
    assert box.contains(pts).all()
    edge = box.boundary_adjacent(0.01)
    assert box.contains(edge).all()
    assert np.abs(edge).max() == pytest.approx(1.99)


def test_ball_operations():
    ball = Ball(center=np.zeros(2), radius=1.0)
    outside = np.array([[2.0, 0.0]])
    np.testing.assert_allclose(ball.project(outside), [[1.0, 0.0]])
    assert ball.distance_outside(outside)[0] == pytest.approx(1.0)
    rng = np.random.default_rng(1)
    pts = ball.sample(rng, 512)
    assert ball.contains(pts).all()


def test_audit_catches_wrong_bound():
    cfg = parse_config(builtin_problem("decay_quadratic").source_text)
    cfg.constants["M"] = 0.25   # true sup of x^2 on [-1,1] is 1
    cfg.constants["M0"] = 2.0
    cfg.source_text = ""
    problem = cfg.build()
    report = lipschitz_audit(problem, sample_count=2048, seed=0)
    assert not report.passed
    assert report.witness is not None


def test_audit_catches_wrong_lipschitz():
    cfg = parse_config(builtin_problem("h5_violator").source_text)
    cfg.constants["K_z"] = 0.25  # |z| has z-modulus 1
    cfg.source_text = ""
    problem = cfg.build()
    report = lipschitz_audit(problem, sample_count=2048, seed=0)
    assert not report.passed


def test_invalid_configs_rejected():
    bad_cap = TWO_DIM_CONFIG.replace("M0 = 4", "M0 = 1")  # below max(c0, M)
    with pytest.raises(ConfigError):
        parse_problem(bad_cap)
    with pytest.raises(ConfigError):
        parse_problem(TWO_DIM_CONFIG.replace("psi = x1^2 + x2^2",
                                             "psi = x1^2 + x3^2"))
    with pytest.raises(ConfigError):
        parse_problem(TWO_DIM_CONFIG.replace("[controls]\nvalues = 0.5 ; 1",
                                             "[controls]\nvalues ="))


def test_min_instant_cost():
    problem = builtin_problem("steerable")
    x = np.array([[0.5], [-0.2]])
    np.testing.assert_allclose(problem.min_instant_cost(x), (x ** 2)[:, 0])


def test_split_cost_exposed():
    problem = builtin_problem("split_homogeneous")
    assert problem.split is not None
    z = np.array([[0.5], [-2.0]])
    np.testing.assert_allclose(problem.split.g(z), [-0.5, -2.0])
    assert builtin_problem("h5_violator").split is None
