"""Acceptance gate: one test per advertised guarantee, each printing a
single pass/fail line with the measured quantity against its tolerance."""

import json
import math
import time

import numpy as np

from vandisc.bsde import (g_expectation, solve_infinite_horizon,
                          truncation_horizon, y_bound_check)
from vandisc.cli import main as cli_main
from vandisc.conditions import coupling_gap, nonexpansivity_check
from vandisc.hjb import comparison_gap, solve_discounted
from vandisc.limit import (lambda_sweep, monotonicity_check,
                           pointwise_cost_bound, radial_monotonicity_check,
                           subsolution_residual)
from vandisc.model import builtin_problem, catalog_names, parse_config
from vandisc.representation import (dpp_residual, representation_crosscheck,
                                    split_driver)
from vandisc.rng import substream
from vandisc.sde import ConstantPolicy, SwitchingPolicy


def verdict(ok, label, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    return ok


def test_01_coupling_gap_closed_form():
    # dissipative linear pair: gap(x, x', u, u) = -1.5 (x - x')^2 exactly
    t0 = time.perf_counter()
    problem = builtin_problem("example_2_3")
    rng = substream(0, 0xACC1)
    x = problem.domain.sample(rng, 1000)
    xp = problem.domain.sample(rng, 1000)
    u = problem.control_set[0]
    gap = coupling_gap(problem, x, xp, u, u)
    deviation = float(np.abs(gap + 1.5 * ((x - xp) ** 2).sum(axis=1)).max())
    elapsed = time.perf_counter() - t0
    ok = deviation < 1e-12 and elapsed < 5.0
    assert verdict(ok, "01 coupling closed form",
                   f"max deviation {deviation:.3g} (tol 1e-12) over 1000 pairs, "
                   f"{elapsed:.2f}s (budget 5s)")


def test_02_bsde_bound_suite():
    # a-priori Y and Z-energy bounds at three discounts, then the truncation
    # Cauchy rate: doubling the horizon extension shrinks the value gap by
    # at least exp(lambda * extension) / 2
    t0 = time.perf_counter()
    bounds_ok = True
    detail = []
    for name in ("constant_cost", "split_homogeneous"):
        problem = builtin_problem(name)
        for lam in (1.0, 0.5, 0.1):
            dt = 0.1 if lam == 0.1 else 0.01
            m = truncation_horizon(problem.bound_M, lam, 1e-4, 1.0)
            policy = (ConstantPolicy(0) if lam == 0.1 else
                      SwitchingPolicy(len(problem.control_set), 10_000, m, seed=3))
            path = solve_infinite_horizon(problem, [0.5], policy, lam,
                                          tol=1e-4, dt=dt, path_count=10_000,
                                          seed=2)
            rep = y_bound_check(path, problem)
            bounds_ok = bounds_ok and rep.passed
            detail.append(f"{name}@{lam:g}:{'ok' if rep.passed else 'VIOLATED'}")

    rate_ok = True
    lam, T = 0.5, 1.0
    for name in ("constant_cost", "split_homogeneous"):
        problem = builtin_problem(name)
        ys = []
        for ext in (4.0, 8.0, 16.0):
            tol = problem.bound_M / lam * math.exp(-lam * ext)
            path = solve_infinite_horizon(problem, [0.5], ConstantPolicy(0),
                                          lam, tol=tol, dt=0.01,
                                          path_count=10_000, seed=2)
            ys.append(path.y0)
        ratio = abs(ys[1] - ys[0]) / max(abs(ys[2] - ys[1]), 1e-300)
        need = math.exp(lam * 4.0) / 2.0
        rate_ok = rate_ok and ratio >= need
        detail.append(f"{name} cauchy ratio {ratio:.1f}>={need:.2f}")
    elapsed = time.perf_counter() - t0
    ok = bounds_ok and rate_ok and elapsed < 120.0
    assert verdict(ok, "02 bsde bound suite",
                   "; ".join(detail) + f"; {elapsed:.0f}s (budget 120s)")


def test_03_grid_solver_closed_form():
    # w(x) = lam x^2 / (lam + 2) on 401 nodes, node error within 5 h
    problem = builtin_problem("decay_quadratic")
    ok = True
    detail = []
    for lam in (1.0, 0.25, 0.0625):
        t0 = time.perf_counter()
        field = solve_discounted(problem, lam, 401, tol=1e-8)
        elapsed = time.perf_counter() - t0
        h = float(field.grid.h[0])
        err = float(np.abs(field.values
                           - lam * field.grid.axes[0] ** 2 / (lam + 2.0)).max())
        ok = ok and err <= 5.0 * h and elapsed < 30.0
        detail.append(f"lam={lam:g} err={err:.2e}<={5 * h:g} in {elapsed:.2f}s")
    assert verdict(ok, "03 grid solver closed form", "; ".join(detail))


def test_04_field_bounds_on_nonexpansive_set():
    # every solved field obeys |w| <= M + 1e-6 and grid Lipschitz <= c0 + 10h
    ok = True
    detail = []
    for name in catalog_names():
        problem = builtin_problem(name)
        if not nonexpansivity_check(problem, n_pairs=256, seed=0).passed:
            continue
        field = solve_discounted(problem, 0.5, 201, tol=1e-6)
        rep = pointwise_cost_bound(field, problem)
        ok = ok and rep.passed
        detail.append(f"{name}:|w|={rep.details['w_abs_max']:.3f}"
                      f"/L={rep.details['lipschitz']:.3f}"
                      f"{'' if rep.passed else ' VIOLATED'}")
    assert verdict(ok, "04 field bounds", "; ".join(detail))


def test_05_discount_monotonicity(constant_sweep, steerable_sweep):
    # on problems with a radially monotone Hamiltonian, w decreases with the
    # discount at every node, up to twice the solver tolerance
    conditioned = {name for name in catalog_names()
                   if radial_monotonicity_check(builtin_problem(name),
                                                n_samples=256, seed=0).passed}
    assert conditioned == {"constant_cost", "steerable"}
    ok = True
    detail = [f"conditioned set {sorted(conditioned)}"]
    for sweep in (constant_sweep, steerable_sweep):
        rep = monotonicity_check(sweep)
        ok = ok and rep.passed
        detail.append(f"{sweep.problem_name}: worst increase "
                      f"{rep.details['worst_increase']:.2e} <= "
                      f"{rep.details['slack']:.2e}")
    assert verdict(ok, "05 discount monotonicity", "; ".join(detail))


def test_06_subsolution_residual():
    # the extrapolated limit is a discrete subsolution: capped envelope of
    # its derivatives stays below 10 h at every interior node
    ok = True
    detail = []
    for name in ("decay_quadratic", "constant_cost"):
        problem = builtin_problem(name)
        sweep = lambda_sweep(problem, [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125],
                             201, tol=1e-8)
        res = subsolution_residual(problem, sweep)
        good = res.max_residual <= 10.0 * res.h_max and res.diverged_count == 0
        ok = ok and good
        detail.append(f"{name}: residual {res.max_residual:.2e} <= "
                      f"{10.0 * res.h_max:g}, diverged {res.diverged_count}")
    assert verdict(ok, "06 subsolution residual", "; ".join(detail))


def test_07_g_expectation_properties():
    t0 = time.perf_counter()
    problem = builtin_problem("split_homogeneous")
    g = split_driver(problem)
    # constants are fixed points, exactly
    exact_ok = all(
        g_expectation(problem, g, c, [0.5], ConstantPolicy(0), 1.0, 0.1,
                      256, seed=9).value == c
        for c in (0.7, -3.0))
    # monotone and concave on twenty common-seed terminal pairs at 3 sigma
    eta_a = lambda b: b.brownian[:, -1, 0]
    eta_b = lambda b: b.brownian[:, -1, 0] + 0.25 * (
        1.0 + np.tanh(b.brownian[:, -1, 0]))
    eta_mid = lambda b: 0.5 * eta_a(b) + 0.5 * eta_b(b)
    mono_bad = conc_bad = 0
    for k in range(20):
        kw = dict(horizon=1.0, dt=0.1, path_count=10_000, seed=100 + k)
        ra = g_expectation(problem, g, eta_a, [0.5], ConstantPolicy(0), **kw)
        rb = g_expectation(problem, g, eta_b, [0.5], ConstantPolicy(0), **kw)
        rm = g_expectation(problem, g, eta_mid, [0.5], ConstantPolicy(0), **kw)
        if rb.value - ra.value < -3.0 * (ra.std_error + rb.std_error):
            mono_bad += 1
        gap = rm.value - 0.5 * (ra.value + rb.value)
        if gap < -3.0 * (rm.std_error + 0.5 * (ra.std_error + rb.std_error)):
            conc_bad += 1
    # closed form: driver -|z| on the terminal W_T values -T, with Z = 1
    res = g_expectation(problem, g, lambda b: b.brownian[:, -1, 0], [0.5],
                        ConstantPolicy(0), horizon=1.0, dt=0.05,
                        path_count=100_000, seed=21)
    sigma_dev = abs(res.value + 1.0) / max(res.std_error, 1e-300)
    elapsed = time.perf_counter() - t0
    ok = (exact_ok and mono_bad == 0 and conc_bad == 0 and sigma_dev <= 3.0
          and elapsed < 60.0)
    assert verdict(ok, "07 g-expectation properties",
                   f"constants exact={exact_ok}; pairs mono/concave "
                   f"violations {mono_bad}/{conc_bad} of 20; closed form "
                   f"{res.value:.4f} vs -1 at {sigma_dev:.1f} sigma; "
                   f"{elapsed:.0f}s (budget 60s)")


def test_08_representation_crosscheck(split_sweep):
    # inf over horizons/policies of the g-expectation of the best stage cost
    # matches the grid limit at nine nodes within the stated budget
    t0 = time.perf_counter()
    nodes = [[x] for x in np.linspace(-0.8, 0.8, 9)]
    lams = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625]
    ok = True
    detail = []
    for name, sweep in (("decay_quadratic", None), ("split_homogeneous", split_sweep)):
        problem = builtin_problem(name)
        if sweep is None:
            sweep = lambda_sweep(problem, lams, 201, tol=1e-6)
        rep = representation_crosscheck(problem, sweep, nodes,
                                        t_grid=[1.0, 2.0, 3.0, 4.0], dt=0.02,
                                        path_count=2048, seed=7)
        ok = ok and rep.passed
        worst = max(r["gap"] for r in rep.details["nodes"])
        budget = min(r["budget"] for r in rep.details["nodes"])
        detail.append(f"{name}: worst gap {worst:.2e} <= budget {budget:.2e}")
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 300.0
    assert verdict(ok, "08 representation crosscheck",
                   "; ".join(detail) + f"; {elapsed:.0f}s (budget 300s)")


def test_09_comparison_gap_tightness():
    # adding 0.3 to the running cost moves w by 0.3, both directions tight
    problem = builtin_problem("decay_quadratic")
    cfg = parse_config(problem.source_text)
    cfg.name = "decay_shifted"
    cfg.cost_expr = "x1^2 + 0.3"
    cfg.source_text = ""
    tol = 1e-8
    rep = comparison_gap(problem, cfg.build(), lam=0.5, grid_n=201, tol=tol)
    deviation = abs(rep.details["lhs_lambda_gap"] - 0.3)
    ok = rep.passed and deviation <= 4.0 * tol
    assert verdict(ok, "09 comparison gap",
                   f"lambda gap {rep.details['lhs_lambda_gap']:.12f} within "
                   f"0.3 +/- {4.0 * tol:g} (deviation {deviation:.2e})")


def test_10_dpp_residual():
    # frozen-state fixed point: exact; contracting dynamics: within budget
    problem = builtin_problem("constant_cost")
    field = solve_discounted(problem, 0.5, 51)
    res0 = dpp_residual(problem, field, [0.0], t=0.5, dt=0.05, path_count=64,
                        seed=5)
    exact_ok = res0.residual <= 1e-12

    problem = builtin_problem("decay_quadratic")
    field = solve_discounted(problem, 0.5, 401, tol=1e-8)
    detail = [f"constant residual {res0.residual:.2e}"]
    budget_ok = True
    for t in (0.25, 0.5):
        res = dpp_residual(problem, field, [0.5], t, dt=0.01, path_count=2048,
                           seed=5)
        budget = (3.0 * res.std_error + problem.nonexp_c0 * float(field.grid.h[0])
                  + 10.0 * 0.01)
        budget_ok = budget_ok and res.residual <= budget
        detail.append(f"decay t={t:g}: {res.residual:.2e} <= {budget:.2e}")
    ok = exact_ok and budget_ok
    assert verdict(ok, "10 dpp residual", "; ".join(detail))


def test_11_negative_controls(tmp_path):
    # failing condition checks exit with code 2 and name a witness, no crash
    out_a = tmp_path / "expanding"
    code_a = cli_main(["audit", "--problem", "builtin:expanding",
                       "--out-dir", str(out_a)])
    with open(out_a / "audit.json") as fh:
        audit = {r["name"]: r for r in json.load(fh)["reports"]}
    expanding_ok = (code_a == 2
                    and audit["nonexpansivity"]["passed"] is False
                    and audit["nonexpansivity"]["witness"] is not None)

    out_b = tmp_path / "elliptic"
    code_b = cli_main(["check-conditions", "--problem", "builtin:elliptic_ou",
                       "--lambdas", "0.5,0.25", "--grid-n", "51",
                       "--out-dir", str(out_b)])
    with open(out_b / "conditions.json") as fh:
        conds = {r["name"]: r for r in json.load(fh)["reports"]}
    radial = conds["radial_monotonicity"]
    elliptic_ok = (code_b == 2 and radial["passed"] is False
                   and radial["details"]["worst_center_drop"] > 0.0)
    ok = expanding_ok and elliptic_ok
    assert verdict(ok, "11 negative controls",
                   f"expanding audit exit {code_a} with coupling witness; "
                   f"elliptic check exit {code_b} with center drop "
                   f"{radial['details']['worst_center_drop']:.2f}")
