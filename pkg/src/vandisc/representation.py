"""Dynamic programming and g-expectation representations of the limit value.

Two views of the same object.  At positive discount the value function
satisfies the dynamic programming identity over any horizon, with its own
interpolant as terminal data; the residual of that identity measures the
consistency of the grid field and the probabilistic evaluation.  At the
vanishing-discount limit, a split running cost psi = psi1 + g(z) turns the
limit value into a nonlinear-expectation formula

    w0(x) = inf over controls and horizons of E_g[ min_v psi1(X_t, v) ],

where E_g is the g-expectation driven by the z part of the cost.  The
crosscheck compares that formula against the grid limit w0 node by node,
and the recession form extends the upper-bound half to costs that are not
split but admit a small-discount recession.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import backward_semigroup
from .hjb import FeedbackPolicy, ValueField
from .limit import LambdaSweep
from .model import ControlProblem
from .reports import ConditionReport
from .sde import ConstantPolicy, PathBatch, simulate_batch

__all__ = [
    "DppResult",
    "dpp_residual",
    "RepresentationValue",
    "representation_value",
    "representation_crosscheck",
    "generalized_upper_bound",
    "split_driver",
]


def split_driver(problem: ControlProblem):
    """The z-part of a split running cost as a vectorised driver g(z)."""
    if problem.split is None:
        raise ValueError(f"problem {problem.name!r} has no split cost")
    return problem.split.g


def _truncate(batch: PathBatch, k: int) -> PathBatch:
    """Restrict a forward batch to its first k steps."""
    return PathBatch(
        times=batch.times[: k + 1],
        states=batch.states[:, : k + 1, :],
        increments=batch.increments[:, :k, :],
        controls=batch.controls[:, :k],
        brownian=batch.brownian[:, : k + 1, :],
        seed=batch.seed,
    )


# ---------------------------------------------------------------------------
# Dynamic programming residual at positive discount
# ---------------------------------------------------------------------------


@dataclass
class DppResult:
    t: float
    value_pde: float
    value_bsde: float
    residual: float
    std_error: float
    best_policy: str


def dpp_residual(problem: ControlProblem, field: ValueField, x0, t: float,
                 dt: float = 0.01, path_count: int = 2048, seed: int = 5,
                 extra_policies: dict | None = None) -> DppResult:
    """Residual of the programming identity over horizon t.

    Evaluates the backward semigroup with the solved field (as V = w / lambda)
    for terminal data under each constant control and the field's own
    feedback policy, takes the smallest value, and compares against the
    field interpolated at the start point.
    """
    lam = field.lam
    x0 = np.asarray(x0, dtype=float).reshape(problem.dim)
    terminal = lambda b: field.interpolate(b.states[:, -1, :]) / lam
    policies = {f"constant_{j}": ConstantPolicy(j)
                for j in range(len(problem.control_set))}
    policies["feedback"] = FeedbackPolicy(field)
    if extra_policies:
        policies.update(extra_policies)

    best = None
    for name, pol in policies.items():
        path, _ = backward_semigroup(problem, x0, pol, lam, t, dt, path_count,
                                     seed, terminal=terminal)
        if best is None or path.y0 < best[1]:
            best = (name, path.y0, path.std_error)
    value_pde = float(field.interpolate(x0.reshape(1, -1))[0] / lam)
    return DppResult(
        t=float(t),
        value_pde=value_pde,
        value_bsde=float(best[1]),
        residual=float(abs(best[1] - value_pde)),
        std_error=float(best[2]),
        best_policy=best[0],
    )


# ---------------------------------------------------------------------------
# g-expectation representation of w0
# ---------------------------------------------------------------------------


@dataclass
class RepresentationValue:
    value: float
    std_error: float
    t_at_min: float
    policy_at_min: str
    table: dict                # policy name -> (t_grid values, std errors)
    tail_estimate: float       # residual decrease at the horizon end


def representation_value(problem: ControlProblem, x0, t_grid, dt: float = 0.02,
                         path_count: int = 4096, seed: int = 7,
                         extra_policies: dict | None = None) -> RepresentationValue:
    """inf over horizons and policies of E_g[min-stage-cost at X_t].

    One forward batch per policy is simulated to the largest horizon and
    truncated for the smaller ones, so all horizon values share paths.  The
    tail estimate is the last decrement of the minimising policy's horizon
    curve: a curve still falling at the final horizon signals that the
    infimum lies beyond the grid by roughly that amount.
    """
    g = split_driver(problem)
    x0 = np.asarray(x0, dtype=float).reshape(problem.dim)
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid <= 0) or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be positive and increasing")
    horizon = float(t_grid[-1])
    steps = np.rint(t_grid / dt).astype(int)
    if not np.allclose(steps * dt, t_grid, rtol=0.0, atol=1e-9):
        raise ValueError("every horizon must sit on the dt lattice")

    policies = {f"constant_{j}": ConstantPolicy(j)
                for j in range(len(problem.control_set))}
    if extra_policies:
        policies.update(extra_policies)
    driver = lambda x, z, u_idx: g(z)
    phi = problem.min_instant_cost

    table = {}
    best = None
    n_steps = int(round(horizon / dt))
    times = np.linspace(0.0, horizon, n_steps + 1)
    for name, pol in policies.items():
        batch = simulate_batch(problem, x0, pol, times, seed, path_count)
        vals = np.empty(t_grid.size)
        ses = np.empty(t_grid.size)
        for i, k in enumerate(steps):
            sub = _truncate(batch, int(k))
            path, _ = backward_semigroup(problem, x0, pol, 0.0, float(t_grid[i]),
                                         dt, path_count, seed,
                                         terminal=lambda b: phi(b.states[:, -1, :]),
                                         driver=driver, batch=sub)
            vals[i] = path.y0
            ses[i] = path.std_error
        table[name] = (vals, ses)
        i_min = int(vals.argmin())
        if best is None or vals[i_min] < best[1]:
            tail = max(0.0, float(vals[-2] - vals[-1])) if vals.size >= 2 else 0.0
            best = (name, float(vals[i_min]), float(ses[i_min]),
                    float(t_grid[i_min]), tail)

    return RepresentationValue(
        value=best[1], std_error=best[2], t_at_min=best[3],
        policy_at_min=best[0], table=table, tail_estimate=best[4],
    )


def representation_crosscheck(problem: ControlProblem, sweep: LambdaSweep,
                              nodes, t_grid, dt: float = 0.02,
                              path_count: int = 4096, seed: int = 7,
                              extra_slack: float = 0.0) -> ConditionReport:
    """Compare the g-expectation formula with the grid limit at sample nodes.

    The per-node budget adds three standard errors, the sweep's final
    Cauchy gap (how far the discount family itself is from its limit), a
    first-order interpolation allowance c0 h, and the horizon tail estimate.
    """
    w0 = sweep.w_limit(mode="auto")
    grid = sweep.grid
    field = sweep.fields[-1]
    sup_gap = float(np.abs(sweep.fields[-1].values - sweep.fields[-2].values).max()) \
        if len(sweep.fields) >= 2 else 0.0
    h = float(grid.h.max())
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    w0_field = ValueField(problem_name=field.problem_name, lam=field.lam,
                          grid=grid, values=w0, policy=field.policy,
                          residual_norm=0.0, iterations=0,
                          solver_tol=field.solver_tol, chain_dt=field.chain_dt)

    rows = []
    worst = None
    for x in nodes:
        rep = representation_value(problem, x, t_grid, dt=dt,
                                   path_count=path_count, seed=seed)
        w0_x = float(w0_field.interpolate(x.reshape(1, -1))[0])
        budget = 3.0 * rep.std_error + sup_gap + problem.nonexp_c0 * h \
            + rep.tail_estimate + extra_slack
        gap = abs(rep.value - w0_x)
        rows.append({"x": x.tolist(), "representation": rep.value,
                     "w0": w0_x, "gap": gap, "budget": budget,
                     "std_error": rep.std_error, "t_at_min": rep.t_at_min,
                     "policy": rep.policy_at_min})
        if worst is None or gap - budget > worst[0]:
            worst = (gap - budget, rows[-1])
    passed = all(r["gap"] <= r["budget"] for r in rows)
    return ConditionReport(
        name="representation_crosscheck",
        passed=bool(passed),
        details={"nodes": rows, "sup_gap": sup_gap, "grid_h": h},
        witness=None if passed else worst[1],
    )


# ---------------------------------------------------------------------------
# Recession-driver upper bound
# ---------------------------------------------------------------------------


def generalized_upper_bound(problem: ControlProblem, sweep: LambdaSweep, x0,
                            t: float, policy_index: int = 0, dt: float = 0.02,
                            path_count: int = 4096, seed: int = 9,
                            lambda_pair=(1e-3, 1e-4)) -> ConditionReport:
    """Upper-bound half of the representation with the recessed running cost.

    The driver is the small-discount recession
    psi~(x, z, u) = lim lambda psi(x, z / lambda, u), evaluated by two-point
    extrapolation in lambda; the terminal is the grid limit w0 at X_t.  Any
    fixed policy gives an upper bound, so the check is
    w0(x0) <= E_psi~[w0(X_t)] + slack.
    """
    lam_a, lam_b = lambda_pair
    if not lam_a > lam_b > 0:
        raise ValueError("lambda_pair must be decreasing and positive")

    def recessed(x, z, u_idx):
        # u_idx arrives as a per-path index array from the backward pass
        out = np.empty(x.shape[0])
        for j, uj in enumerate(problem.control_set):
            m = np.atleast_1d(u_idx) == j
            if m.any():
                va = lam_a * problem.running_cost(x[m], z[m] / lam_a, uj)
                vb = lam_b * problem.running_cost(x[m], z[m] / lam_b, uj)
                out[m] = (lam_a * vb - lam_b * va) / (lam_a - lam_b)
        return out

    w0 = sweep.w_limit(mode="auto")
    field = sweep.fields[-1]
    w0_field = ValueField(problem_name=field.problem_name, lam=field.lam,
                          grid=sweep.grid, values=w0, policy=field.policy,
                          residual_norm=0.0, iterations=0,
                          solver_tol=field.solver_tol, chain_dt=field.chain_dt)
    x0 = np.asarray(x0, dtype=float).reshape(problem.dim)
    lhs = float(w0_field.interpolate(x0.reshape(1, -1))[0])

    terminal = lambda b: w0_field.interpolate(b.states[:, -1, :])
    path, _ = backward_semigroup(problem, x0, ConstantPolicy(policy_index), 0.0,
                                 t, dt, path_count, seed, terminal=terminal,
                                 driver=recessed)
    rhs = float(path.y0)
    slack = 3.0 * path.std_error + problem.nonexp_c0 * float(sweep.grid.h.max()) \
        + 10.0 * dt
    passed = lhs <= rhs + slack
    return ConditionReport(
        name="generalized_upper_bound",
        passed=bool(passed),
        details={"lhs_w0": lhs, "rhs_recessed": rhs, "slack": slack,
                 "std_error": path.std_error, "t": float(t)},
        witness=None if passed else {"lhs": lhs, "rhs": rhs},
    )
