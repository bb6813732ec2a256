"""Backward SDE solvers: discounted drivers, truncation, g-expectations.

One backward engine serves every consumer.  Forward paths come from
:mod:`vandisc.sde`; conditional expectations are estimated by least-squares
regression on polynomial features of the current state (optionally extended
by the running Brownian motion); the Z process is read off the regression
of Y_{k+1} * dW_k / dt; the discount term is treated implicitly, i.e.

    Y_k = (E[Y_{k+1} | F_k] + dt * driver(X_k, Z_k, u_k)) / (1 + lambda * dt)

which is unconditionally stable in the discount.

Two exactness mechanisms matter downstream.  First, when Y_{k+1} is
cross-sectionally constant the conditional expectation is that constant and
Z_k is exactly zero (a constant is independent of the next increment), so
deterministic dynamics produce machine-exact Riemann sums instead of noisy
regressions.  Second, increments are antithetic, so empirical means that
should vanish do vanish.

Infinite-horizon problems are truncated: with |driver(x,0,u)| <= M the
truncated solution differs from the true one on [0, T] by at most
(M/lambda) * exp(-lambda * (m - T)) when solved on [0, m], which picks m
from the requested tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product as _iterproduct

import numpy as np

from .model import ControlProblem
from .reports import ConditionReport
from .sde import PathBatch, simulate_batch

__all__ = [
    "BsdePath",
    "GExpectationResult",
    "truncation_horizon",
    "solve_finite_horizon",
    "solve_infinite_horizon",
    "backward_semigroup",
    "y_bound_check",
    "g_expectation",
]


# ---------------------------------------------------------------------------
# Polynomial regression for conditional expectations
# ---------------------------------------------------------------------------


class _PolyModel:
    """Least-squares polynomial conditional-expectation model.

    Constant feature columns are dropped (the intercept covers them); the
    remaining features are standardised before monomials are formed, which
    keeps the design well conditioned.  If the design is rank deficient the
    degree is lowered until it is not; the intercept is always present, so
    fitted values preserve the sample mean of the target exactly.
    """

    def __init__(self, keep, center, scale, exponents, coef, degree):
        self.keep = keep
        self.center = center
        self.scale = scale
        self.exponents = exponents
        self.coef = coef
        self.degree = degree

    @classmethod
    def fit(cls, features: np.ndarray, targets: np.ndarray, degree: int):
        std = features.std(axis=0)
        keep = std > 1e-12
        sub = features[:, keep]
        if sub.shape[1] == 0:
            coef = targets.mean(axis=0, keepdims=True)
            return cls(keep, None, None, [()], coef, 0)
        center = sub.mean(axis=0)
        scale = std[keep]
        norm = (sub - center) / scale
        deg = degree
        while True:
            exponents = _monomials(norm.shape[1], deg)
            design = _design_matrix(norm, exponents)
            coef, _, rank, _ = np.linalg.lstsq(design, targets, rcond=None)
            if rank == design.shape[1] or deg == 0:
                return cls(keep, center, scale, exponents, coef, deg)
            deg -= 1

    def predict(self, features: np.ndarray) -> np.ndarray:
        if self.center is None:
            return np.broadcast_to(self.coef, (features.shape[0], self.coef.shape[1])).copy()
        norm = (features[:, self.keep] - self.center) / self.scale
        return _design_matrix(norm, self.exponents) @ self.coef


def _monomials(m: int, degree: int):
    return [e for e in _iterproduct(range(degree + 1), repeat=m) if sum(e) <= degree]


def _design_matrix(norm: np.ndarray, exponents) -> np.ndarray:
    cols = [np.prod([norm[:, i] ** p for i, p in enumerate(e)], axis=0) if e else
            np.ones(norm.shape[0]) for e in exponents]
    return np.column_stack(cols)


def _features_at(batch: PathBatch, k: int, kind: str) -> np.ndarray:
    if kind == "state":
        return batch.states[:, k, :]
    if kind == "state+noise":
        return np.concatenate([batch.states[:, k, :], batch.brownian[:, k, :]], axis=1)
    raise ValueError(f"unknown feature kind {kind!r}")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _cost_driver(problem: ControlProblem):
    def rate(x, z, u_idx):
        out = np.empty(x.shape[0])
        for j, u in enumerate(problem.control_set):
            mask = u_idx == j
            if mask.any():
                out[mask] = problem.running_cost(x[mask], z[mask], u)
        return out
    return rate


@dataclass
class _BackwardResult:
    y: np.ndarray        # (n, K+1)
    z_mean: np.ndarray   # (K, d)
    z_square: np.ndarray  # (K,) cross-path mean of |Z_k|^2
    z_models: list | None


def _backward_pass(problem: ControlProblem, batch: PathBatch, lam: float,
                   driver, terminal_values: np.ndarray, degree: int,
                   features: str, keep_z_models: bool = False) -> _BackwardResult:
    times = batch.times
    K = times.size - 1
    n = batch.n_paths
    d = problem.noise_dim

    y = np.empty((n, K + 1))
    y[:, K] = terminal_values
    z_mean = np.zeros((K, d))
    z_square = np.zeros(K)
    z_models = [None] * K if keep_z_models else None

    for k in range(K - 1, -1, -1):
        dt = times[k + 1] - times[k]
        y_next = y[:, k + 1]
        if np.ptp(y_next) == 0.0:
            # constant next value: E[Y|F_k] = Y and E[Y dW] = 0 exactly
            ey = y_next.copy()
            z = np.zeros((n, d))
        else:
            feats = _features_at(batch, k, features)
            targets = np.column_stack(
                [y_next] + [y_next * batch.increments[:, k, j] / dt for j in range(d)])
            model = _PolyModel.fit(feats, targets, degree)
            preds = model.predict(feats)
            ey = preds[:, 0]
            z = preds[:, 1:]
            if keep_z_models:
                z_models[k] = model
        rate = driver(batch.states[:, k], z, batch.controls[:, k])
        y[:, k] = (ey + dt * rate) / (1.0 + lam * dt)
        z_mean[k] = z.mean(axis=0)
        z_square[k] = float((z * z).sum(axis=1).mean())

    return _BackwardResult(y=y, z_mean=z_mean, z_square=z_square, z_models=z_models)


def _block_standard_error(problem, batch, lam, driver, terminal_values, degree,
                          features, se_blocks: int) -> float:
    """Standard error from independent sub-ensemble reruns.

    Each block reruns the full backward pass on its own paths, so regression
    noise is captured, not just terminal-layer scatter.  Blocks respect
    antithetic pairing.  Fewer than 2 usable blocks yields 0.0 together with
    degenerate data (where the estimate is exact anyway).
    """
    n = batch.n_paths
    if se_blocks < 2 or n < 4 * se_blocks:
        return 0.0
    edges = np.linspace(0, n, se_blocks + 1).astype(int)
    edges = (edges // 2) * 2  # keep antithetic pairs inside one block
    vals = []
    for b in range(se_blocks):
        lo, hi = edges[b], edges[b + 1]
        if hi - lo < 2:
            continue
        sub = PathBatch(times=batch.times, states=batch.states[lo:hi],
                        increments=batch.increments[lo:hi],
                        controls=batch.controls[lo:hi],
                        brownian=batch.brownian[lo:hi], seed=batch.seed)
        res = _backward_pass(problem, sub, lam, driver, terminal_values[lo:hi],
                             degree, features)
        vals.append(res.y[:, 0].mean())
    vals = np.asarray(vals)
    if vals.size < 2:
        return 0.0
    return float(vals.std(ddof=1) / math.sqrt(vals.size))


# ---------------------------------------------------------------------------
# Public results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BsdePath:
    time_grid: np.ndarray
    y_values: np.ndarray        # (K+1,) cross-path mean of Y
    z_values: np.ndarray        # (K, d) cross-path mean of Z
    z_square: np.ndarray        # (K,) cross-path mean of |Z|^2
    lam: float
    truncation_horizon: float
    tail_error_bound: float
    std_error: float
    y_abs_max: float            # max over paths and times of |Y|

    @property
    def y0(self) -> float:
        return float(self.y_values[0])


@dataclass(frozen=True)
class GExpectationResult:
    value: float
    std_error: float
    y_values: np.ndarray
    z_values: np.ndarray
    degenerate: bool   # terminal was cross-sectionally constant


def truncation_horizon(bound_M: float, lam: float, tol: float, horizon_T: float) -> float:
    """Smallest solve horizon m >= T with tail bound (M/lam) e^{-lam (m-T)} <= tol."""
    if lam <= 0:
        raise ValueError("discount lambda must be positive")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    if bound_M == 0.0:
        return horizon_T
    extension = math.log(bound_M / (lam * tol)) / lam
    if extension * lam > 700.0:
        raise ValueError("tolerance too small for the floating-point range of the tail factor")
    return horizon_T + max(0.0, extension)


def _uniform_grid(horizon: float, dt: float) -> np.ndarray:
    steps = max(1, int(round(horizon / dt)))
    return np.linspace(0.0, horizon, steps + 1)


def backward_semigroup(problem: ControlProblem, x0, policy, lam: float,
                       horizon: float, dt: float, path_count: int, seed: int,
                       terminal=None, driver=None, degree: int = 4,
                       features: str = "state", se_blocks: int = 4,
                       antithetic: bool = True, batch: PathBatch | None = None
                       ) -> tuple[BsdePath, PathBatch]:
    """Evaluate the backward semigroup G_{0,T}[terminal] under one policy.

    ``terminal``: None (zero), a scalar, an array of per-path values, or a
    callable receiving the forward :class:`PathBatch` and returning per-path
    terminal values.  ``driver``: None for the problem's running cost, or a
    callable (x, z, u_idx) -> rate.  Returns the solved path summary and the
    forward batch (reusable by callers that evaluate several terminals).
    """
    if batch is None:
        grid = _uniform_grid(horizon, dt)
        batch = simulate_batch(problem, x0, policy, grid, seed, path_count,
                               antithetic=antithetic)
    n = batch.n_paths
    if terminal is None:
        terminal_values = np.zeros(n)
    elif callable(terminal):
        terminal_values = np.asarray(terminal(batch), dtype=float) * np.ones(n)
    else:
        terminal_values = np.asarray(terminal, dtype=float) * np.ones(n)
    if driver is None:
        driver = _cost_driver(problem)

    res = _backward_pass(problem, batch, lam, driver, terminal_values, degree, features)
    se = _block_standard_error(problem, batch, lam, driver, terminal_values,
                               degree, features, se_blocks)
    path = BsdePath(
        time_grid=batch.times,
        y_values=res.y.mean(axis=0),
        z_values=res.z_mean,
        z_square=res.z_square,
        lam=lam,
        truncation_horizon=float(batch.times[-1]),
        tail_error_bound=0.0,
        std_error=se,
        y_abs_max=float(np.abs(res.y).max()),
    )
    return path, batch


def solve_finite_horizon(problem: ControlProblem, x0, policy, lam: float,
                         horizon: float, dt: float, path_count: int, seed: int,
                         degree: int = 4, features: str = "state",
                         se_blocks: int = 4) -> BsdePath:
    """Solve the discounted BSDE with zero terminal condition on [0, horizon]."""
    path, _ = backward_semigroup(problem, x0, policy, lam, horizon, dt,
                                 path_count, seed, terminal=None,
                                 degree=degree, features=features,
                                 se_blocks=se_blocks)
    return path


def solve_infinite_horizon(problem: ControlProblem, x0, policy, lam: float,
                           tol: float, dt: float, path_count: int, seed: int,
                           horizon_T: float = 1.0, degree: int = 4,
                           features: str = "state", se_blocks: int = 4,
                           keep_z_models: bool = False):
    """Truncation solve of the infinite-horizon discounted BSDE.

    Picks the horizon m from the tail bound, solves with zero terminal and
    reports the tail error bound valid on [0, horizon_T].  With
    ``keep_z_models`` the per-step Z regression models are returned as a
    second value (for reuse by measure-change diagnostics).
    """
    m = truncation_horizon(problem.bound_M, lam, tol, horizon_T)
    tail = (problem.bound_M / lam) * math.exp(-lam * (m - horizon_T)) if problem.bound_M else 0.0
    grid = _uniform_grid(m, dt)
    batch = simulate_batch(problem, x0, policy, grid, seed, path_count)
    driver = _cost_driver(problem)
    terminal_values = np.zeros(batch.n_paths)
    res = _backward_pass(problem, batch, lam, driver, terminal_values, degree,
                         features, keep_z_models=keep_z_models)
    se = _block_standard_error(problem, batch, lam, driver, terminal_values,
                               degree, features, se_blocks)
    path = BsdePath(
        time_grid=grid,
        y_values=res.y.mean(axis=0),
        z_values=res.z_mean,
        z_square=res.z_square,
        lam=lam,
        truncation_horizon=m,
        tail_error_bound=tail,
        std_error=se,
        y_abs_max=float(np.abs(res.y).max()),
    )
    if keep_z_models:
        return path, res.z_models
    return path


def y_bound_check(path: BsdePath, problem: ControlProblem,
                  energy_slack: float = 1.05) -> ConditionReport:
    """Check the a-priori bounds of the discounted BSDE solution.

    Verifies max_k |Y_k| <= M/lambda + tail_error_bound and the discounted
    Z energy sum_k e^{-2 lambda t_k} |Z_k|^2 dt <= 2 (M/lambda)^2
    (2 + K_z^2/lambda) * energy_slack, the slack absorbing discretisation.
    """
    lam = path.lam
    M = problem.bound_M
    y_cap = M / lam + path.tail_error_bound
    y_max = float(np.abs(path.y_values).max())
    tol = 1e-12 * (1.0 + y_cap)

    dt = np.diff(path.time_grid)
    weights = np.exp(-2.0 * lam * path.time_grid[:-1])
    energy = float((weights * path.z_square * dt).sum())
    energy_cap = 2.0 * (M / lam) ** 2 * (2.0 + problem.lip_Kz ** 2 / lam)

    y_ok = y_max <= y_cap + tol
    e_ok = energy <= energy_cap * energy_slack + tol
    details = {
        "y_max": y_max, "y_cap": y_cap,
        "z_energy": energy, "z_energy_cap": energy_cap,
        "y_abs_max_paths": path.y_abs_max,
        "lambda": lam,
    }
    witness = None
    if not (y_ok and e_ok):
        witness = {"y_max": y_max, "y_cap": y_cap, "z_energy": energy,
                   "z_energy_cap": energy_cap}
    return ConditionReport(name="y_bound_check", passed=bool(y_ok and e_ok),
                           details=details, witness=witness)


def g_expectation(problem: ControlProblem, g, terminal, x0, policy,
                  horizon: float, dt: float, path_count: int, seed: int,
                  degree: int = 4, features: str = "state+noise",
                  se_blocks: int = 8) -> GExpectationResult:
    """Nonlinear expectation of ``terminal`` under the driver g(z).

    ``terminal`` is a callable on the forward :class:`PathBatch` (or a
    constant).  A cross-sectionally constant terminal short-circuits to the
    constant itself with zero error: constants are fixed points because
    g(0) = 0.  With g identically zero the estimator collapses to the plain
    sample mean of the terminal values (intercept regression preserves
    means exactly).
    """
    grid = _uniform_grid(horizon, dt)
    batch = simulate_batch(problem, x0, policy, grid, seed, path_count)
    if callable(terminal):
        eta = np.asarray(terminal(batch), dtype=float) * np.ones(batch.n_paths)
    else:
        eta = float(terminal) * np.ones(batch.n_paths)

    if np.ptp(eta) == 0.0:
        K = grid.size - 1
        const = float(eta[0])
        return GExpectationResult(value=const, std_error=0.0,
                                  y_values=np.full(K + 1, const),
                                  z_values=np.zeros((K, problem.noise_dim)),
                                  degenerate=True)

    driver = lambda x, z, u_idx: g(z)
    res = _backward_pass(problem, batch, 0.0, driver, eta, degree, features)
    se = _block_standard_error(problem, batch, 0.0, driver, eta, degree,
                               features, se_blocks)
    return GExpectationResult(value=float(res.y[:, 0].mean()), std_error=se,
                              y_values=res.y.mean(axis=0), z_values=res.z_mean,
                              degenerate=False)
