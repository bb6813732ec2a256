"""Forward simulation of the controlled state equation.

Euler-Maruyama stepping with projection onto the closed domain keeps paths
admissible even when discrete noise overshoots a boundary the continuous
dynamics never cross.  ``invariance_check`` runs the same stepping without
projection and reports the worst boundary excursion, so domain-invariance
claims are measured rather than assumed.

Policies are vectorised callables mapping (t, states (n, N)) to an integer
array of control-set indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ControlProblem
from .reports import ConditionReport
from .rng import batch_normals, substream

__all__ = [
    "StatePath",
    "PathBatch",
    "ConstantPolicy",
    "SwitchingPolicy",
    "simulate",
    "simulate_batch",
    "invariance_check",
]


@dataclass(frozen=True)
class StatePath:
    times: np.ndarray       # (K+1,)
    states: np.ndarray      # (K+1, N)
    increments: np.ndarray  # (K, d) Brownian increments
    controls: np.ndarray    # (K,) control-set indices
    seed: int
    path_index: int


@dataclass(frozen=True)
class PathBatch:
    times: np.ndarray       # (K+1,)
    states: np.ndarray      # (n, K+1, N)
    increments: np.ndarray  # (n, K, d)
    controls: np.ndarray    # (n, K) int
    brownian: np.ndarray    # (n, K+1, d) cumulated noise, starts at 0
    seed: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def path(self, index: int) -> StatePath:
        return StatePath(self.times, self.states[index], self.increments[index],
                         self.controls[index], self.seed, index)


class ConstantPolicy:
    def __init__(self, index: int):
        self.index = int(index)

    def __call__(self, t, states):
        return np.full(states.shape[0], self.index, dtype=np.int64)


class SwitchingPolicy:
    """Piecewise-constant random control, resampled every ``hold`` time units.

    The switching table is drawn once from its own stream, so the policy is a
    deterministic function of (seed, path, time) independent of the driving
    noise.
    """

    def __init__(self, n_controls: int, n_paths: int, horizon: float,
                 hold: float = 0.1, seed: int = 0):
        self.hold = float(hold)
        slots = int(np.ceil(horizon / hold)) + 1
        gen = substream(seed, 0x5EED)
        self.table = gen.integers(0, n_controls, size=(n_paths, slots))

    def __call__(self, t, states):
        slot = int(t / self.hold)
        slot = min(slot, self.table.shape[1] - 1)
        return self.table[:, slot]


def simulate_batch(problem: ControlProblem, x0, policy, time_grid, seed: int,
                   n_paths: int, project: bool = True,
                   antithetic: bool = True) -> PathBatch:
    """Euler-Maruyama forward simulation of a path batch under one policy."""
    times = np.asarray(time_grid, dtype=float)
    if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("time_grid must be strictly increasing with >= 2 points")
    K = times.size - 1
    N, d = problem.dim, problem.noise_dim

    x0 = np.asarray(x0, dtype=float).reshape(N)
    if not problem.domain.contains(x0, tol=1e-12):
        raise ValueError(f"start point {x0} outside the domain")

    normals = batch_normals(seed, n_paths, K, d, antithetic=antithetic)
    states = np.empty((n_paths, K + 1, N))
    states[:, 0] = x0
    increments = np.empty((n_paths, K, d))
    controls = np.empty((n_paths, K), dtype=np.int64)

    n_controls = len(problem.control_set)
    for k in range(K):
        dt = times[k + 1] - times[k]
        dw = normals[:, k] * np.sqrt(dt)
        increments[:, k] = dw
        x = states[:, k]
        idx = np.asarray(policy(times[k], x), dtype=np.int64)
        controls[:, k] = idx
        nxt = np.empty_like(x)
        for j in range(n_controls):
            mask = idx == j
            if not mask.any():
                continue
            u = problem.control_set[j]
            xm = x[mask]
            b = problem.drift(xm, u)
            sig = problem.diffusion(xm, u)
            nxt[mask] = xm + b * dt + np.einsum("nij,nj->ni", sig, dw[mask])
        if project:
            nxt = problem.domain.project(nxt)
        states[:, k + 1] = nxt

    brownian = np.zeros((n_paths, K + 1, d))
    np.cumsum(increments, axis=1, out=brownian[:, 1:])
    return PathBatch(times=times, states=states, increments=increments,
                     controls=controls, brownian=brownian, seed=seed)


def simulate(problem: ControlProblem, x0, policy, time_grid, seed: int,
             path_index: int = 0, project: bool = True) -> StatePath:
    """Single-path convenience wrapper around :func:`simulate_batch`."""
    batch = simulate_batch(problem, x0, policy, time_grid, seed,
                           n_paths=path_index + 1, project=project,
                           antithetic=False)
    return batch.path(path_index)


def invariance_check(problem: ControlProblem, horizon: float = 4.0,
                     dt: float = 1e-3, paths_per_start: int = 8,
                     seed: int = 0, tol: float = 1e-9) -> ConditionReport:
    """Measure boundary excursions of unprojected dynamics.

    Starts at boundary-adjacent points plus the domain's center, runs every
    constant policy and one randomised switching policy, and reports the
    largest distance any path travels outside the closed domain.  A positive
    excursion is reported honestly; whether it is tolerable is the caller's
    call via ``tol``.
    """
    starts = list(problem.domain.boundary_adjacent(offset=1e-3))
    if hasattr(problem.domain, "center"):
        starts.append(np.asarray(problem.domain.center, dtype=float))
    else:
        starts.append(0.5 * (problem.domain.lower + problem.domain.upper))
    times = np.arange(0.0, horizon + dt / 2, dt)
    n_controls = len(problem.control_set)

    policies = [ConstantPolicy(j) for j in range(n_controls)]
    policies.append(SwitchingPolicy(n_controls, paths_per_start, horizon, seed=seed))

    max_excursion = 0.0
    witness = None
    samples = 0
    for s_idx, start in enumerate(starts):
        for p_idx, policy in enumerate(policies):
            batch = simulate_batch(problem, start, policy, times, seed + s_idx,
                                   n_paths=paths_per_start, project=False)
            samples += paths_per_start
            dist = problem.domain.distance_outside(batch.states)
            worst = float(dist.max())
            if worst > max_excursion:
                max_excursion = worst
                path, step = np.unravel_index(int(dist.argmax()), dist.shape)
                witness = {
                    "start": np.asarray(start),
                    "policy": "switching" if p_idx == n_controls else f"constant_{p_idx}",
                    "seed": seed + s_idx,
                    "path_index": int(path),
                    "time": float(times[step]),
                }
    details = {
        "sample_count": samples,
        "max_excursion": max_excursion,
        "horizon": horizon,
        "dt": dt,
    }
    return ConditionReport(name="invariance_check", passed=max_excursion <= tol,
                           details=details, witness=witness)
