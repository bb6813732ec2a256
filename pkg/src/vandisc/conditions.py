"""Nonexpansive coupling of controlled paths and its Monte Carlo probe.

The structural condition on the dynamics asks that for every pair of states
and every control u there is a response v making the one-sided coupling gap

    g(x, x', u, v) = <x - x', b(x,u) - b(x',v)>
                     + 0.5 |sigma(x,u) - sigma(x',v)|_F^2
                     + K_z |sigma(x,u) - sigma(x',v)|_F |x - x'|

nonpositive.  The last term budgets for an adversarial Girsanov drift of
size K_z induced by the z slot of the running cost.  Under this condition
coupled paths driven by common noise stay within their initial distance in
the weighted mean-square sense, and discounted cost differences stay within
c0 |x - x'|, uniformly in the discount.  The static check samples the gap;
the stochastic probe simulates the coupled pair under the adversarial
measure and verifies both consequences directly.
"""

from __future__ import annotations

import numpy as np

from .model import ControlProblem
from .reports import ConditionReport
from .rng import batch_normals, substream
from .sde import SwitchingPolicy

__all__ = [
    "coupling_gap",
    "nonexpansivity_check",
    "feedback_selector",
    "stochastic_nonexpansivity_probe",
]


def coupling_gap(problem: ControlProblem, x, x_prime, u, v):
    """The coupling gap g(x, x', u, v); broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    delta = x - x_prime
    db = problem.drift(x, u) - problem.drift(x_prime, v)
    dsig = problem.diffusion(x, u) - problem.diffusion(x_prime, v)
    dsig_norm = np.linalg.norm(dsig, axis=(-2, -1))
    dist = np.linalg.norm(delta, axis=-1)
    return ((delta * db).sum(axis=-1) + 0.5 * dsig_norm ** 2
            + problem.lip_Kz * dsig_norm * dist)


def _gap_table(problem: ControlProblem, x, x_prime, u_index: int):
    """Gap against every response v: shape (K, ...)."""
    u = problem.control(u_index)
    return np.stack([coupling_gap(problem, x, x_prime, u, v)
                     for v in problem.control_set])


def feedback_selector(problem: ControlProblem):
    """Response map (x, x', u_index) -> v index minimising the coupling gap.

    Mirroring the control (v = u) wins whenever it ties the minimum, so the
    selector keeps coincident paths coincident; other ties break to the
    lowest control index.  Also returns the achieved gap.
    """

    def select(x, x_prime, u_indices):
        x = np.asarray(x, dtype=float)
        x_prime = np.asarray(x_prime, dtype=float)
        u_indices = np.asarray(u_indices)
        v_idx = np.empty(u_indices.shape, dtype=np.int64)
        gap = np.empty(u_indices.shape, dtype=float)
        for j in range(len(problem.control_set)):
            mask = u_indices == j
            if not mask.any():
                continue
            table = _gap_table(problem, x[mask], x_prime[mask], j)
            best = table.argmin(axis=0)
            gmin = table.min(axis=0)
            tie = table[j] <= gmin + 1e-12 * (1.0 + np.abs(gmin))
            v_idx[mask] = np.where(tie, j, best)
            gap[mask] = np.where(tie, table[j], gmin)
        return v_idx, gap

    return select


def nonexpansivity_check(problem: ControlProblem, n_pairs: int = 512,
                         seed: int = 0, tol: float = 1e-9,
                         cost_tol: float | None = None) -> ConditionReport:
    """Sampled check of the coupling condition and its cost counterpart.

    For each sampled (x, x', u) the best response must close the gap to
    within `tol` (relative to |x - x'|^2), and at that response the
    zero-z running costs must differ by at most c0 |x - x'|.
    """
    rng = substream(seed, 0xC0DE)
    x = problem.domain.sample(rng, n_pairs)
    x_prime = problem.domain.sample(rng, n_pairs)
    dist = np.linalg.norm(x - x_prime, axis=-1)
    scale = np.maximum(dist ** 2, 1e-12)
    if cost_tol is None:
        cost_tol = tol

    worst_gap = -np.inf
    worst_cost = -np.inf
    witness = None
    zeros = np.zeros((n_pairs, problem.noise_dim))
    for j, u in enumerate(problem.control_set):
        table = _gap_table(problem, x, x_prime, j)
        v_idx = table.argmin(axis=0)
        gap_rel = table.min(axis=0) / scale
        cost_u = problem.running_cost(x, zeros, u)
        cost_v = np.stack([problem.running_cost(x_prime, zeros, v)
                           for v in problem.control_set])[v_idx, np.arange(n_pairs)]
        cost_excess = np.abs(cost_u - cost_v) - problem.nonexp_c0 * dist
        k = int(np.argmax(gap_rel))
        if gap_rel[k] > worst_gap:
            worst_gap = float(gap_rel[k])
            if gap_rel[k] > tol:
                witness = {"x": x[k].tolist(), "x_prime": x_prime[k].tolist(),
                           "u_index": j, "v_index": int(v_idx[k]),
                           "gap": float(table.min(axis=0)[k]),
                           "distance": float(dist[k])}
        worst_cost = max(worst_cost, float(cost_excess.max()))
    passed = worst_gap <= tol and worst_cost <= cost_tol
    return ConditionReport(
        name="nonexpansivity",
        passed=bool(passed),
        details={"worst_relative_gap": worst_gap, "worst_cost_excess": worst_cost,
                 "n_pairs": n_pairs, "tol": tol},
        witness=witness,
    )


def stochastic_nonexpansivity_probe(problem: ControlProblem, x0, x0_prime,
                                    lam: float = 0.5, horizon: float = 4.0,
                                    dt: float = 0.01, n_paths: int = 4096,
                                    seed: int = 11, hold: float = 0.25) -> ConditionReport:
    """Simulate the coupled pair under the adversarial measure and verify
    the two consequences of the coupling condition.

    The primary path follows a switching control; the shadow path responds
    through the gap-minimising selector with the same Brownian increments.
    The change of measure applies the worst-case drift of size K_z aligned
    with (sigma - sigma')^T (X - X'), accumulated as an exponential
    martingale weight.  Checks, each with a three-standard-error budget
    plus an O(dt) discretisation allowance:

      (i)  sup_t (E[L_t |X_t - X'_t|^2])^{1/2} <= |x0 - x0'| + slack
      (ii) |E[ integral of lam e^{-lam t} (psi(X,0,u) - psi(X',0,v)) dt ]|
           <= c0 |x0 - x0'| + slack

    plus the sanity identity E[L_t] = 1 within four standard errors.
    """
    x0 = np.asarray(x0, dtype=float).reshape(problem.dim)
    x0_prime = np.asarray(x0_prime, dtype=float).reshape(problem.dim)
    n_steps = int(round(horizon / dt))
    select = feedback_selector(problem)
    policy = SwitchingPolicy(len(problem.control_set), n_paths, horizon, hold=hold,
                             seed=seed ^ 0x51DE)
    times = np.linspace(0.0, horizon, n_steps + 1)
    dw = batch_normals(seed, n_paths, n_steps, problem.noise_dim,
                       antithetic=False) * np.sqrt(dt)
    X = np.tile(x0, (n_paths, 1))
    Xp = np.tile(x0_prime, (n_paths, 1))
    logL = np.zeros(n_paths)
    d0 = float(np.linalg.norm(x0 - x0_prime))

    sq_means = np.empty(n_steps + 1)
    sq_ses = np.empty(n_steps + 1)
    weight_means = np.empty(n_steps + 1)
    weight_ses = np.empty(n_steps + 1)
    cost_acc = np.zeros(n_paths)

    def weighted_stats(values, weights):
        w = np.exp(weights)
        prod = w * values
        return float(prod.mean()), float(prod.std(ddof=1) / np.sqrt(n_paths))

    for k in range(n_steps + 1):
        L_mean, L_se = weighted_stats(np.ones(n_paths), logL)
        weight_means[k] = L_mean
        weight_ses[k] = L_se
        sq, sq_se = weighted_stats(((X - Xp) ** 2).sum(axis=1), logL)
        sq_means[k] = sq
        sq_ses[k] = sq_se
        if k == n_steps:
            break
        u_idx = policy(times[k], X)
        v_idx, _ = select(X, Xp, u_idx)
        t = times[k]
        disc = lam * np.exp(-lam * t) * dt
        zeros = np.zeros((n_paths, problem.noise_dim))
        psi_u = np.empty(n_paths)
        psi_v = np.empty(n_paths)
        bX = np.empty_like(X)
        sX = np.empty((n_paths, problem.dim, problem.noise_dim))
        bXp = np.empty_like(Xp)
        sXp = np.empty_like(sX)
        for j, u in enumerate(problem.control_set):
            m = u_idx == j
            if m.any():
                bX[m] = problem.drift(X[m], u)
                sX[m] = problem.diffusion(X[m], u)
                psi_u[m] = problem.running_cost(X[m], zeros[m], u)
            m = v_idx == j
            if m.any():
                bXp[m] = problem.drift(Xp[m], u)
                sXp[m] = problem.diffusion(Xp[m], u)
                psi_v[m] = problem.running_cost(Xp[m], zeros[m], u)
        cost_acc += disc * (psi_u - psi_v)
        # adversarial drift: K_z along (sigma - sigma')^T (X - X')
        dsig = sX - sXp
        direction = np.einsum("nij,ni->nj", dsig, X - Xp)
        norm = np.linalg.norm(direction, axis=1, keepdims=True)
        gamma = problem.lip_Kz * direction / np.maximum(norm, 1e-300)
        gamma[norm[:, 0] < 1e-14] = 0.0
        logL += (gamma * dw[:, k, :]).sum(axis=1) - 0.5 * (gamma ** 2).sum(axis=1) * dt
        # the coupled pair moves under the shifted measure: dW = dW~ + gamma dt
        drift_shift_X = np.einsum("nij,nj->ni", sX, gamma)
        drift_shift_Xp = np.einsum("nij,nj->ni", sXp, gamma)
        X = X + (bX + drift_shift_X) * dt + np.einsum("nij,nj->ni", sX, dw[:, k, :])
        Xp = Xp + (bXp + drift_shift_Xp) * dt + np.einsum("nij,nj->ni", sXp, dw[:, k, :])
        X = problem.domain.project(X)
        Xp = problem.domain.project(Xp)

    w = np.exp(logL)
    cost_gap = float((w * cost_acc).mean())
    cost_se = float((w * cost_acc).std(ddof=1) / np.sqrt(n_paths))

    rms = np.sqrt(np.maximum(sq_means, 0.0))
    rms_slack = 3.0 * sq_ses / np.maximum(2.0 * rms, 1e-12) + 10.0 * dt * (d0 + dt)
    contract_ok = bool(np.all(rms <= d0 + rms_slack))
    cost_slack = 3.0 * cost_se + 10.0 * dt
    cost_ok = abs(cost_gap) <= problem.nonexp_c0 * d0 + cost_slack
    weight_ok = bool(np.all(np.abs(weight_means - 1.0) <= 4.0 * weight_ses + 1e-12))

    worst_k = int(np.argmax(rms - (d0 + rms_slack)))
    return ConditionReport(
        name="stochastic_nonexpansivity",
        passed=bool(contract_ok and cost_ok and weight_ok),
        details={
            "initial_distance": d0,
            "worst_rms_distance": float(rms.max()),
            "rms_excess": float((rms - (d0 + rms_slack)).max()),
            "cost_gap": cost_gap,
            "cost_budget": problem.nonexp_c0 * d0 + cost_slack,
            "weight_mean_final": float(weight_means[-1]),
            "weight_se_final": float(weight_ses[-1]),
            "n_paths": n_paths, "dt": dt, "lambda": lam,
        },
        witness=None if (contract_ok and cost_ok and weight_ok) else {
            "time": float(times[worst_k]), "rms": float(rms[worst_k]),
        },
    )
