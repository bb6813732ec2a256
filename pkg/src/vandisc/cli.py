"""Command line front end.

Subcommands cover the full pipeline: grid solves of the discounted
equation, discount sweeps with the limit diagnostics, probabilistic BSDE
solves, the condition battery, the g-expectation representation, and the
dynamic-programming residual.  Every run can write machine-readable
outputs plus a manifest recording the invocation, the problem hash and
content hashes of everything written.

Exit codes: 0 success, 1 usage or runtime error, 2 at least one applicable
condition check failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time


def _set_threads(n: int | None):
    """Pin BLAS/OpenMP pools; must run before numpy is first imported."""
    if n is None:
        n = os.environ.get("VANDISC_THREADS")
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def _load_problem(spec: str):
    from .model import builtin_problem, parse_problem
    if spec.startswith("builtin:"):
        return builtin_problem(spec.split(":", 1)[1])
    with open(spec, "r", encoding="utf-8") as fh:
        return parse_problem(fh.read())


def _floats(text: str):
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _policy_from_spec(spec: str, problem, n_paths: int, horizon: float, seed: int):
    from .sde import ConstantPolicy, SwitchingPolicy
    if spec.startswith("constant:"):
        j = int(spec.split(":", 1)[1])
        if not 0 <= j < len(problem.control_set):
            raise ValueError(f"control index {j} out of range")
        return ConstantPolicy(j)
    if spec.startswith("switching"):
        hold = float(spec.split(":", 1)[1]) if ":" in spec else 0.1
        return SwitchingPolicy(len(problem.control_set), n_paths, horizon,
                               hold=hold, seed=seed)
    raise ValueError(f"unknown policy spec {spec!r}")


class _Emitter:
    """Collects output files and writes the manifest at the end."""

    def __init__(self, out_dir: str | None, argv, problem, seed: int):
        self.out_dir = out_dir
        self.argv = list(argv)
        self.problem = problem
        self.seed = seed
        self.t0 = time.time()
        self.written = {}
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def _record(self, name: str, data: bytes):
        path = os.path.join(self.out_dir, name)
        with open(path, "wb") as fh:
            fh.write(data)
        self.written[name] = hashlib.sha256(data).hexdigest()

    def json(self, name: str, payload):
        if not self.out_dir:
            return
        from .reports import _jsonable
        data = json.dumps(_jsonable(payload), indent=2, sort_keys=True).encode()
        self._record(name, data + b"\n")

    def csv(self, name: str, header, rows):
        if not self.out_dir:
            return
        import io
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
        self._record(name, buf.getvalue().encode())

    def finish(self):
        if not self.out_dir:
            return
        manifest = {
            "argv": self.argv,
            "problem": self.problem.name,
            "problem_hash": self.problem.problem_hash(),
            "seed": self.seed,
            "wall_clock_s": round(time.time() - self.t0, 3),
            "outputs": self.written,
        }
        data = json.dumps(manifest, indent=2, sort_keys=True).encode()
        path = os.path.join(self.out_dir, "manifest.json")
        with open(path, "wb") as fh:
            fh.write(data + b"\n")


def _print_report(rep):
    flag = "PASS" if rep.passed else ("SKIP" if not rep.applicable else "FAIL")
    if not rep.applicable:
        flag = "N/A "
    print(f"[{flag}] {rep.name}")
    if rep.witness and not rep.passed:
        print(f"       witness: {rep.witness}")


def _exit_code(reports) -> int:
    return 2 if any(r.failed for r in reports) else 0


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_solve_hjb(args, problem, emit: _Emitter) -> int:
    from .hjb import solve_discounted
    field = solve_discounted(problem, args.lam, args.grid_n, tol=args.tol)
    print(f"{problem.name}: lambda={args.lam} nodes={field.grid.n_nodes} "
          f"w in [{field.values.min():.6g}, {field.values.max():.6g}] "
          f"residual={field.residual_norm:.3g} iterations={field.iterations}")
    nodes = field.grid.nodes()
    header = [f"x{i+1}" for i in range(problem.dim)] + ["w", "policy_index"]
    rows = [list(map(float, nodes[i])) + [float(field.values.ravel()[i]),
                                          int(field.policy.ravel()[i])]
            for i in range(nodes.shape[0])]
    emit.csv("field.csv", header, rows)
    emit.json("field.json", {
        "problem": problem.name, "lambda": args.lam,
        "grid_n": list(field.grid.shape), "chain_dt": field.chain_dt,
        "residual_norm": field.residual_norm, "iterations": field.iterations,
        "solver_tol": field.solver_tol,
        "w_min": float(field.values.min()), "w_max": float(field.values.max()),
    })
    return 0


def _cmd_sweep_lambda(args, problem, emit: _Emitter) -> int:
    from .limit import (constancy_check, lambda_sweep, monotonicity_check,
                        pointwise_cost_bound, subsolution_residual)
    lambdas = _floats(args.lambdas)
    sweep = lambda_sweep(problem, lambdas, args.grid_n, tol=args.tol)
    mono = monotonicity_check(sweep)
    const = constancy_check(problem, sweep)
    bound = pointwise_cost_bound(sweep.fields[-1], problem)
    sub = subsolution_residual(problem, sweep, mode=args.limit_mode)
    reports = [mono, const, bound]
    for rep in reports:
        _print_report(rep)
    print(f"subsolution residual {sub.max_residual:.3g} over "
          f"{sub.residuals.size} interior nodes ({sub.diverged_count} diverged), "
          f"h={sub.h_max:.3g}")

    nodes = sweep.grid.nodes()
    header = [f"x{i+1}" for i in range(problem.dim)] + \
        [f"w_lam_{lam:g}" for lam in lambdas]
    cols = [f.values.ravel() for f in sweep.fields]
    rows = [list(map(float, nodes[i])) + [float(c[i]) for c in cols]
            for i in range(nodes.shape[0])]
    emit.csv("sweep.csv", header, rows)
    w0 = sweep.w_limit(mode=args.limit_mode)
    emit.csv("w0.csv", [f"x{i+1}" for i in range(problem.dim)] + ["w0"],
             [list(map(float, nodes[i])) + [float(w0.ravel()[i])]
              for i in range(nodes.shape[0])])
    emit.json("sweep.json", {
        "problem": problem.name, "lambdas": lambdas,
        "reports": [r.to_dict() for r in reports],
        "subsolution": {"max_residual": sub.max_residual,
                        "diverged_count": sub.diverged_count,
                        "h_max": sub.h_max, "mode": sub.mode},
        "fields": [{"lambda": f.lam, "residual_norm": f.residual_norm,
                    "iterations": f.iterations} for f in sweep.fields],
    })
    return _exit_code(reports)


def _cmd_bsde(args, problem, emit: _Emitter) -> int:
    from .bsde import solve_infinite_horizon, truncation_horizon, y_bound_check
    x0 = _floats(args.x0)
    m = truncation_horizon(problem.bound_M, args.lam, args.tol, args.window)
    policy = _policy_from_spec(args.policy, problem, args.paths,
                               horizon=m, seed=args.seed ^ 0x90C1)
    path = solve_infinite_horizon(problem, x0, policy, args.lam, tol=args.tol,
                                  dt=args.dt, path_count=args.paths,
                                  seed=args.seed, horizon_T=args.window)
    bound = y_bound_check(path, problem)
    print(f"{problem.name}: lambda={args.lam} y0={path.y0:.8g} "
          f"(std err {path.std_error:.2g}) truncation m={path.truncation_horizon:.4g} "
          f"tail<={path.tail_error_bound:.2g}")
    _print_report(bound)
    emit.csv("ypath.csv", ["t", "y_mean", "z_square_mean"],
             [[float(path.time_grid[k]), float(path.y_values[k]),
               float(path.z_square[k]) if k < path.z_square.size else 0.0]
              for k in range(path.time_grid.size)])
    emit.json("bsde.json", {
        "problem": problem.name, "lambda": args.lam, "x0": x0,
        "y0": path.y0, "std_error": path.std_error,
        "truncation_horizon": path.truncation_horizon,
        "tail_error_bound": path.tail_error_bound,
        "y_abs_max": path.y_abs_max, "dt": args.dt, "paths": args.paths,
        "bound_report": bound.to_dict(),
    })
    return _exit_code([bound])


def _condition_battery(args, problem, stochastic: bool):
    from .conditions import nonexpansivity_check, stochastic_nonexpansivity_probe
    from .limit import radial_monotonicity_check
    from .model import lipschitz_audit
    from .sde import invariance_check
    reports = [
        lipschitz_audit(problem, seed=args.seed),
        invariance_check(problem, seed=args.seed),
        nonexpansivity_check(problem, seed=args.seed),
        radial_monotonicity_check(problem, seed=args.seed),
    ]
    if stochastic:
        import numpy as np
        pair = problem.domain.sample(np.random.default_rng(args.seed), 2)
        reports.append(stochastic_nonexpansivity_probe(problem, pair[0], pair[1],
                                                       seed=args.seed + 17))
    return reports


def _cmd_audit(args, problem, emit: _Emitter) -> int:
    reports = _condition_battery(args, problem, stochastic=False)
    for rep in reports:
        _print_report(rep)
    emit.json("audit.json", {"problem": problem.name,
                             "reports": [r.to_dict() for r in reports]})
    return _exit_code(reports)


def _cmd_check_conditions(args, problem, emit: _Emitter) -> int:
    from .limit import (constancy_check, lambda_sweep, monotonicity_check,
                        pointwise_cost_bound)
    reports = _condition_battery(args, problem, stochastic=args.probe)
    lambdas = _floats(args.lambdas)
    sweep = lambda_sweep(problem, lambdas, args.grid_n, tol=args.tol)
    reports.append(monotonicity_check(sweep))
    reports.append(constancy_check(problem, sweep))
    reports.append(pointwise_cost_bound(sweep.fields[-1], problem))
    for rep in reports:
        _print_report(rep)
    emit.json("conditions.json", {"problem": problem.name,
                                  "lambdas": lambdas,
                                  "reports": [r.to_dict() for r in reports]})
    return _exit_code(reports)


def _cmd_represent(args, problem, emit: _Emitter) -> int:
    from .limit import lambda_sweep
    from .representation import representation_crosscheck, representation_value
    x0 = _floats(args.x0)
    t_grid = _floats(args.t_grid)
    rep = representation_value(problem, x0, t_grid, dt=args.dt,
                               path_count=args.paths, seed=args.seed)
    print(f"{problem.name}: representation value {rep.value:.8g} "
          f"(std err {rep.std_error:.2g}) at t={rep.t_at_min:g} "
          f"policy={rep.policy_at_min} tail~{rep.tail_estimate:.2g}")
    payload = {
        "problem": problem.name, "x0": x0, "t_grid": t_grid,
        "value": rep.value, "std_error": rep.std_error,
        "t_at_min": rep.t_at_min, "policy_at_min": rep.policy_at_min,
        "tail_estimate": rep.tail_estimate,
        "table": {name: {"values": list(map(float, v)),
                         "std_errors": list(map(float, s))}
                  for name, (v, s) in rep.table.items()},
    }
    reports = []
    if args.crosscheck:
        sweep = lambda_sweep(problem, _floats(args.lambdas), args.grid_n,
                             tol=args.tol)
        check = representation_crosscheck(problem, sweep, [x0], t_grid,
                                          dt=args.dt, path_count=args.paths,
                                          seed=args.seed)
        _print_report(check)
        payload["crosscheck"] = check.to_dict()
        reports.append(check)
    emit.json("represent.json", payload)
    return _exit_code(reports)


def _cmd_dpp_check(args, problem, emit: _Emitter) -> int:
    from .hjb import solve_discounted
    from .representation import dpp_residual
    field = solve_discounted(problem, args.lam, args.grid_n, tol=args.tol)
    x0 = _floats(args.x0)
    results = []
    ok = True
    for t in _floats(args.t_list):
        res = dpp_residual(problem, field, x0, t, dt=args.dt,
                           path_count=args.paths, seed=args.seed)
        budget = 3.0 * res.std_error + problem.nonexp_c0 * float(field.grid.h.max()) \
            + 10.0 * args.dt
        good = res.residual <= budget
        ok = ok and good
        flag = "PASS" if good else "FAIL"
        print(f"[{flag}] dpp t={t:g}: residual={res.residual:.4g} "
              f"budget={budget:.4g} policy={res.best_policy}")
        results.append({"t": t, "residual": res.residual, "budget": budget,
                        "value_pde": res.value_pde, "value_bsde": res.value_bsde,
                        "std_error": res.std_error, "best_policy": res.best_policy,
                        "passed": good})
    emit.json("dpp.json", {"problem": problem.name, "lambda": args.lam,
                           "x0": x0, "results": results})
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vandisc",
        description="Discounted control at desk scale: grid solves, BSDEs, "
                    "vanishing-discount sweeps and their structural checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--problem", required=True,
                       help="config file path or builtin:<name>")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("solve-hjb", help="solve the discounted equation on a grid")
    common(p)
    p.add_argument("--lam", type=float, required=True)
    p.add_argument("--grid-n", type=int, default=201)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=_cmd_solve_hjb)

    p = sub.add_parser("sweep-lambda", help="discount sweep with limit diagnostics")
    common(p)
    p.add_argument("--lambdas", default="1,0.5,0.25,0.125,0.0625,0.03125")
    p.add_argument("--grid-n", type=int, default=201)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--limit-mode", default="auto",
                   choices=("auto", "richardson", "last"))
    p.set_defaults(func=_cmd_sweep_lambda)

    p = sub.add_parser("bsde", help="infinite-horizon BSDE under one policy")
    common(p)
    p.add_argument("--lam", type=float, required=True)
    p.add_argument("--x0", required=True, help="comma separated start point")
    p.add_argument("--policy", default="constant:0",
                   help="constant:<index> or switching[:hold]")
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--paths", type=int, default=4096)
    p.add_argument("--tol", type=float, default=1e-4,
                   help="tail bound for the truncation horizon")
    p.add_argument("--window", type=float, default=1.0,
                   help="time window on which the tail bound must hold")
    p.set_defaults(func=_cmd_bsde)

    p = sub.add_parser("audit", help="static condition battery")
    common(p)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("check-conditions",
                       help="full condition battery including sweep checks")
    common(p)
    p.add_argument("--lambdas", default="0.5,0.25,0.125,0.0625")
    p.add_argument("--grid-n", type=int, default=101)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--probe", action="store_true",
                   help="also run the stochastic coupling probe")
    p.set_defaults(func=_cmd_check_conditions)

    p = sub.add_parser("represent", help="g-expectation representation of w0")
    common(p)
    p.add_argument("--x0", required=True)
    p.add_argument("--t-grid", default="1,2,3,4")
    p.add_argument("--dt", type=float, default=0.02)
    p.add_argument("--paths", type=int, default=4096)
    p.add_argument("--crosscheck", action="store_true")
    p.add_argument("--lambdas", default="0.5,0.25,0.125,0.0625,0.03125,0.015625")
    p.add_argument("--grid-n", type=int, default=201)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=_cmd_represent)

    p = sub.add_parser("dpp-check", help="dynamic programming residual")
    common(p)
    p.add_argument("--lam", type=float, required=True)
    p.add_argument("--x0", required=True)
    p.add_argument("--t-list", default="0.25,0.5")
    p.add_argument("--grid-n", type=int, default=401)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--paths", type=int, default=2048)
    p.set_defaults(func=_cmd_dpp_check)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    try:
        problem = _load_problem(args.problem)
        emit = _Emitter(args.out_dir, ["vandisc"] + argv, problem, args.seed)
        code = args.func(args, problem, emit)
        emit.finish()
        return code
    except (KeyError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
