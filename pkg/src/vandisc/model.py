"""Problem containers: controlled dynamics, costs, domains and audits.

A control problem bundles drift b(x,u), diffusion sigma(x,u), running cost
psi(x,z,u), a finite control set, a compact state domain and the declared
structural constants (cost bound M, Lipschitz moduli K_x/K_z, coefficient
growth c, nonexpansivity modulus c0, envelope cap M0).  Problems are declared
either through the small expression language in :mod:`vandisc.expressions`
(INI-style config text) or pulled from the builtin catalog.

``lipschitz_audit`` verifies that the declared constants dominate empirical
difference quotients on quasi-random samples, so downstream bounds that
quote M, K_z, c0 etc. rest on checked declarations rather than trust.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .expressions import ExpressionError, compile_expression
from .reports import ConditionReport

__all__ = [
    "Box",
    "Ball",
    "SplitCost",
    "ControlProblem",
    "ProblemConfig",
    "ConfigError",
    "parse_config",
    "parse_problem",
    "builtin_problem",
    "catalog_names",
    "lipschitz_audit",
]


class ConfigError(ValueError):
    """Malformed problem configuration (missing keys, bad dimensions...)."""


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ConfigError("box needs lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def project(self, x):
        return np.clip(x, self.lower, self.upper)

    def distance_outside(self, x):
        """Euclidean distance from x to the box, 0 inside."""
        x = np.asarray(x, dtype=float)
        excess = np.maximum(np.maximum(x - self.upper, self.lower - x), 0.0)
        return np.linalg.norm(excess, axis=-1)

    def sample(self, rng: np.random.Generator, n: int):
        u = rng.random((n, self.dim))
        return self.lower + u * (self.upper - self.lower)

    def boundary_adjacent(self, offset: float):
        """Deterministic start points one ``offset`` inside each face/corner."""
        lo = self.lower + offset
        hi = self.upper - offset
        mid = 0.5 * (self.lower + self.upper)
        points = []
        for i in range(self.dim):
            for val in (lo[i], hi[i]):
                p = mid.copy()
                p[i] = val
                points.append(p)
        # corners
        corners = np.stack(np.meshgrid(*[(lo[i], hi[i]) for i in range(self.dim)],
                                       indexing="ij"), axis=-1).reshape(-1, self.dim)
        points.extend(list(corners))
        return np.unique(np.array(points), axis=0)

    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        r = float(self.radius)
        if r <= 0:
            raise ConfigError("ball needs radius > 0")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", r)

    @property
    def dim(self) -> int:
        return self.center.size

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - self.center, axis=-1) <= self.radius + tol

    def project(self, x):
        x = np.asarray(x, dtype=float)
        delta = x - self.center
        dist = np.linalg.norm(delta, axis=-1, keepdims=True)
        scale = np.where(dist > self.radius, self.radius / np.maximum(dist, 1e-300), 1.0)
        return self.center + delta * scale

    def distance_outside(self, x):
        x = np.asarray(x, dtype=float)
        return np.maximum(np.linalg.norm(x - self.center, axis=-1) - self.radius, 0.0)

    def sample(self, rng: np.random.Generator, n: int):
        # rejection from the bounding box; acceptance >= pi/4 in dims 1-2
        out = np.empty((n, self.dim))
        filled = 0
        while filled < n:
            cand = self.center + self.radius * (2.0 * rng.random((2 * (n - filled), self.dim)) - 1.0)
            good = cand[self.contains(cand)]
            take = min(n - filled, good.shape[0])
            out[filled:filled + take] = good[:take]
            filled += take
        return out

    def boundary_adjacent(self, offset: float):
        r = self.radius - offset
        points = []
        for i in range(self.dim):
            for sgn in (-1.0, 1.0):
                p = self.center.copy()
                p[i] += sgn * r
                points.append(p)
        return np.array(points)

    def diameter(self) -> float:
        return 2.0 * self.radius


# ---------------------------------------------------------------------------
# Control problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitCost:
    """Cost split psi(x,z,u) = psi1(x,u) + g(z) with g(0)=0, positively
    homogeneous and concave; enables the g-expectation representation."""

    psi1: object  # callable (x, u) -> (...)
    g: object     # callable (z) -> (...)
    psi1_text: str
    g_text: str


@dataclass(frozen=True)
class ControlProblem:
    name: str
    dim: int
    noise_dim: int
    drift: object          # (x, u) -> (..., N)
    diffusion: object      # (x, u) -> (..., N, d)
    running_cost: object   # (x, z, u) -> (...)
    control_set: tuple     # tuple of (k,) ndarrays
    domain: object         # Box | Ball
    bound_M: float         # |psi(x, 0, u)| <= M on the domain
    lip_Kx: float          # x-Lipschitz modulus of psi
    lip_Kz: float          # z-Lipschitz modulus of psi
    growth_c: float        # coefficient Lipschitz/growth constant
    nonexp_c0: float       # nonexpansivity cost modulus
    cap_M0: float          # envelope cap, >= max(c0, M)
    split: SplitCost | None = None
    source_text: str = ""

    def __post_init__(self):
        if self.dim < 1 or self.noise_dim < 1:
            raise ConfigError("dim and noise_dim must be >= 1")
        if not self.control_set:
            raise ConfigError("control set must be nonempty")
        if self.cap_M0 <= 0 or self.cap_M0 < max(self.nonexp_c0, self.bound_M) - 1e-12:
            raise ConfigError("cap M0 must be positive and >= max(c0, M)")
        for bound in (self.bound_M, self.lip_Kx, self.lip_Kz, self.growth_c, self.nonexp_c0):
            if bound < 0:
                raise ConfigError("declared constants must be nonnegative")

    @property
    def control_dim(self) -> int:
        return self.control_set[0].size

    def control(self, index: int) -> np.ndarray:
        return self.control_set[index]

    def min_instant_cost(self, x):
        """min over the control set of psi(x, 0, v), vectorised in x."""
        x = np.asarray(x, dtype=float)
        z0 = np.zeros(x.shape[:-1] + (self.noise_dim,))
        vals = [self.running_cost(x, z0, v) for v in self.control_set]
        return np.min(np.stack([np.broadcast_to(v, x.shape[:-1]) for v in vals]), axis=0)

    def problem_hash(self) -> str:
        return hashlib.sha256(self.source_text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

_REQUIRED_CONSTANTS = ("M", "K_x", "K_z", "c", "c0", "M0")


@dataclass
class ProblemConfig:
    name: str
    dim: int
    noise_dim: int
    drift_exprs: list
    diffusion_exprs: list  # row-major, dim * noise_dim entries
    cost_expr: str
    psi1_expr: str | None
    g_expr: str | None
    domain_kind: str
    domain_params: dict
    constants: dict
    controls: list = field(default_factory=list)
    source_text: str = ""

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("[problem]\n")
        buf.write(f"name = {self.name}\n")
        buf.write(f"dim = {self.dim}\n")
        buf.write(f"noise_dim = {self.noise_dim}\n\n")
        buf.write("[dynamics]\n")
        buf.write(f"drift = {' ; '.join(self.drift_exprs)}\n")
        buf.write(f"diffusion = {' ; '.join(self.diffusion_exprs)}\n\n")
        buf.write("[cost]\n")
        buf.write(f"psi = {self.cost_expr}\n")
        if self.psi1_expr is not None:
            buf.write(f"psi1 = {self.psi1_expr}\n")
        if self.g_expr is not None:
            buf.write(f"g = {self.g_expr}\n")
        buf.write("\n[domain]\n")
        buf.write(f"kind = {self.domain_kind}\n")
        for key, val in self.domain_params.items():
            if isinstance(val, (list, tuple, np.ndarray)):
                buf.write(f"{key} = {', '.join(repr(float(v)) for v in np.atleast_1d(val))}\n")
            else:
                buf.write(f"{key} = {val!r}\n")
        buf.write("\n[constants]\n")
        for key in _REQUIRED_CONSTANTS:
            buf.write(f"{key} = {self.constants[key]!r}\n")
        buf.write("\n[controls]\n")
        buf.write("values = " + " ; ".join(
            ", ".join(repr(float(c)) for c in np.atleast_1d(ctrl)) for ctrl in self.controls
        ) + "\n")
        return buf.getvalue()

    def build(self) -> ControlProblem:
        return _build_problem(self)


def parse_config(text: str) -> ProblemConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    def need(section, key):
        if not cp.has_option(section, key):
            raise ConfigError(f"missing [{section}] {key}")
        return cp.get(section, key).strip()

    name = need("problem", "name")
    dim = int(need("problem", "dim"))
    noise_dim = int(need("problem", "noise_dim"))
    if not (1 <= dim <= 2) or not (1 <= noise_dim <= 2):
        raise ConfigError("dim and noise_dim must be 1 or 2 at desk scale")

    drift_exprs = [e.strip() for e in need("dynamics", "drift").split(";")]
    diffusion_exprs = [e.strip() for e in need("dynamics", "diffusion").split(";")]
    if len(drift_exprs) != dim:
        raise ConfigError(f"drift needs {dim} expression(s), got {len(drift_exprs)}")
    if len(diffusion_exprs) != dim * noise_dim:
        raise ConfigError(
            f"diffusion needs {dim * noise_dim} expression(s) (row-major), got {len(diffusion_exprs)}")

    cost_expr = need("cost", "psi")
    psi1_expr = cp.get("cost", "psi1").strip() if cp.has_option("cost", "psi1") else None
    g_expr = cp.get("cost", "g").strip() if cp.has_option("cost", "g") else None
    if (psi1_expr is None) != (g_expr is None):
        raise ConfigError("split cost needs both psi1 and g")

    kind = need("domain", "kind")
    if kind == "box":
        lower = _parse_vector(need("domain", "lower"), dim, "lower")
        upper = _parse_vector(need("domain", "upper"), dim, "upper")
        domain_params = {"lower": lower, "upper": upper}
    elif kind == "ball":
        center = _parse_vector(need("domain", "center"), dim, "center")
        radius = float(need("domain", "radius"))
        domain_params = {"center": center, "radius": radius}
    else:
        raise ConfigError(f"unknown domain kind {kind!r} (box or ball)")

    constants = {}
    for key in _REQUIRED_CONSTANTS:
        constants[key] = float(need("constants", key))

    raw_controls = need("controls", "values")
    controls = []
    for chunk in raw_controls.split(";"):
        try:
            vec = np.array([float(v) for v in chunk.split(",")], dtype=float)
        except ValueError:
            raise ConfigError(f"bad control value {chunk.strip()!r}") from None
        controls.append(vec)
    if not controls:
        raise ConfigError("empty control set")
    k = controls[0].size
    if any(c.size != k for c in controls):
        raise ConfigError("all control values must share one embedding dimension")

    return ProblemConfig(
        name=name, dim=dim, noise_dim=noise_dim,
        drift_exprs=drift_exprs, diffusion_exprs=diffusion_exprs,
        cost_expr=cost_expr, psi1_expr=psi1_expr, g_expr=g_expr,
        domain_kind=kind, domain_params=domain_params,
        constants=constants, controls=controls, source_text=text,
    )


def _parse_vector(text: str, dim: int, label: str) -> np.ndarray:
    vals = np.array([float(v) for v in text.split(",")], dtype=float)
    if vals.size == 1:
        vals = np.full(dim, vals[0])
    if vals.size != dim:
        raise ConfigError(f"{label} needs {dim} component(s)")
    return vals


def _vector_fn(exprs, allowed, out_shape):
    """Compile a list of expressions into one (env -> stacked array) closure."""
    compiled = [compile_expression(e, allowed)[1] for e in exprs]

    def evaluate(env, lead_shape):
        cols = [np.broadcast_to(np.asarray(fn(env), dtype=float), lead_shape) for fn in compiled]
        return np.stack(cols, axis=-1).reshape(lead_shape + out_shape)

    return evaluate


def _build_problem(cfg: ProblemConfig) -> ControlProblem:
    N, d = cfg.dim, cfg.noise_dim
    k = cfg.controls[0].size
    x_names = {f"x{i + 1}" for i in range(N)}
    z_names = {f"z{i + 1}" for i in range(d)}
    u_names = {f"u{i + 1}" for i in range(k)}

    try:
        drift_eval = _vector_fn(cfg.drift_exprs, x_names | u_names, (N,))
        diff_eval = _vector_fn(cfg.diffusion_exprs, x_names | u_names, (N, d))
        _, cost_eval = compile_expression(cfg.cost_expr, x_names | z_names | u_names)
    except ExpressionError as exc:
        raise ConfigError(f"bad dynamics/cost expression: {exc}") from exc

    def base_env(x, u):
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        env = {f"x{i + 1}": x[..., i] for i in range(N)}
        env.update({f"u{i + 1}": u[i] for i in range(k)})
        return env, x.shape[:-1]

    def drift(x, u):
        env, lead = base_env(x, u)
        return drift_eval(env, lead)

    def diffusion(x, u):
        env, lead = base_env(x, u)
        return diff_eval(env, lead)

    def running_cost(x, z, u):
        env, lead = base_env(x, u)
        z = np.asarray(z, dtype=float)
        env.update({f"z{i + 1}": z[..., i] for i in range(d)})
        return np.broadcast_to(np.asarray(cost_eval(env), dtype=float), lead).copy()

    split = None
    if cfg.psi1_expr is not None:
        try:
            _, psi1_eval = compile_expression(cfg.psi1_expr, x_names | u_names)
            _, g_eval = compile_expression(cfg.g_expr, z_names)
        except ExpressionError as exc:
            raise ConfigError(f"bad split cost expression: {exc}") from exc

        def psi1(x, u):
            env, lead = base_env(x, u)
            return np.broadcast_to(np.asarray(psi1_eval(env), dtype=float), lead).copy()

        def g(z):
            z = np.asarray(z, dtype=float)
            env = {f"z{i + 1}": z[..., i] for i in range(d)}
            return np.broadcast_to(np.asarray(g_eval(env), dtype=float), z.shape[:-1]).copy()

        split = SplitCost(psi1=psi1, g=g, psi1_text=cfg.psi1_expr, g_text=cfg.g_expr)

    if cfg.domain_kind == "box":
        domain = Box(cfg.domain_params["lower"], cfg.domain_params["upper"])
    else:
        domain = Ball(cfg.domain_params["center"], cfg.domain_params["radius"])
    if domain.dim != N:
        raise ConfigError("domain dimension does not match problem dim")

    return ControlProblem(
        name=cfg.name, dim=N, noise_dim=d,
        drift=drift, diffusion=diffusion, running_cost=running_cost,
        control_set=tuple(np.asarray(c, dtype=float) for c in cfg.controls),
        domain=domain,
        bound_M=cfg.constants["M"], lip_Kx=cfg.constants["K_x"], lip_Kz=cfg.constants["K_z"],
        growth_c=cfg.constants["c"], nonexp_c0=cfg.constants["c0"], cap_M0=cfg.constants["M0"],
        split=split, source_text=cfg.source_text or cfg.to_text(),
    )


def parse_problem(text: str) -> ControlProblem:
    """Parse config text (sections [problem], [dynamics], [cost], [domain],
    [constants], [controls]) into a validated problem."""
    return parse_config(text).build()


# ---------------------------------------------------------------------------
# Builtin catalog
# ---------------------------------------------------------------------------

_CATALOG = {
    # 1d linear dynamics with multiplicative noise and pure-z cost; the
    # coupling function below evaluates to -(3/2)|x-x'|^2 in closed form.
    "example_2_3": """
[problem]
name = example_2_3
dim = 1
noise_dim = 1
[dynamics]
drift = -3*x1
diffusion = x1
[cost]
psi = z1
psi1 = 0
g = z1
[domain]
kind = box
lower = -1
upper = 1
[constants]
M = 0
K_x = 0
K_z = 1
c = 4
c0 = 1
M0 = 2
[controls]
values = 0
""",
    # frozen dynamics, unit cost: every value reduces to closed form 1/lambda
    "constant_cost": """
[problem]
name = constant_cost
dim = 1
noise_dim = 1
[dynamics]
drift = 0
diffusion = 0
[cost]
psi = 1
psi1 = 1
g = 0
[domain]
kind = box
lower = -1
upper = 1
[constants]
M = 1
K_x = 0
K_z = 0
c = 1
c0 = 1
M0 = 2
[controls]
values = 0
""",
    # controlled exponential decay with quadratic cost;
    # discounted value solves lambda*V + u*x*V' = x^2 => lambda*V = lambda*x^2/(lambda+2)
    "decay_quadratic": """
[problem]
name = decay_quadratic
dim = 1
noise_dim = 1
[dynamics]
drift = -u1*x1
diffusion = 0
[cost]
psi = x1^2
psi1 = x1^2
g = 0
[domain]
kind = box
lower = -1
upper = 1
[constants]
M = 1
K_x = 2
K_z = 0
c = 1
c0 = 2
M0 = 2
[controls]
values = 0.5 ; 1
""",
    # decay dynamics with a concave positively homogeneous z-term in the cost
    "split_homogeneous": """
[problem]
name = split_homogeneous
dim = 1
noise_dim = 1
[dynamics]
drift = -u1*x1
diffusion = 0
[cost]
psi = x1^2 - abs(z1)
psi1 = x1^2
g = -abs(z1)
[domain]
kind = box
lower = -1
upper = 1
[constants]
M = 1
K_x = 2
K_z = 1
c = 1
c0 = 2
M0 = 2
[controls]
values = 0.5 ; 1
""",
    # strong two-sided drift controls whose active choices carry no noise:
    # for every p != 0 some control gives the Hamiltonian positive radial
    # slope independent of A, so the scaled Hamiltonian diverges and the
    # vanishing-discount limit is constant (zero: hover near x = 0)
    "steerable": """
[problem]
name = steerable
dim = 1
noise_dim = 1
[dynamics]
drift = u1 - x1
diffusion = 0.4*(1 - x1^2)*(1 - abs(u1))
[cost]
psi = x1^2
psi1 = x1^2
g = 0
[domain]
kind = box
lower = -1
upper = 1
[constants]
M = 1
K_x = 2
K_z = 0
c = 1.8
c0 = 2
M0 = 2
[controls]
values = -1 ; 0 ; 1
""",
    # negative control: outward drift makes the coupling function positive,
    # so the nonexpansivity check must fail with a witness
    "expanding": """
[problem]
name = expanding
dim = 1
noise_dim = 1
[dynamics]
drift = x1
diffusion = 0
[cost]
psi = x1^2
psi1 = x1^2
g = 0
[domain]
kind = box
lower = -1
upper = 1
[constants]
M = 1
K_x = 2
K_z = 0
c = 1
c0 = 2
M0 = 2
[controls]
values = 0
""",
    # negative control: convex |z| cost makes the Hamiltonian strictly
    # decrease under radial scaling at A = 0, violating radial monotonicity
    # while still being nonexpansive (single control, frozen coefficients)
    "h5_violator": """
[problem]
name = h5_violator
dim = 1
noise_dim = 1
[dynamics]
drift = 0
diffusion = 1
[cost]
psi = 1 + abs(z1)
[domain]
kind = box
lower = -1
upper = 1
[constants]
M = 1
K_x = 0
K_z = 1
c = 1
c0 = 1
M0 = 2
[controls]
values = 0
""",
    # negative control: uniformly elliptic uncontrolled diffusion; with a
    # z-free cost the Hamiltonian drops below H(x,0,0) at positive-trace A,
    # so the convex-case radial-monotonicity criterion fails
    "elliptic_ou": """
[problem]
name = elliptic_ou
dim = 1
noise_dim = 1
[dynamics]
drift = -x1
diffusion = 0.5
[cost]
psi = x1^2
psi1 = x1^2
g = 0
[domain]
kind = box
lower = -1
upper = 1
[constants]
M = 1
K_x = 2
K_z = 0
c = 1.5
c0 = 2
M0 = 2
[controls]
values = 0
""",
}


def catalog_names() -> list[str]:
    return sorted(_CATALOG)


def builtin_problem(name: str) -> ControlProblem:
    """Fetch a catalog problem by name; unknown names raise KeyError."""
    if name not in _CATALOG:
        raise KeyError(f"unknown builtin problem {name!r}; available: {catalog_names()}")
    cfg = parse_config(_CATALOG[name])
    cfg.source_text = f"# builtin:{name}\n" + _CATALOG[name]
    return cfg.build()


# ---------------------------------------------------------------------------
# Lipschitz / growth audit
# ---------------------------------------------------------------------------


def _sobol_unit(dim: int, count: int, seed: int) -> np.ndarray:
    sampler = qmc.Sobol(d=dim, scramble=True, seed=seed)
    return sampler.random(count)


def _domain_points(domain, unit: np.ndarray) -> np.ndarray:
    if isinstance(domain, Box):
        return domain.lower + unit * (domain.upper - domain.lower)
    # ball: map the unit cube onto the bounding box, then pull outliers onto
    # the sphere; slight boundary concentration is harmless for an audit
    half = domain.radius
    pts = domain.center + (2.0 * unit - 1.0) * half
    return domain.project(pts)


def lipschitz_audit(problem: ControlProblem, sample_count: int = 4096,
                    seed: int = 0) -> ConditionReport:
    """Check declared constants against empirical difference quotients.

    Samples quasi-random pairs (x, x') in the domain and (z, z') in a ball
    of radius max(1, 10*K_z), cycling through the control set, and verifies:
    cost increments dominated by K_x|dx| + K_z|dz|, |psi(x,0,u)| <= M,
    coefficient increments and growth dominated by c, and (when a split cost
    is declared) consistency, g(0) = 0, positive homogeneity, concavity and
    the K_z bound for g.
    """
    N, d = problem.dim, problem.noise_dim
    unit = _sobol_unit(2 * N + 2 * d, sample_count, seed)
    x = _domain_points(problem.domain, unit[:, :N])
    xp = _domain_points(problem.domain, unit[:, N:2 * N])
    z_radius = max(1.0, 10.0 * problem.lip_Kz)
    z = z_radius * (2.0 * unit[:, 2 * N:2 * N + d] - 1.0)
    zp = z_radius * (2.0 * unit[:, 2 * N + d:] - 1.0)
    zeros = np.zeros_like(z)

    tol = 1e-9 * (1.0 + problem.bound_M + problem.lip_Kx + problem.lip_Kz + z_radius)
    details: dict = {}
    witness = None
    passed = True

    def fail(tag, margin, payload):
        nonlocal passed, witness
        passed = False
        if witness is None or margin > witness.get("margin", -np.inf):
            witness = {"check": tag, "margin": float(margin), **payload}

    dx = np.linalg.norm(x - xp, axis=-1)
    dz = np.linalg.norm(z - zp, axis=-1)

    worst_cost = -np.inf
    worst_zero = -np.inf
    worst_coef = -np.inf
    worst_growth = -np.inf
    emp_kz = 0.0
    emp_kx = 0.0

    for j, u in enumerate(problem.control_set):
        cost_a = problem.running_cost(x, z, u)
        cost_b = problem.running_cost(xp, zp, u)
        gap = np.abs(cost_a - cost_b) - (problem.lip_Kx * dx + problem.lip_Kz * dz)
        worst_cost = max(worst_cost, float(gap.max()))
        if gap.max() > tol:
            i = int(gap.argmax())
            fail("cost_lipschitz", gap.max(),
                 {"x": x[i], "x_prime": xp[i], "z": z[i], "z_prime": zp[i], "u_index": j})

        # directional quotients for reporting (z move at fixed x, x move at z=0)
        cost_zmove = problem.running_cost(x, zp, u)
        with np.errstate(invalid="ignore", divide="ignore"):
            qz = np.abs(cost_a - cost_zmove) / dz
            emp_kz = max(emp_kz, float(np.nanmax(np.where(dz > 1e-12, qz, np.nan), initial=0.0)))
        cost_x0 = problem.running_cost(x, zeros, u)
        cost_xp0 = problem.running_cost(xp, zeros, u)
        with np.errstate(invalid="ignore", divide="ignore"):
            qx = np.abs(cost_x0 - cost_xp0) / dx
            emp_kx = max(emp_kx, float(np.nanmax(np.where(dx > 1e-12, qx, np.nan), initial=0.0)))

        zero_gap = np.abs(cost_x0) - problem.bound_M
        worst_zero = max(worst_zero, float(zero_gap.max()))
        if zero_gap.max() > tol:
            i = int(zero_gap.argmax())
            fail("cost_bound_M", zero_gap.max(), {"x": x[i], "u_index": j})

        b_a, b_b = problem.drift(x, u), problem.drift(xp, u)
        s_a, s_b = problem.diffusion(x, u), problem.diffusion(xp, u)
        coef_inc = (np.linalg.norm(b_a - b_b, axis=-1)
                    + np.linalg.norm(s_a - s_b, axis=(-2, -1)))
        coef_gap = coef_inc - problem.growth_c * dx
        worst_coef = max(worst_coef, float(coef_gap.max()))
        if coef_gap.max() > tol:
            i = int(coef_gap.argmax())
            fail("coefficient_lipschitz", coef_gap.max(), {"x": x[i], "x_prime": xp[i], "u_index": j})

        growth = (np.linalg.norm(b_a, axis=-1) + np.linalg.norm(s_a, axis=(-2, -1))
                  - problem.growth_c * (1.0 + np.linalg.norm(x, axis=-1)))
        worst_growth = max(worst_growth, float(growth.max()))
        if growth.max() > tol:
            i = int(growth.argmax())
            fail("coefficient_growth", growth.max(), {"x": x[i], "u_index": j})

    details.update({
        "empirical_Kx": emp_kx, "empirical_Kz": emp_kz,
        "margin_cost_lipschitz": worst_cost, "margin_cost_bound": worst_zero,
        "margin_coefficient_lipschitz": worst_coef, "margin_coefficient_growth": worst_growth,
        "z_ball_radius": z_radius, "sample_count": sample_count,
    })

    if problem.split is not None:
        sp = problem.split
        for j, u in enumerate(problem.control_set):
            split_gap = np.abs(problem.running_cost(x, z, u) - (sp.psi1(x, u) + sp.g(z)))
            if split_gap.max() > tol:
                i = int(split_gap.argmax())
                fail("split_consistency", split_gap.max(), {"x": x[i], "z": z[i], "u_index": j})
        g0 = float(np.abs(sp.g(np.zeros((1, d)))).max())
        details["g_at_zero"] = g0
        if g0 > tol:
            fail("g_zero", g0, {})
        gz = sp.g(z)
        for t in (0.0, 0.5, 2.0, 7.0):
            hom_gap = np.abs(sp.g(t * z) - t * gz)
            rel = hom_gap / np.maximum(1.0, np.abs(t * gz))
            if rel.max() > 1e-12:
                i = int(rel.argmax())
                fail("g_homogeneity", rel.max(), {"z": z[i], "t": t})
        conc_gap = (gz + sp.g(zp)) / 2.0 - sp.g((z + zp) / 2.0)
        details["g_concavity_margin"] = float(conc_gap.max())
        if conc_gap.max() > tol:
            i = int(conc_gap.argmax())
            fail("g_concavity", conc_gap.max(), {"z": z[i], "z_prime": zp[i]})
        g_lip = np.abs(gz - sp.g(zp)) - problem.lip_Kz * dz
        details["g_lipschitz_margin"] = float(g_lip.max())
        if g_lip.max() > tol:
            i = int(g_lip.argmax())
            fail("g_lipschitz", g_lip.max(), {"z": z[i], "z_prime": zp[i]})

    return ConditionReport(name="lipschitz_audit", passed=passed, details=details,
                           witness=witness)
