"""Problem data: coefficients, nonlinearities, obstacle and constants.

A problem is loaded from a JSON document whose expression strings use the
language in :mod:`rhomog.expr`.  Coefficients ``sigma``, ``b``, ``c`` are
functions of the slow variable ``x1..xd`` and the fast periodic variable
``y1..yd``; ``f`` and ``g`` of ``x`` and the solution value ``u``; ``l`` of
``x``; the obstacle ``h`` of time ``t`` and ``x``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import expr
from .errors import DimensionMismatch, NonNegativeBeta, ParseError, SchemaError
from .geometry import ConvexDomain

REQUIRED_KEYS = ("dim", "sigma", "b", "c", "domain", "f", "g", "l", "h",
                 "mu", "beta", "growth_C", "growth_p", "lambda_min")

MONOTONICITY_TOL = 1e-9
OBSTACLE_TOL = 1e-9
PERIODICITY_TOL = 1e-9


def _xs(d):
    return [f"x{i}" for i in range(1, d + 1)]


def _ys(d):
    return [f"y{i}" for i in range(1, d + 1)]


@dataclass(frozen=True)
class TwoScaleProblem:
    d: int
    sigma: tuple
    b: tuple
    c: tuple
    domain: ConvexDomain
    f: expr.Expr
    g: expr.Expr
    l: expr.Expr
    h: expr.Expr
    mu: float
    beta: float
    growth_C: float
    growth_p: float
    lambda_min: float
    source: dict = field(default_factory=dict, compare=False, repr=False)
    name: str = "problem"

    # -- environments ----------------------------------------------------

    def _env(self, x, y=None, t=None, u=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        env = {f"x{i + 1}": x[:, i] for i in range(self.d)}
        if y is not None:
            y = np.atleast_2d(np.asarray(y, dtype=float))
            env.update({f"y{i + 1}": y[:, i] for i in range(self.d)})
        if t is not None:
            env["t"] = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        if u is not None:
            env["u"] = np.broadcast_to(np.asarray(u, dtype=float), (x.shape[0],))
        return env, x.shape[0]

    def sigma_at(self, x, y):
        """Diffusion matrices, shape (n, d, d)."""
        env, n = self._env(x, y)
        out = np.empty((n, self.d, self.d))
        for i, row in enumerate(self.sigma):
            for j, e in enumerate(row):
                out[:, i, j] = expr.evaluate_array(e, env, (n,))
        return out

    def _vector(self, exprs, x, y):
        env, n = self._env(x, y)
        out = np.empty((n, self.d))
        for i, e in enumerate(exprs):
            out[:, i] = expr.evaluate_array(e, env, (n,))
        return out

    def b_at(self, x, y):
        return self._vector(self.b, x, y)

    def c_at(self, x, y):
        return self._vector(self.c, x, y)

    def f_at(self, x, u):
        env, n = self._env(x, u=u)
        return expr.evaluate_array(self.f, env, (n,))

    def g_at(self, x, u):
        env, n = self._env(x, u=u)
        return expr.evaluate_array(self.g, env, (n,))

    def l_at(self, x):
        env, n = self._env(x)
        return expr.evaluate_array(self.l, env, (n,))

    def h_at(self, t, x):
        env, n = self._env(x, t=t)
        return expr.evaluate_array(self.h, env, (n,))

    # -- structure queries -----------------------------------------------

    def coefficient_asts(self):
        return [e for row in self.sigma for e in row] + list(self.b) + list(self.c)

    def depends_on_slow(self) -> bool:
        """True when sigma, b or c mention any of x1..xd."""
        xs = set(_xs(self.d))
        return any(expr.free_variables(e) & xs for e in self.coefficient_asts())

    def has_fast_drift(self) -> bool:
        return any(not (isinstance(e, expr.Const) and e.value == 0.0) for e in self.b)

    def to_config(self) -> dict:
        return dict(self.source)


def _parse_field(source, d, allowed, path):
    if not isinstance(source, str):
        raise SchemaError(f"{path} must be an expression string, got {type(source).__name__}")
    try:
        return expr.parse_expr(source, d, allowed)
    except ParseError as err:
        raise err.with_field(path) from None


def _number(cfg, key, cast=float):
    value = cfg[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{key} must be a number")
    return cast(value)


def load_problem(config) -> TwoScaleProblem:
    """Build a problem from a dict, a JSON string or a path to a JSON file."""
    if isinstance(config, Path) or (isinstance(config, str)
                                    and not config.lstrip().startswith("{")):
        config = Path(config).read_text()
    if isinstance(config, str):
        try:
            config = json.loads(config)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise SchemaError("problem configuration must be a JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in config]
    if missing:
        raise SchemaError(f"missing keys: {', '.join(missing)}")

    d = config["dim"]
    if isinstance(d, bool) or not isinstance(d, int) or d < 1:
        raise SchemaError("dim must be a positive integer")
    slow_fast = _xs(d) + _ys(d)

    sigma = config["sigma"]
    if not isinstance(sigma, list) or not all(isinstance(r, list) for r in sigma):
        raise SchemaError("sigma must be an array of arrays")
    if len(sigma) != d or any(len(r) != d for r in sigma):
        raise DimensionMismatch(f"sigma must be {d}x{d}")
    for key in ("b", "c"):
        if not isinstance(config[key], list):
            raise SchemaError(f"{key} must be an array of strings")
        if len(config[key]) != d:
            raise DimensionMismatch(f"{key} must have length {d}")

    domain = ConvexDomain.from_config(config["domain"])
    if domain.dim != d:
        raise DimensionMismatch(f"domain has dimension {domain.dim}, expected {d}")

    beta = _number(config, "beta")
    if beta >= 0:
        raise NonNegativeBeta(f"beta must be strictly negative, got {beta}")
    growth_C = _number(config, "growth_C")
    growth_p = _number(config, "growth_p")
    lambda_min = _number(config, "lambda_min")
    if growth_C <= 0:
        raise SchemaError("growth_C must be positive")
    if growth_p < 1:
        raise SchemaError("growth_p must be at least 1")
    if lambda_min <= 0:
        raise SchemaError("lambda_min must be positive")

    return TwoScaleProblem(
        d=d,
        sigma=tuple(tuple(_parse_field(s, d, slow_fast, f"sigma[{i}][{j}]")
                          for j, s in enumerate(row)) for i, row in enumerate(sigma)),
        b=tuple(_parse_field(s, d, slow_fast, f"b[{i}]") for i, s in enumerate(config["b"])),
        c=tuple(_parse_field(s, d, slow_fast, f"c[{i}]") for i, s in enumerate(config["c"])),
        domain=domain,
        f=_parse_field(config["f"], d, _xs(d) + ["u"], "f"),
        g=_parse_field(config["g"], d, _xs(d) + ["u"], "g"),
        l=_parse_field(config["l"], d, _xs(d), "l"),
        h=_parse_field(config["h"], d, _xs(d) + ["t"], "h"),
        mu=_number(config, "mu"),
        beta=beta,
        growth_C=growth_C,
        growth_p=growth_p,
        lambda_min=lambda_min,
        source=dict(config),
        name=str(config.get("name", "problem")),
    )


# -- assumption checks ---------------------------------------------------

@dataclass
class ValidationReport:
    samples: int
    seed: int
    min_ellipticity: float
    periodicity_defect: float
    f_monotonicity_defect: float
    g_monotonicity_defect: float
    f_growth_ratio: float
    g_growth_ratio: float
    obstacle_margin: float
    lipschitz_estimates: dict
    flags: dict

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()}
        out["passed"] = self.passed
        return out


def sample_domain(domain: ConvexDomain, n: int, rng) -> np.ndarray:
    """Uniform samples in the closed ball."""
    d = domain.dim
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = domain.radius * rng.random(n) ** (1.0 / d)
    return np.asarray(domain.center) + direction * radius[:, None]


def validate_assumptions(problem: TwoScaleProblem, samples: int = 10_000, rng_seed: int = 0,
                         u_range: float = 10.0) -> ValidationReport:
    """Randomized checks of ellipticity, periodicity, monotonicity and the obstacle order.

    Failures are reported through ``flags``; nothing here raises on a
    violated assumption.  Growth ratios and Lipschitz quotients are
    reported but do not affect ``passed``.
    """
    rng = np.random.default_rng(rng_seed)
    d = problem.d
    x = sample_domain(problem.domain, samples, rng)
    # keep the boundary itself in the sample: obstacle order and growth matter there too
    x[: samples // 10] = problem.domain.project(
        np.asarray(problem.domain.center) + 2 * problem.domain.radius
        * (x[: samples // 10] - np.asarray(problem.domain.center)))[0]
    y = rng.random((samples, d))
    u = rng.uniform(-u_range, u_range, samples)
    v = rng.uniform(-u_range, u_range, samples)

    sig = problem.sigma_at(x, y)
    eig = np.linalg.eigvalsh(sig @ np.transpose(sig, (0, 2, 1)))
    min_ell = float(eig[:, 0].min())

    period_defect = 0.0
    for i in range(d):
        shifted = y.copy()
        shifted[:, i] += 1.0
        for evaluate in (problem.sigma_at, problem.b_at, problem.c_at):
            diff = np.abs(evaluate(x, shifted) - evaluate(x, y))
            period_defect = max(period_defect, float(diff.max()))

    du2 = (u - v) ** 2
    fu, fv = problem.f_at(x, u), problem.f_at(x, v)
    gu, gv = problem.g_at(x, u), problem.g_at(x, v)
    f_mono = float(((u - v) * (fu - fv) - problem.mu * du2).max())
    g_mono = float(((u - v) * (gu - gv) - problem.beta * du2).max())

    envelope = problem.growth_C * (np.linalg.norm(x, axis=1) ** problem.growth_p + u ** 2)
    envelope = np.where(envelope > 0, envelope, np.inf)
    f_growth = float((np.abs(fu) / envelope).max())
    g_growth = float((np.abs(gu) / envelope).max())

    margin = float((problem.l_at(x) - problem.h_at(0.0, x)).min())

    lipschitz = {}
    x2 = x + 1e-3 * rng.standard_normal(x.shape)
    y2 = y + 1e-3 * rng.standard_normal(y.shape)
    step = np.sqrt(np.sum((x2 - x) ** 2, axis=1)) + np.sqrt(np.sum((y2 - y) ** 2, axis=1))
    for name, evaluate in (("sigma", problem.sigma_at), ("b", problem.b_at), ("c", problem.c_at)):
        delta = (evaluate(x2, y2) - evaluate(x, y)).reshape(samples, -1)
        lipschitz[name] = float((np.linalg.norm(delta, axis=1) / step).max())

    flags = {
        "H1_ellipticity": min_ell >= problem.lambda_min,
        "H2_periodicity": period_defect <= PERIODICITY_TOL,
        "H4_f_monotone": f_mono <= MONOTONICITY_TOL,
        "H4_g_monotone": g_mono <= MONOTONICITY_TOL,
        "H5_obstacle_below_terminal": margin >= -OBSTACLE_TOL,
    }
    return ValidationReport(
        samples=samples, seed=rng_seed, min_ellipticity=min_ell,
        periodicity_defect=period_defect, f_monotonicity_defect=f_mono,
        g_monotonicity_defect=g_mono, f_growth_ratio=f_growth, g_growth_ratio=g_growth,
        obstacle_margin=margin, lipschitz_estimates=lipschitz, flags=flags,
    )
