"""One-dimensional finite differences for the obstacle problem with Neumann data.

Solves, in time-to-go ``tau`` on ``[x_lo, x_hi]``,

    min(v - h(t - tau, x), d_tau v - a v'' - c v' - f(x, v)) = 0,   v(0, x) = l(x),

with the nonlinear boundary relation ``gamma v_x + g(x, v) = 0`` at both
ends (``gamma`` points inward).  Time stepping is implicit Euler; the
obstacle is handled by projected SOR, warm-started from an active-set
solve so that it usually converges in one sweep; the boundary by ghost
nodes linearized with one Newton step per sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import NewtonDiverged, SORDiverged, ValidationError

SOR_TOL = 1e-12
SOR_MAX_ITER = 20_000
PICARD_SWEEPS = 2


@dataclass(frozen=True)
class FdGrid:
    x_lo: float
    x_hi: float
    M: int
    dtau: float
    horizon: float

    def __post_init__(self):
        if self.M < 16:
            raise ValidationError("M must be at least 16")
        if not self.x_hi > self.x_lo:
            raise ValidationError("empty interval")
        if self.horizon <= 0 or self.dtau <= 0:
            raise ValidationError("horizon and dtau must be positive")
        if self.dtau > self.dx:
            raise ValidationError(f"dtau={self.dtau} exceeds dx={self.dx}")

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.M

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.M + 1)

    @property
    def n_steps(self) -> int:
        return int(np.ceil(self.horizon / self.dtau - 1e-9))

    def refined(self) -> "FdGrid":
        """Half the spacing, a quarter of the time step."""
        return FdGrid(self.x_lo, self.x_hi, 2 * self.M, self.dtau / 4, self.horizon)


@dataclass
class FdSolution:
    grid: FdGrid
    x: np.ndarray
    u: np.ndarray                  # at tau = horizon
    obstacle: np.ndarray           # h(0, x)
    sor_iterations: int
    max_sor_iterations: int
    complementarity: float         # max |(u - h) * parabolic residual| over all steps
    lcp_residual: float            # max |min(u - h, residual / diagonal)| over all steps
    slab: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def active(self) -> np.ndarray:
        return self.u - self.obstacle <= 1e-10

    def value_at(self, x0: float) -> float:
        return float(np.interp(x0, self.x, self.u))

    def rows(self):
        return [(float(a), float(b), float(c), int(d))
                for a, b, c, d in zip(self.x, self.u, self.obstacle, self.active)]

    def summary(self) -> dict:
        return {
            "M": self.grid.M, "dtau": self.grid.dtau, "horizon": self.grid.horizon,
            "sor_iterations": self.sor_iterations,
            "max_sor_iterations": self.max_sor_iterations,
            "complementarity": self.complementarity,
            "lcp_residual": self.lcp_residual,
            "active_nodes": int(self.active.sum()),
            **self.extra,
        }


def _as_vector(fn, x):
    if callable(fn):
        return np.broadcast_to(np.asarray(fn(x), dtype=float), x.shape).copy()
    return np.full(x.shape, float(fn))


def _boundary_gamma(gamma, x_lo, x_hi):
    if callable(gamma):
        lo, hi = float(gamma(x_lo)), float(gamma(x_hi))
    else:
        lo, hi = (float(v) for v in gamma)
    if lo <= 0 or hi >= 0:
        raise ValidationError("gamma must point inward: positive at x_lo, negative at x_hi")
    return lo, hi


def _residual(lower, diag, upper, v, rhs):
    r = diag * v - rhs
    r[1:] += lower[1:] * v[:-1]
    r[:-1] += upper[:-1] * v[1:]
    return r


def _psor(lower, diag, upper, rhs, h, v, omega):
    """Projected SOR with red-black ordering (exact Gauss-Seidel for tridiagonal systems)."""
    n = len(v)
    scale = 1.0 + np.abs(v).max()
    colors = (np.arange(0, n, 2), np.arange(1, n, 2))
    for it in range(1, SOR_MAX_ITER + 1):
        for idx in colors:
            s = rhs[idx].copy()
            left = idx[idx > 0]
            s[idx > 0] -= lower[left] * v[left - 1]
            right = idx[idx < n - 1]
            s[idx < n - 1] -= upper[right] * v[right + 1]
            v[idx] = np.maximum(h[idx], (1 - omega) * v[idx] + omega * s / diag[idx])
        r = _residual(lower, diag, upper, v, rhs)
        lcp = np.abs(np.minimum(v - h, r / diag)).max()
        if not np.isfinite(lcp):
            raise SORDiverged("non-finite iterate")
        if lcp < SOR_TOL * scale:
            return v, it, lcp
    raise SORDiverged(f"no convergence after {SOR_MAX_ITER} sweeps (residual {lcp:.3g})")


def _active_set(lower, diag, upper, rhs, h, v, max_iter=200):
    """Policy iteration on ``min(v - h, (A v - rhs) / diag) = 0``; exact for M-matrices."""
    active = v <= h
    for _ in range(max_iter):
        d_ = np.where(active, 1.0, diag)
        lo = np.where(active, 0.0, lower)
        up = np.where(active, 0.0, upper)
        b = np.where(active, h, rhs)
        v = solve_banded((1, 1), np.vstack([np.r_[0.0, up[:-1]], d_, np.r_[lo[1:], 0.0]]), b)
        r = _residual(lower, diag, upper, v, rhs) / diag
        new = v - h <= r
        if np.array_equal(new, active):
            break
        active = new
    return np.maximum(v, h)


def _slope(fn, x, u):
    step = 1e-7 * (1.0 + np.abs(u))
    return (fn(x, u + step) - fn(x, u - step)) / (2 * step)


def solve_obstacle_pde_1d(a_pde, c_pde, gamma, f, g, l, h, grid: FdGrid,
                          keep_slab: bool = False) -> FdSolution:
    """March ``v`` from ``l`` over the horizon; see the module docstring.

    ``a_pde`` and ``c_pde`` are callables of ``x`` (or constants); ``gamma``
    is a callable or a pair ``(gamma_lo, gamma_hi)``; ``f(x, u)``,
    ``g(x, u)``, ``l(x)`` and ``h(t, x)`` take and return arrays.
    """
    x = grid.nodes
    dx = grid.dx
    n_steps = grid.n_steps
    dtau = grid.horizon / n_steps
    T = grid.horizon
    a = _as_vector(a_pde, x)
    c = _as_vector(c_pde, x)
    if np.any(a <= 0):
        raise ValidationError("a_pde must be positive")
    g_lo, g_hi = _boundary_gamma(gamma, x[0], x[-1])
    xb = x[[0, -1]]
    q = np.array([2 * dx / g_lo, -2 * dx / g_hi])

    wl = a / dx ** 2 - c / (2 * dx)
    wr = a / dx ** 2 + c / (2 * dx)
    lower = -wl.copy()
    upper = -wr.copy()
    lower[-1] = -(wl[-1] + wr[-1])
    upper[0] = -(wl[0] + wr[0])
    base_diag = 1.0 / dtau + 2 * a / dx ** 2
    ghost_w = np.array([wl[0], wr[-1]])
    rho = np.max((np.abs(lower) + np.abs(upper)) / base_diag)
    omega = min(1.9, 2.0 / (1.0 + np.sqrt(max(1.0 - rho ** 2, 0.0))))

    v = _as_vector(l, x)
    h0 = np.asarray(h(T, x), dtype=float)
    if np.any(h0 > v + 1e-12):
        raise ValidationError("obstacle exceeds terminal data")
    slab = [v.copy()] if keep_slab else None
    total_iter = max_iter = 0
    compl = lcp_max = 0.0

    for k in range(1, n_steps + 1):
        hk = np.asarray(h(T - k * dtau, x), dtype=float)
        v_old = v
        v_star = v_old
        for _ in range(1 + PICARD_SWEEPS):
            rhs = v_old / dtau + np.asarray(f(x, v_star), dtype=float)
            diag = base_diag.copy()
            ub = v_star[[0, -1]]
            gs = np.asarray(g(xb, ub), dtype=float)
            gp = _slope(g, xb, ub)
            diag[[0, -1]] -= ghost_w * q * gp
            rhs[[0, -1]] += ghost_w * q * (gs - gp * ub)
            if not np.all(np.isfinite(diag[[0, -1]])) or np.any(diag[[0, -1]] <= 0):
                raise NewtonDiverged("boundary linearization lost diagonal dominance")
            bands = np.vstack([np.r_[0.0, upper[:-1]], diag, np.r_[lower[1:], 0.0]])
            v_new = solve_banded((1, 1), bands, rhs)
            if not np.all(np.isfinite(v_new)):
                raise NewtonDiverged("non-finite boundary update")
            if np.all(v_new >= hk):
                iters, lcp = 0, 0.0
            else:
                start = _active_set(lower, diag, upper, rhs, hk, v_new)
                v_new, iters, lcp = _psor(lower, diag, upper, rhs, hk, start, omega)
            total_iter += iters
            max_iter = max(max_iter, iters)
            v_star = v_new
        v = v_star
        r = _residual(lower, diag, upper, v, rhs)
        compl = max(compl, float(np.abs((v - hk) * r).max()))
        lcp_max = max(lcp_max, float(np.abs(np.minimum(v - hk, r / diag)).max()))
        if keep_slab:
            slab.append(v.copy())

    return FdSolution(grid, x, v, np.asarray(h(0.0, x), dtype=float), total_iter, max_iter,
                      compl, lcp_max, np.array(slab) if keep_slab else None)


def problem_callables(problem):
    """``(f, g, l, h)`` of a one-dimensional problem as array callables."""
    if problem.d != 1:
        raise ValidationError("finite differences are one-dimensional")
    col = lambda x: np.asarray(x, dtype=float).reshape(-1, 1)
    return (lambda x, u: problem.f_at(col(x), u),
            lambda x, u: problem.g_at(col(x), u),
            lambda x: problem.l_at(col(x)),
            lambda t, x: problem.h_at(t, col(x)))


def frozen_phase_coefficients(problem, epsilon: float):
    """Coefficients of the oscillating equation at scale ``epsilon``.

    ``a = sigma^2 / 2``, drift ``b / epsilon + c``, evaluated at ``(x, x / epsilon)``,
    with the boundary direction ``+-1``.  Only meaningful when the grid
    resolves ``epsilon``.
    """
    if problem.d != 1:
        raise ValidationError("finite differences are one-dimensional")

    def parts(x):
        xs = np.asarray(x, dtype=float).reshape(-1, 1)
        y = xs / epsilon
        return problem.sigma_at(xs, y)[:, 0, 0], problem.b_at(xs, y)[:, 0], problem.c_at(xs, y)[:, 0]

    a = lambda x: 0.5 * parts(x)[0] ** 2
    drift = lambda x: parts(x)[1] / epsilon + parts(x)[2]
    return a, drift, (1.0, -1.0)


@dataclass
class Discrepancy:
    mc_value: float
    mc_stderr: float
    fd_value: float
    fd_refined: float
    truncation: float
    discrepancy: float
    fd_summary: dict

    def within(self, k_stderr: float = 3.0, slack: float = 0.01) -> bool:
        return self.discrepancy <= k_stderr * self.mc_stderr + slack

    def to_dict(self):
        return dict(self.__dict__)


def compare_mc_vs_pde(problem, cell, bsde_value, probe, grid: FdGrid, gamma=None) -> Discrepancy:
    """FD value of the homogenized problem at ``probe = (t, x0)`` against a Monte Carlo value.

    Uses ``a = A0_bar / 2`` and ``C0_bar`` from ``cell``; ``gamma`` defaults
    to ``cell.gamma0`` read as the pair (value at x_lo, value at x_hi).
    """
    t, x0 = probe
    x0 = float(np.asarray(x0).reshape(-1)[0])
    if problem.d != 1:
        raise ValidationError("finite differences are one-dimensional")
    if cell.A0_bar is None:
        raise ValidationError("effective tensors have not been computed")
    gamma = cell.gamma0 if gamma is None else gamma
    if gamma is None:
        raise ValidationError("boundary direction unavailable")
    gamma = tuple(float(v) for v in np.asarray(gamma).reshape(-1))
    a = 0.5 * float(np.asarray(cell.A0_bar).reshape(-1)[0])
    c = float(np.asarray(cell.C0_bar).reshape(-1)[0])
    if abs(grid.horizon - t) > 1e-12:
        grid = FdGrid(grid.x_lo, grid.x_hi, grid.M, grid.dtau, float(t))
    f, g, l, h = problem_callables(problem)
    coarse = solve_obstacle_pde_1d(a, c, gamma, f, g, l, h, grid)
    fine = solve_obstacle_pde_1d(a, c, gamma, f, g, l, h, grid.refined())
    y0, se = bsde_value
    u = fine.value_at(x0)
    return Discrepancy(float(y0), float(se), coarse.value_at(x0), u,
                       abs(u - coarse.value_at(x0)), abs(float(y0) - u), fine.summary())
