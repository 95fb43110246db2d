"""Backward solvers for reflected generalized BSDEs on simulated paths.

Given a :class:`~rhomog.sde.PathBundle`, the value process is built
backward from ``Y_K = l(X_K)``.  At each step the continuation value

    e_k = E[ Y_{k+1} + f(X_k, Y_{k+1}) dt + g(X_{k+1}, Y_{k+1}) dG_k | X_k ]

is estimated by least squares on a polynomial basis in ``X_k``.  The
obstacle ``Y >= h(t, X)`` is then enforced either by a penalty term
``n (Y - h)^-`` (treated implicitly, so large ``n dt`` is stable) or by the
discrete reflection ``Y_k = max(e_k, h_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .errors import ObstacleInconsistent, SingularRegression, ValidationError

MAX_CONDITION = 1e12
TERMINAL_TOL = 1e-12


@dataclass(frozen=True)
class RegressionBasis:
    """Monomials of total degree <= ``deg``, optionally with ``psi(x)`` appended."""

    deg: int = 2
    with_psi: bool = False

    def features(self, X, domain=None):
        """Design matrix without the constant column, shape (n, p)."""
        n, d = X.shape
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        live = std > 1e-14 * (1.0 + np.abs(mean))
        Z = (X[:, live] - mean[live]) / std[live]
        cols = []
        for degree in range(1, self.deg + 1):
            for combo in combinations_with_replacement(range(Z.shape[1]), degree):
                cols.append(np.prod(Z[:, combo], axis=1))
        if self.with_psi and domain is not None:
            psi = domain.psi(X)
            if psi.std() > 1e-14:
                cols.append((psi - psi.mean()) / psi.std())
        return np.stack(cols, axis=1) if cols else np.empty((n, 0))


class _Projector:
    """Least-squares projection onto span{1, features} via a thin QR."""

    def __init__(self, F):
        self.n = F.shape[0]
        if F.shape[1] == 0:
            self.Q = None
            self.condition = 1.0
            return
        Fc = F - F.mean(axis=0)
        Q, R = np.linalg.qr(Fc)
        sv = np.linalg.svd(R, compute_uv=False)
        self.condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
        if self.condition > MAX_CONDITION:
            raise SingularRegression(f"regression condition number {self.condition:.3g}")
        self.Q = Q

    def fit(self, y):
        """Fitted values; constants are reproduced exactly."""
        mean = y.mean(axis=0)
        if self.Q is None:
            return np.broadcast_to(mean, y.shape).copy()
        centered = y - mean
        return mean + self.Q @ (self.Q.T @ centered)


@dataclass
class BsdeSolution:
    Y: np.ndarray                 # (K+1, n)
    Z: np.ndarray | None          # (K, n, d)
    K: np.ndarray                 # (K+1, n), cumulative, K[0] = 0
    value_at_0: float
    stderr: float
    scheme: str
    n_penalty: float | None
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"value": self.value_at_0, "stderr": self.stderr, "scheme": self.scheme,
                "n_penalty": self.n_penalty, "diagnostics": dict(self.diagnostics)}

    def per_step(self, obstacle: np.ndarray | None = None):
        """Rows (k, mean Y, mean K, obstacle violation) for CSV output."""
        viol = (np.zeros(self.Y.shape[0]) if obstacle is None
                else np.maximum(obstacle - self.Y, 0.0).max(axis=1))
        return [(k, float(self.Y[k].mean()), float(self.K[k].mean()), float(viol[k]))
                for k in range(self.Y.shape[0])]


def _check_bundle(bundle):
    if bundle.n_paths < 2:
        raise ValidationError("at least two paths are needed")


def _backward(bundle, problem, basis, project, compute_z=True):
    """Shared backward induction; ``project(k, e, h) -> Y_k``."""
    _check_bundle(bundle)
    n_steps, n = bundle.n_steps, bundle.n_paths
    d = problem.d
    times = bundle.times
    X = bundle.X
    Y = np.empty((n_steps + 1, n))
    dK = np.zeros((n_steps, n))
    H = np.empty((n_steps + 1, n))
    Z = np.zeros((n_steps, n, d)) if compute_z else None
    conditions = []

    Y[n_steps] = problem.l_at(X[n_steps])
    H[n_steps] = problem.h_at(times[n_steps], X[n_steps])
    if np.any(H[n_steps] > Y[n_steps] + TERMINAL_TOL):
        raise ObstacleInconsistent(
            f"obstacle exceeds terminal value by {float((H[n_steps] - Y[n_steps]).max()):.3g}")

    realized = Y[n_steps].copy()
    for k in range(n_steps - 1, -1, -1):
        dt = times[k + 1] - times[k]
        y_next = Y[k + 1]
        target = (y_next + problem.f_at(X[k], y_next) * dt
                  + problem.g_at(X[k + 1], y_next) * bundle.dG[k])
        proj = _Projector(basis.features(X[k], problem.domain))
        conditions.append(proj.condition)
        e = proj.fit(target)
        H[k] = problem.h_at(times[k], X[k])
        Y[k] = project(k, e, H[k], dt)
        dK[k] = Y[k] - e
        # pathwise cash flow whose cross-path mean telescopes to mean(Y[0])
        realized += target - y_next + dK[k]
        if compute_z:
            dM = bundle.dM[k]
            cross = proj.fit(y_next[:, None] * dM)
            quad = proj.fit((dM[:, :, None] * dM[:, None, :]).reshape(n, d * d)).reshape(n, d, d)
            quad = 0.5 * (quad + np.transpose(quad, (0, 2, 1)))
            floor = 1e-14 * max(dt, 1e-300)
            quad += floor * np.eye(d)[None]
            Z[k] = np.linalg.solve(quad, cross[:, :, None])[:, :, 0]

    if not np.all(np.isfinite(Y)):
        raise ValidationError("non-finite value process")
    Kc = np.zeros((n_steps + 1, n))
    np.cumsum(dK, axis=0, out=Kc[1:])
    stderr = float(realized.std(ddof=1) / np.sqrt(n))
    return Y, Z, Kc, dK, H, stderr, conditions


def _diagnostics(bundle, Y, Z, Kc, dK, H, n_penalty, conditions):
    gap = Y - H
    viol = np.maximum(-gap, 0.0)
    diag = {
        "max_obstacle_violation": float(viol.max()),
        "max_mean_obstacle_violation": float(viol.mean(axis=1).max()),
        "complementarity": float(np.mean(np.sum(gap[:-1] * dK, axis=0))),
        "max_abs_complementarity": float(np.max(np.abs(np.sum(gap[:-1] * dK, axis=0)))),
        "mean_K_T": float(Kc[-1].mean()),
        "min_dK": float(dK.min()) if dK.size else 0.0,
        "max_condition_number": float(max(conditions)) if conditions else 1.0,
    }
    if n_penalty is not None:
        dt = np.diff(bundle.times)[:, None]
        diag["penalization_mass"] = float(np.mean(np.sum(n_penalty * viol[:-1] * dt, axis=0)))
    martingale = np.zeros(bundle.n_paths)
    if Z is not None:
        martingale = np.sum(np.sum(Z * bundle.dM, axis=2) ** 2, axis=0)
    apriori = (np.max(Y ** 2, axis=0) + martingale
               + np.sum(Y[:-1] ** 2 * bundle.dG, axis=0) + Kc[-1] ** 2)
    diag["apriori_functional"] = float(apriori.mean())
    return diag


def solve_penalized(bundle, problem, n_penalty: float, basis: RegressionBasis | None = None,
                    implicit: bool = True, compute_z: bool = True) -> BsdeSolution:
    """Penalized scheme with driver ``f + n (y - h)^-``."""
    if n_penalty < 0:
        raise ValidationError("penalty must be nonnegative")
    basis = basis or RegressionBasis()

    def project(k, e, h, dt):
        below = e < h
        if implicit:
            lam = n_penalty * dt
            return np.where(below, (e + lam * h) / (1.0 + lam), e)
        return np.where(below, e + n_penalty * dt * (h - e), e)

    Y, Z, Kc, dK, H, stderr, conds = _backward(bundle, problem, basis, project, compute_z)
    diag = _diagnostics(bundle, Y, Z, Kc, dK, H, n_penalty, conds)
    return BsdeSolution(Y, Z, Kc, float(Y[0].mean()), stderr, "penalized",
                        float(n_penalty), diag)


def solve_reflected(bundle, problem, basis: RegressionBasis | None = None,
                    compute_z: bool = True) -> BsdeSolution:
    """Discrete reflection ``Y_k = max(e_k, h_k)``; complementarity holds exactly."""
    basis = basis or RegressionBasis()

    def project(k, e, h, dt):
        return np.maximum(e, h)

    Y, Z, Kc, dK, H, stderr, conds = _backward(bundle, problem, basis, project, compute_z)
    diag = _diagnostics(bundle, Y, Z, Kc, dK, H, None, conds)
    return BsdeSolution(Y, Z, Kc, float(Y[0].mean()), stderr, "reflected", None, diag)


def value_at_origin(solution: BsdeSolution):
    return solution.value_at_0, solution.stderr


@dataclass
class PenalizationSweep:
    n_list: list
    solutions: list
    reflected: BsdeSolution
    values: list
    monotone: bool
    gap: float

    def to_dict(self):
        return {
            "n_list": list(self.n_list),
            "values": list(self.values),
            "stderrs": [s.stderr for s in self.solutions],
            "penalization_mass": [s.diagnostics["penalization_mass"] for s in self.solutions],
            "reflected_value": self.reflected.value_at_0,
            "monotone": self.monotone,
            "gap": self.gap,
        }


def penalization_sweep(bundle, problem, n_list, basis: RegressionBasis | None = None,
                       tol: float = 1e-12) -> PenalizationSweep:
    n_list = list(n_list)
    if any(b < a for a, b in zip(n_list, n_list[1:])):
        raise ValidationError("n_list must be ascending")
    sols = [solve_penalized(bundle, problem, n, basis) for n in n_list]
    refl = solve_reflected(bundle, problem, basis)
    values = [s.value_at_0 for s in sols]
    monotone = all(b >= a - tol for a, b in zip(values, values[1:]))
    gap = abs(values[-1] - refl.value_at_0) if values else float("nan")
    return PenalizationSweep(n_list, sols, refl, values, monotone, gap)
