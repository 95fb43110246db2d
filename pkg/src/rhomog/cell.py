"""Frozen-x cell problems on the unit torus.

For a fixed slow point ``x`` the fast generator

    L phi = sum_ij a_ij(x, y) d_i d_j phi + sum_i b_i(x, y) d_i phi,   a = sigma sigma^T / 2

is discretized with second-order periodic finite differences.  Its
invariant density ``m`` solves ``L^T m = 0`` and the corrector ``b_hat``
solves ``L b_hat = -b`` with ``sum(b_hat m) = 0``.  From these come the
averaged diffusion ``A0_bar``, drift ``C0_bar`` and, along the boundary,
the reflection direction ``gamma0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import rng as rngmod
from .errors import CenteringViolated, NoBoundaryMass, NonEllipticEffective, SolverDiverged, \
    ValidationError
from .sde import fast_phase, two_scale_step

CENTERING_TOL = 1e-6
DENSITY_RESIDUAL_TOL = 1e-8
POISSON_RESIDUAL_TOL = 1e-9


@dataclass(frozen=True)
class TorusGrid:
    d_cell: int
    N: int

    def __post_init__(self):
        if self.d_cell not in (1, 2):
            raise ValidationError("cell problems are supported in dimension 1 or 2")
        if self.N < 8 or self.N % 2:
            raise ValidationError("N must be even and at least 8")

    @property
    def spacing(self) -> float:
        return 1.0 / self.N

    @property
    def size(self) -> int:
        return self.N ** self.d_cell

    @property
    def weight(self) -> float:
        """Quadrature weight of one node."""
        return self.spacing ** self.d_cell

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape (size, d_cell); axis 0 varies slowest."""
        axis = np.arange(self.N) * self.spacing
        mesh = np.meshgrid(*([axis] * self.d_cell), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def shift(self, field_, axis, step):
        """Periodic shift of a node field: value at node + step*e_axis."""
        shaped = field_.reshape((self.N,) * self.d_cell + field_.shape[1:])
        return np.roll(shaped, -step, axis=axis).reshape(field_.shape)

    def d_dy(self, field_, axis):
        """Central difference along ``axis``."""
        return (self.shift(field_, axis, 1) - self.shift(field_, axis, -1)) / (2 * self.spacing)

    def interpolate(self, field_, y):
        """Periodic (bi)linear interpolation of a node field at points y, shape (n, d_cell)."""
        N = self.N
        s = np.mod(y, 1.0) * N
        i0 = np.floor(s).astype(int) % N
        w = s - np.floor(s)
        shaped = field_.reshape((N,) * self.d_cell + field_.shape[1:])
        if self.d_cell == 1:
            i1 = (i0[:, 0] + 1) % N
            t = w[:, 0].reshape((-1,) + (1,) * (field_.ndim - 1))
            return (1 - t) * shaped[i0[:, 0]] + t * shaped[i1]
        a0, b0 = i0[:, 0], i0[:, 1]
        a1, b1 = (a0 + 1) % N, (b0 + 1) % N
        extra = (1,) * (field_.ndim - 1)
        u = w[:, 0].reshape((-1,) + extra)
        v = w[:, 1].reshape((-1,) + extra)
        return ((1 - u) * (1 - v) * shaped[a0, b0] + u * (1 - v) * shaped[a1, b0]
                + (1 - u) * v * shaped[a0, b1] + u * v * shaped[a1, b1])


def _embed(problem, x, grid):
    """Slow point repeated per node and fast nodes padded to the problem dimension."""
    d = problem.d
    if grid.d_cell != d:
        raise ValidationError(f"cell dimension {grid.d_cell} differs from problem dimension {d}")
    y = grid.nodes()
    xs = np.tile(np.asarray(x, dtype=float).reshape(1, d), (grid.size, 1))
    return xs, y


def frozen_generator(problem, x, grid: TorusGrid) -> sp.csr_matrix:
    xs, y = _embed(problem, x, grid)
    sig = problem.sigma_at(xs, y)
    a = 0.5 * sig @ np.transpose(sig, (0, 2, 1))
    b = problem.b_at(xs, y)
    h = grid.spacing
    n = grid.size
    idx = np.arange(n)

    rows, cols, vals = [], [], []

    def add(target, coef):
        rows.append(idx)
        cols.append(target)
        vals.append(coef)

    def neighbour(axis, step):
        return grid.shift(idx, axis, step)

    for i in range(grid.d_cell):
        aii = a[:, i, i]
        add(neighbour(i, 1), aii / h ** 2 + b[:, i] / (2 * h))
        add(neighbour(i, -1), aii / h ** 2 - b[:, i] / (2 * h))
        add(idx, -2 * aii / h ** 2)
    if grid.d_cell == 2:
        mixed = (a[:, 0, 1] + a[:, 1, 0]) / (4 * h ** 2)
        pp = grid.shift(neighbour(0, 1), 1, 1)
        pm = grid.shift(neighbour(0, 1), 1, -1)
        mp = grid.shift(neighbour(0, -1), 1, 1)
        mm = grid.shift(neighbour(0, -1), 1, -1)
        add(pp, mixed)
        add(mm, mixed)
        add(pm, -mixed)
        add(mp, -mixed)
    L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    return L.tocsr()


def invariant_density(L, grid: TorusGrid) -> np.ndarray:
    """Normalized solution of the discrete adjoint equation ``L^T m = 0``."""
    n = grid.size
    K = sp.bmat([[L.T, sp.csr_matrix(np.ones((n, 1)))],
                 [sp.csr_matrix(np.full((1, n), grid.weight)), None]], format="csc")
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    sol = spla.spsolve(K, rhs)
    m = sol[:n]
    scale = abs(L).max() * max(np.abs(m).max(), 1.0)
    residual = np.abs(L.T @ m).max() / scale
    if not np.all(np.isfinite(m)) or residual > DENSITY_RESIDUAL_TOL:
        raise SolverDiverged(f"invariant density residual {residual:.3g}")
    if m.min() < -1e-12 * max(m.max(), 1.0):
        raise SolverDiverged(f"invariant density has negative mass {m.min():.3g}")
    m = np.clip(m, 0.0, None)
    return m / (m.sum() * grid.weight)


def check_centering(problem, x, m, grid: TorusGrid) -> np.ndarray:
    """Discrete integral of the fast drift against the invariant density."""
    xs, y = _embed(problem, x, grid)
    return problem.b_at(xs, y).T @ m * grid.weight


def corrector(L, problem, x, m, grid: TorusGrid):
    """Solve ``L b_hat = -b`` per component, normalized by ``sum(b_hat m) = 0``.

    Returns ``(b_hat, poisson_residual)`` with ``b_hat`` of shape (size, d).
    """
    centering = check_centering(problem, x, m, grid)
    if np.any(np.abs(centering) > CENTERING_TOL):
        raise CenteringViolated(f"centering residual {centering.tolist()} at x={list(np.ravel(x))}")
    xs, y = _embed(problem, x, grid)
    b = problem.b_at(xs, y)
    n = grid.size
    if not np.any(b):
        return np.zeros_like(b), 0.0
    K = sp.bmat([[L, sp.csr_matrix(np.ones((n, 1)))],
                 [sp.csr_matrix((m * grid.weight).reshape(1, n)), None]], format="csc")
    # subtract the discrete mean so the system is exactly consistent
    rhs = np.vstack([-(b - centering), np.zeros((1, b.shape[1]))])
    sol = spla.splu(K).solve(rhs)
    b_hat = sol[:n]
    residual = float(np.abs(L @ b_hat + b).max())
    if not np.all(np.isfinite(b_hat)) or residual > POISSON_RESIDUAL_TOL + np.abs(centering).max():
        raise SolverDiverged(f"corrector residual {residual:.3g}")
    return b_hat, residual


@dataclass
class CellSolution:
    x: np.ndarray
    grid: TorusGrid
    m: np.ndarray                  # (size,)
    b_hat: np.ndarray              # (size, d)
    db_hat_dy: np.ndarray          # (size, d, d): [node, k, i] = d b_hat^k / d y_i
    db_hat_dx: np.ndarray          # (size, d, d): [node, k, i] = d b_hat^k / d x_i
    d2b_hat_dxdy: np.ndarray       # (size, d, d, d): [node, k, i, j] = d2 b_hat^k / dx_i dy_j
    A0_bar: np.ndarray | None = None
    C0_bar: np.ndarray | None = None
    S0: np.ndarray | None = None
    C0: np.ndarray | None = None
    gamma0: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "x": self.x.tolist(),
            "N": self.grid.N,
            "d_cell": self.grid.d_cell,
            "m": self.m.tolist(),
            "b_hat": self.b_hat.tolist(),
            "A0_bar": None if self.A0_bar is None else self.A0_bar.tolist(),
            "C0_bar": None if self.C0_bar is None else self.C0_bar.tolist(),
            "gamma0": None if self.gamma0 is None else np.asarray(self.gamma0).tolist(),
            "diagnostics": self.diagnostics,
        }
        return out


def _gradient_y(field_, grid):
    """[node, ..., i] = d field / d y_i for a field of shape (size, ...)."""
    return np.stack([grid.d_dy(field_, i) for i in range(grid.d_cell)], axis=-1)


def _solve_at(problem, x, grid):
    L = frozen_generator(problem, x, grid)
    m = invariant_density(L, grid)
    b_hat, residual = corrector(L, problem, x, m, grid)
    return L, m, b_hat, residual


def default_fd_step(x) -> float:
    return 1e-3 * (1.0 + float(np.linalg.norm(x)))


def solve_cell(problem, x, N: int = 256, fd_step: float | None = None) -> CellSolution:
    """Invariant density, corrector and its derivatives at a frozen slow point."""
    x = np.asarray(x, dtype=float).reshape(problem.d)
    grid = TorusGrid(problem.d, N)
    L, m, b_hat, residual = _solve_at(problem, x, grid)
    d = problem.d
    db_dy = _gradient_y(b_hat, grid)
    db_dx = np.zeros((grid.size, d, d))
    if problem.depends_on_slow() and problem.has_fast_drift():
        step = default_fd_step(x) if fd_step is None else fd_step
        for i in range(d):
            e = np.zeros(d)
            e[i] = step
            plus = _solve_at(problem, x + e, grid)[2]
            minus = _solve_at(problem, x - e, grid)[2]
            db_dx[:, :, i] = (plus - minus) / (2 * step)
    d2 = _gradient_y(db_dx, grid)
    centering = check_centering(problem, x, m, grid)
    diagnostics = {
        "centering_residual": centering.tolist(),
        "corrector_centering": (b_hat.T @ m * grid.weight).tolist(),
        "poisson_residual": residual,
        "density_min": float(m.min()),
    }
    return CellSolution(x, grid, m, b_hat, db_dy, db_dx, d2, diagnostics=diagnostics)


def effective_tensors(problem, cell: CellSolution):
    """Averaged diffusion and drift at the cell's slow point.

    Fills ``A0_bar``, ``C0_bar``, ``S0`` and ``C0`` on ``cell`` and returns
    ``(A0_bar, C0_bar, S0, C0)``.
    """
    grid = cell.grid
    xs, y = _embed(problem, cell.x, grid)
    sig = problem.sigma_at(xs, y)
    b = problem.b_at(xs, y)
    c = problem.c_at(xs, y)
    d = problem.d
    I_plus_J = np.eye(d)[None] + cell.db_hat_dy
    S0 = I_plus_J @ sig
    A0 = S0 @ np.transpose(S0, (0, 2, 1))
    sigsig = sig @ np.transpose(sig, (0, 2, 1))
    C0 = (np.einsum("nki,ni->nk", cell.db_hat_dx, b)
          + np.einsum("nki,ni->nk", I_plus_J, c)
          + 0.5 * np.einsum("nkij,nij->nk", cell.d2b_hat_dxdy, sigsig))
    w = cell.m * grid.weight
    A0_bar = np.einsum("n,nij->ij", w, A0)
    A0_bar = 0.5 * (A0_bar + A0_bar.T)
    C0_bar = w @ C0
    lam = np.linalg.eigvalsh(A0_bar).min()
    if lam <= 0:
        raise NonEllipticEffective(f"A0_bar has eigenvalue {lam:.3g}")
    cell.A0_bar, cell.C0_bar, cell.S0, cell.C0 = A0_bar, C0_bar, S0, C0
    cell.diagnostics["A0_bar_min_eigenvalue"] = float(lam)
    return A0_bar, C0_bar, S0, C0


# -- boundary reflection direction ----------------------------------------

@dataclass
class BoundaryEstimate:
    gamma0: np.ndarray
    stderr: np.ndarray
    hitting_average: np.ndarray     # unweighted mean over reflection events
    hitting_stderr: np.ndarray
    boundary_mass: float
    events: int

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def boundary_tensor(problem, x_boundary, cell: CellSolution, epsilon: float, dt: float,
                    paths: int, horizon: float, seed: int) -> BoundaryEstimate:
    """Local-time-weighted average of ``(I + d_y b_hat) grad_psi`` along reflected paths.

    Paths start at ``x_boundary`` with the slow argument of the coefficients
    frozen there; each reflection step contributes the post-projection fast
    phase with weight equal to its local-time increment.  The unweighted
    average over reflection events is returned alongside as a second
    estimator.
    """
    domain = problem.domain
    x_boundary = np.asarray(x_boundary, dtype=float).reshape(problem.d)
    if abs(domain.psi(x_boundary)) > 1e-9:
        raise ValidationError("x_boundary must lie on the boundary")
    n_fine = max(1, int(round(horizon / dt)))
    step = two_scale_step(problem, epsilon, horizon / n_fine, frozen_x=x_boundary)
    J = cell.db_hat_dy
    d = problem.d
    sq = np.sqrt(horizon / n_fine)

    def one_block(j, start, stop):
        m = stop - start
        gen = rngmod.block_generator(seed, j, rngmod.ORACLE)
        X = np.tile(x_boundary, (m, 1))
        wsum = np.zeros(m)
        wv = np.zeros((m, d))
        count = np.zeros(m)
        vsum = np.zeros((m, d))
        vsq = np.zeros((m, d))
        for _ in range(n_fine):
            X, dG, _ = step(X, gen.standard_normal((m, d)) * sq)
            hit = np.nonzero(dG > 0)[0]
            if hit.size:
                Xh = X[hit]
                Jh = cell.grid.interpolate(J, fast_phase(Xh, epsilon))
                v = np.eye(d)[None] + Jh
                v = np.einsum("nki,ni->nk", v, domain.grad_psi(Xh))
                wsum[hit] += dG[hit]
                wv[hit] += dG[hit, None] * v
                count[hit] += 1
                vsum[hit] += v
                vsq[hit] += v * v
        return wsum, wv, count, vsum, vsq

    parts = rngmod.map_blocks(one_block, paths)
    wsum, wv, count, vsum, vsq = (np.concatenate([p[i] for p in parts]) for i in range(5))
    total = wsum.sum()
    if total <= 0:
        raise NoBoundaryMass("no local time accumulated; increase the horizon")
    gamma = wv.sum(axis=0) / total
    # ratio estimator: linearized variance over independent paths
    resid = wv - wsum[:, None] * gamma
    n = len(wsum)
    se = np.sqrt(np.sum(resid ** 2, axis=0) * n / max(n - 1, 1)) / total
    events = count.sum()
    hit_avg = vsum.sum(axis=0) / events
    resid_h = vsum - count[:, None] * hit_avg
    hit_se = np.sqrt(np.sum(resid_h ** 2, axis=0) * n / max(n - 1, 1)) / events
    return BoundaryEstimate(gamma, se, hit_avg, hit_se, float(total), int(events))


# -- Feynman-Kac oracle for the corrector ----------------------------------

def corrector_monte_carlo(problem, x, probes, horizon: float, dtau: float, n_paths: int,
                          seed: int):
    """Estimate ``b_hat(y) = int_0^T E_y[b(x, U_t)] dt`` by simulating the torus diffusion.

    ``probes`` has shape (p, d).  Returns ``(mean, stderr)`` of shape (p, d).
    Independent of the grid solver: only the coefficient expressions are used.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    d = problem.d
    x = np.asarray(x, dtype=float).reshape(1, d)
    n_steps = int(round(horizon / dtau))
    dtau = horizon / n_steps
    sq = np.sqrt(dtau)
    means = np.empty((len(probes), d))
    errs = np.empty((len(probes), d))
    for p, y0 in enumerate(probes):
        def one_block(j, start, stop, y0=y0, p=p):
            m = stop - start
            gen = rngmod.block_generator(seed + 7919 * p, j, rngmod.ORACLE)
            U = np.tile(y0, (m, 1))
            xs = np.broadcast_to(x, (m, d))
            acc = np.zeros((m, d))
            b_prev = problem.b_at(xs, U)
            for _ in range(n_steps):
                sig = problem.sigma_at(xs, U)
                U = U + b_prev * dtau + np.einsum("nij,nj->ni", sig, gen.standard_normal((m, d)) * sq)
                U -= np.floor(U)
                b_next = problem.b_at(xs, U)
                acc += 0.5 * (b_prev + b_next) * dtau
                b_prev = b_next
            return acc

        acc = np.concatenate(rngmod.map_blocks(one_block, n_paths))
        means[p] = acc.mean(axis=0)
        errs[p] = acc.std(axis=0, ddof=1) / np.sqrt(n_paths)
    return means, errs
