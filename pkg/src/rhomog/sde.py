"""Reflected forward diffusions.

``simulate_two_scale`` integrates the oscillating reflected SDE

    dX = (1/eps) b(X, X/eps) dt + c(X, X/eps) dt + sigma(X, X/eps) dW + grad_psi(X) dG

with an Euler proposal followed by Euclidean projection onto the ball; the
projection distance is the local-time increment.  ``simulate_homogenized``
does the same for the averaged SDE, reflecting obliquely along ``gamma0``.

Both integrate on a fine step ``dt`` and may record only every
``record_every``-th state; increments between records are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from . import rng as rngmod
from .errors import NonEllipticEffective, NonFiniteState, StepSizeTooLarge, TangentialReflection, \
    ValidationError
from .geometry import ConvexDomain

STIFFNESS_FACTOR = 0.1
TANGENTIAL_TOL = 1e-10


@dataclass
class PathBundle:
    """Simulated paths, stored time-major: ``X[k, path, coord]``."""

    times: np.ndarray          # (K+1,)
    X: np.ndarray              # (K+1, n, d)
    dW: np.ndarray             # (K, n, d)
    dG: np.ndarray             # (K, n)
    dM: np.ndarray             # (K, n, d)
    epsilon: float             # 0.0 for the homogenized process
    seed: int
    dt: float                  # integration step
    record_every: int = 1
    scheme: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.X.shape[1]

    @property
    def n_steps(self) -> int:
        return self.dG.shape[0]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def G(self) -> np.ndarray:
        """Cumulative local time, shape (K+1, n), starting at exactly 0."""
        out = np.zeros((self.n_steps + 1, self.n_paths))
        np.cumsum(self.dG, axis=0, out=out[1:])
        return out

    def take(self, index) -> "PathBundle":
        """Sub-bundle of the selected paths."""
        return PathBundle(self.times, self.X[:, index], self.dW[:, index], self.dG[:, index],
                          self.dM[:, index], self.epsilon, self.seed, self.dt,
                          self.record_every, dict(self.scheme))


def _grid(horizon, dt, record_every):
    if horizon <= 0 or dt <= 0:
        raise ValidationError("horizon and dt must be positive")
    n_fine = int(round(horizon / dt))
    n_fine = max(record_every, int(np.ceil(n_fine / record_every)) * record_every)
    return n_fine, horizon / n_fine


def _start(domain, x0, d):
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (d,):
        raise ValidationError(f"x0 must have {d} coordinates")
    if domain.psi(x0) < -1e-12:
        raise ValidationError(f"x0={x0.tolist()} lies outside the domain")
    return x0


def _assemble(parts, times, eps, seed, dt, record_every, scheme):
    X, dW, dG, dM = (np.concatenate([p[i] for p in parts], axis=1) for i in range(4))
    return PathBundle(times, X, dW, dG, dM, eps, seed, dt, record_every, scheme)


def _run(step, domain, x0, d, n_fine, dt, n_paths, seed, record_every, threads):
    n_rec = n_fine // record_every
    sqdt = np.sqrt(dt)

    def one_block(j, start, stop):
        m = stop - start
        gen = rngmod.block_generator(seed, j)
        X = np.tile(x0, (m, 1))
        Xs = np.empty((n_rec + 1, m, d))
        Ws = np.zeros((n_rec, m, d))
        Gs = np.zeros((n_rec, m))
        Ms = np.zeros((n_rec, m, d))
        Xs[0] = X
        for k in range(n_fine):
            r = k // record_every
            dW = gen.standard_normal((m, d))
            dW *= sqdt
            X, dG, dM = step(X, dW)
            if record_every == 1:
                Ws[r], Gs[r], Ms[r] = dW, dG, dM
            else:
                Ws[r] += dW
                Gs[r] += dG
                Ms[r] += dM
            if (k + 1) % record_every == 0:
                if not np.all(np.isfinite(X)):
                    raise NonFiniteState(f"non-finite state at step {k + 1}")
                Xs[r + 1] = X
        return Xs, Ws, Gs, Ms

    return rngmod.map_blocks(one_block, n_paths, threads)


def fast_phase(X, epsilon):
    y = X / epsilon
    y -= np.floor(y)
    return y


def _coefficient_kernels(problem, frozen_x):
    """Evaluators for sigma, b, c that skip work for constant coefficients."""
    from . import expr

    d = problem.d

    def kernel(exprs, shape):
        compiled = [expr.compile_expr(e) for e in exprs]
        if all(c is not None for _, c in compiled):
            const = np.array([c for _, c in compiled]).reshape(shape)
            return lambda env, n: const
        fns = [fn for fn, _ in compiled]

        def evaluate(env, n):
            out = np.empty((n, len(fns)))
            for i, fn in enumerate(fns):
                out[:, i] = fn(env)
            return out.reshape((n,) + shape)
        return evaluate

    sigma = kernel([e for row in problem.sigma for e in row], (d, d))
    b = kernel(problem.b, (d,))
    c = kernel(problem.c, (d,))

    def env_of(X, y):
        slow = X if frozen_x is None else np.broadcast_to(frozen_x, X.shape)
        env = {f"x{i + 1}": slow[:, i] for i in range(d)}
        env.update({f"y{i + 1}": y[:, i] for i in range(d)})
        return env

    return env_of, sigma, b, c


def two_scale_step(problem, epsilon, dt, mode="projection", eta=None, frozen_x=None):
    """One Euler step of the oscillating SDE as a closure ``(X, dW) -> (X', dG, dM)``.

    ``frozen_x`` evaluates the slow argument of the coefficients at a fixed
    point while the fast phase still follows ``X / epsilon``.
    """
    domain = problem.domain
    env_of, sigma, b, c = _coefficient_kernels(problem, frozen_x)
    fast_scale, slow_scale = dt / epsilon, dt

    def step(X, dW):
        n = X.shape[0]
        env = env_of(X, fast_phase(X, epsilon))
        sig = sigma(env, n)
        if sig.ndim == 2:
            dM = dW @ sig.T
        else:
            dM = np.einsum("nij,nj->ni", sig, dW)
        proposal = X + dM
        proposal += b(env, n) * fast_scale
        proposal += c(env, n) * slow_scale
        if mode == "projection":
            X_new, dG = domain.project(proposal)
        else:
            push = domain.delta(X) * (dt / eta)
            X_new = proposal - push
            dG = np.linalg.norm(push, axis=1)
        return X_new, dG, dM

    return step


def simulate_two_scale(problem, epsilon: float, x0, horizon: float, dt: float, n_paths: int,
                       seed: int, record_every: int = 1, threads: int = 1,
                       mode: str = "projection", eta: float | None = None) -> PathBundle:
    """Simulate the reflected oscillating SDE.

    ``mode="penalization"`` replaces the projection by the explicit penalty
    drift ``-(1/eta) delta(X) dt``; it is a cross-check only, and its states
    may leave the closed domain by O(eta).
    """
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    n_fine, dt_eff = _grid(horizon, dt, record_every)
    if dt_eff > STIFFNESS_FACTOR * epsilon ** 2 * (1 + 1e-12):
        raise StepSizeTooLarge(
            f"dt={dt_eff:.3g} exceeds {STIFFNESS_FACTOR}*eps^2={STIFFNESS_FACTOR * epsilon ** 2:.3g}")
    if mode not in ("projection", "penalization"):
        raise ValidationError(f"unknown reflection mode {mode!r}")
    if mode == "penalization" and not (eta and eta > 0):
        raise ValidationError("penalization mode needs a positive eta")
    x0 = _start(problem.domain, x0, problem.d)
    step = two_scale_step(problem, epsilon, dt_eff, mode, eta)
    parts = _run(step, problem.domain, x0, problem.d, n_fine, dt_eff, n_paths, seed,
                 record_every, threads)
    times = np.arange(n_fine // record_every + 1) * (dt_eff * record_every)
    scheme = {"kind": "two_scale", "reflection": mode, "eta": eta,
              "x0": x0.tolist(), "fine_steps": n_fine}
    return _assemble(parts, times, float(epsilon), seed, dt_eff, record_every, scheme)


# -- homogenized process --------------------------------------------------

def _as_field(value, shape):
    """Constant array or callable -> callable on a batch of points."""
    if callable(value):
        return value
    arr = np.asarray(value, dtype=float).reshape(shape)
    return lambda X: np.broadcast_to(arr, (X.shape[0],) + shape)


def symmetric_sqrt(A):
    """Principal square root of symmetric positive definite matrices (batched)."""
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    w, V = np.linalg.eigh(A)
    if np.any(w <= 0):
        raise NonEllipticEffective(f"effective diffusion has eigenvalue {w.min():.3g} <= 0")
    return (V * np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


def oblique_reflect(domain: ConvexDomain, proposal, gamma):
    """Push exterior proposals back along ``gamma`` by the smallest amount.

    Returns ``(X_new, lam)`` with ``lam >= 0`` and ``lam = 0`` for interior
    proposals.  ``gamma`` is evaluated at the projection of each exterior
    proposal.
    """
    proj, dist = domain.project(proposal)
    out = proposal.copy()
    lam = np.zeros(proposal.shape[0])
    idx = np.nonzero(dist > 0)[0]
    if idx.size == 0:
        return out, lam
    p = proj[idx]
    gam = np.asarray(gamma(p), dtype=float)
    normal = domain.grad_psi(p)
    inward = np.sum(gam * normal, axis=1)
    if np.any(inward <= TANGENTIAL_TOL):
        raise TangentialReflection("reflection direction is tangent to (or leaves) the boundary")
    z = proposal[idx] - np.asarray(domain.center)
    A = np.sum(gam * gam, axis=1)
    B = np.sum(z * gam, axis=1)
    C = np.sum(z * z, axis=1) - domain.radius ** 2
    disc = B * B - A * C
    ok = disc >= 0
    root = np.where(ok, (-B - np.sqrt(np.where(ok, disc, 0.0))) / A, 0.0)
    ok &= root >= 0
    lam_i = np.where(ok, root, dist[idx] / inward)
    moved = np.where(ok[:, None], proposal[idx] + lam_i[:, None] * gam, p)
    # a direction along the normal is plain projection; take it exactly
    norm_gam = np.sqrt(A)
    normal_dir = np.all(np.abs(gam / norm_gam[:, None] - normal) <= 1e-13, axis=1)
    lam_i = np.where(normal_dir, dist[idx] / norm_gam, lam_i)
    moved = np.where(normal_dir[:, None], p, moved)
    # clean up rounding so stored states stay in the closed ball
    out[idx] = domain.project(moved)[0]
    lam[idx] = lam_i
    return out, lam


def simulate_homogenized(domain: ConvexDomain, A0_bar, C0_bar, gamma0, x0, horizon: float,
                         dt: float, n_paths: int, seed: int, record_every: int = 1,
                         threads: int = 1) -> PathBundle:
    """Simulate dX = A0^{1/2} dW + C0 dt + gamma0 dG in the ball.

    ``A0_bar`` and ``C0_bar`` are constants or callables on (n, d) batches.
    ``gamma0=None`` means normal reflection, which reuses the plain
    projection so it reproduces ``simulate_two_scale`` bit for bit.
    """
    d = domain.dim
    x0 = _start(domain, x0, d)
    n_fine, dt_eff = _grid(horizon, dt, record_every)
    if callable(A0_bar):
        root_of = lambda X: symmetric_sqrt(A0_bar(X))  # noqa: E731
        noise = lambda X, dW: np.einsum("nij,nj->ni", root_of(X), dW)  # noqa: E731
    else:
        rootT = symmetric_sqrt(np.asarray(A0_bar, dtype=float).reshape(d, d)).T
        noise = lambda X, dW: dW @ rootT  # noqa: E731
    if callable(C0_bar):
        drift_of = lambda X: C0_bar(X) * dt_eff  # noqa: E731
    else:
        shift = np.asarray(C0_bar, dtype=float).reshape(d) * dt_eff
        drift_of = lambda X: shift  # noqa: E731
    gamma_of = None if gamma0 is None else _as_field(gamma0, (d,))

    def step(X, dW):
        dM = noise(X, dW)
        proposal = X + drift_of(X) + dM
        if gamma0 is None:
            X_new, dG = domain.project(proposal)
        else:
            X_new, dG = oblique_reflect(domain, proposal, gamma_of)
        return X_new, dG, dM

    parts = _run(step, domain, x0, d, n_fine, dt_eff, n_paths, seed, record_every, threads)
    times = np.arange(n_fine // record_every + 1) * (dt_eff * record_every)
    scheme = {"kind": "homogenized", "reflection": "normal" if gamma0 is None else "oblique",
              "x0": x0.tolist(), "fine_steps": n_fine}
    return _assemble(parts, times, 0.0, seed, dt_eff, record_every, scheme)


# -- diagnostics ----------------------------------------------------------

@dataclass
class MomentReport:
    p: float
    sup_moment: float
    sup_moment_stderr: float
    mean_local_time: float
    mean_local_time_stderr: float

    def to_dict(self):
        return dict(self.__dict__)


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    n = values.size
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(values.mean()), se


def moment_diagnostics(bundle: PathBundle, p: float = 2.0) -> MomentReport:
    """Estimate E[sup_s |X_s|^p] and E[G_t] with standard errors."""
    if bundle.n_paths == 0:
        raise ValidationError("empty bundle")
    sup = np.max(np.linalg.norm(bundle.X, axis=2), axis=0) ** p
    m, se = _mean_se(sup)
    g, gse = _mean_se(bundle.dG.sum(axis=0))
    return MomentReport(p, m, se, g, gse)


def skorokhod_defect(bundle: PathBundle, domain: ConvexDomain, threshold: float | None = None) -> float:
    """Local time charged while the post-step state is away from the boundary.

    A state counts as interior when ``psi > threshold`` (default
    ``2*sqrt(dt)``).  Zero for projection bundles recorded at every step.
    """
    if threshold is None:
        threshold = 2.0 * np.sqrt(bundle.dt)
    inside = domain.psi(bundle.X[1:]) > threshold
    return float(np.sum(bundle.dG * inside))
