"""Second-order divergence-form SPDE in weak form, and its time stepping.

For test functions ``phi`` vanishing outside G the equation reads

    d(phi, u) = [ (D_i phi, -a^{ij} D_j u - a^i u) + (phi, b^i D_i u + c u + f) ] dt
                + (phi, sigma^{ik} D_i u + nu^k u) dw^k .

Coefficients are sampled on the box lattice padded by one node, because the
fluxes ``a^{ij} D_j u`` live on the forward-difference (staggered) support
which reaches one node beyond the interior.  Inside the noise term, ``D_i u``
is the forward difference averaged back to the nodes (a centered difference),
so each noise field is again a nodal grid function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AssumptionViolated, GridMismatch
from .grid_spaces import Grid, GridFunction, _bdiff, _fdiff, _inner_V_values, as_values
from .linalg import pcg
from .resolvent import GramOperator, ResolventSolver
from .stochastic import NoiseDriver, map_paths

__all__ = [
    "SPDECoefficients",
    "SPDEProblem",
    "AssumptionReport",
    "Trajectory",
    "check_parabolicity",
    "check_dissipativity",
    "check_assumptions",
    "weak_rhs_functional",
    "drift_representer",
    "riesz_vstar",
    "diffusion_fields",
    "diffusion_energy_density",
    "step",
    "simulate",
    "weak_consistency_check",
]

SCHEMES = ("semi-implicit", "explicit")


def _sample(grid: Grid, value):
    """Sample a constant or a callable of coordinates on the pad-1 lattice."""
    X = grid.lattice_coords(pad=1)
    out = value(X) if callable(value) else value
    return np.array(np.broadcast_to(np.asarray(out, dtype=float), X.shape[:-1]))


def _sample_nested(grid: Grid, spec, rows: int, cols: int | None):
    """Sample a (rows[, cols]) nested list of constants/callables."""
    X = grid.lattice_coords(pad=1)
    L = X.shape[:-1]
    if cols is None:
        out = np.zeros((rows,) + L)
        if spec is None:
            return out
        spec = list(spec) if isinstance(spec, (list, tuple)) else [spec] * rows
        for i in range(rows):
            out[i] = _sample(grid, spec[i])
        return out
    out = np.zeros((rows, cols) + L)
    if spec is None:
        return out
    for i in range(rows):
        for j in range(cols):
            out[i, j] = _sample(grid, spec[i][j])
    return out


@dataclass(frozen=True, eq=False)
class SPDECoefficients:
    """Deterministic coefficient fields sampled on the pad-1 lattice.

    Array layouts (``L`` is the padded lattice shape):
    ``a`` (d, d, *L); ``a_lower``, ``b`` (d, *L); ``c`` (*L);
    ``sigma`` (d, K, *L); ``nu`` (K, *L).  The free term ``f`` is an array
    (*L) or a callable ``t -> array`` sampled at the left end of each step.
    """

    grid: Grid
    K: int
    a: np.ndarray
    a_lower: np.ndarray
    b: np.ndarray
    c: np.ndarray
    sigma: np.ndarray
    nu: np.ndarray
    f: np.ndarray | Callable = field(default=None)
    bound: float | None = None

    def __post_init__(self):
        g = self.grid
        d, K = g.dim, self.K
        L = g.padded_shape(1)
        expect = {
            "a": (d, d) + L,
            "a_lower": (d,) + L,
            "b": (d,) + L,
            "c": L,
            "sigma": (d, K) + L,
            "nu": (K,) + L,
        }
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.f is None:
            object.__setattr__(self, "f", np.zeros(L))
        if not callable(self.f):
            f = np.asarray(self.f, dtype=float)
            if f.shape != L:
                raise ValueError(f"f has shape {f.shape}, expected {L}")
            object.__setattr__(self, "f", f)
        if self.bound is not None:
            worst = max(
                float(np.max(np.abs(getattr(self, n)), initial=0.0)) for n in expect
            )
            if worst > self.bound:
                raise AssumptionViolated(
                    f"coefficient sup-norm {worst} exceeds declared bound {self.bound}"
                )

    @classmethod
    def from_functions(cls, grid: Grid, K: int = 0, *, a=None, a_lower=None, b=None, c=0.0,
                       sigma=None, nu=None, f=0.0, f_t=None, bound=None):
        """Sample coefficients given as constants or callables of ``x`` (shape (..., d)).

        ``a`` is a d x d nested list (a scalar means ``a * identity``),
        ``sigma`` a d x K nested list, ``nu`` a length-K list.  ``f_t``, if
        given, is a callable ``(t, x)`` and overrides ``f``.
        """
        d = grid.dim
        if a is None:
            a = 0.0
        if not isinstance(a, (list, tuple)):
            a = [[a if i == j else 0.0 for j in range(d)] for i in range(d)]
        if sigma is not None and not isinstance(sigma, (list, tuple)):
            sigma = [[sigma] * K for _ in range(d)]
        if nu is not None and not isinstance(nu, (list, tuple)):
            nu = [nu] * K
        if f_t is not None:
            X = grid.lattice_coords(pad=1)
            L = X.shape[:-1]
            f_field = lambda t: np.array(np.broadcast_to(np.asarray(f_t(t, X), dtype=float), L))
        else:
            f_field = _sample(grid, f)
        return cls(
            grid=grid,
            K=K,
            a=_sample_nested(grid, a, d, d),
            a_lower=_sample_nested(grid, a_lower, d, None),
            b=_sample_nested(grid, b, d, None),
            c=_sample(grid, c),
            sigma=_sample_nested(grid, sigma, d, K),
            nu=_sample_nested(grid, nu, K, None),
            f=f_field,
            bound=bound,
        )

    def f_at(self, t: float) -> np.ndarray:
        return self.f(t) if callable(self.f) else self.f

    def interior(self, arr: np.ndarray) -> np.ndarray:
        """Interior-node values ``(..., N)`` of a pad-1 lattice field."""
        return self.grid.restrict(arr, pad=1)

    @property
    def has_noise(self) -> bool:
        return self.K > 0 and (np.any(self.sigma) or np.any(self.nu))

    # -- operator kernels on nodal arrays (..., N) ---------------------------

    def _grads(self, u: np.ndarray):
        g = self.grid
        E = g.embed(u, 1)
        return E, [_fdiff(E, i, g.h, g.dim) for i in range(g.dim)]

    def divergence_operator(self, u: np.ndarray) -> np.ndarray:
        """``sum_ij D_i^T (a^{ij} D_j u)`` restricted to the interior (SPD part)."""
        g = self.grid
        _, Du = self._grads(u)
        acc = 0.0
        for i in range(g.dim):
            flux = sum(self.a[i, j] * Du[j] for j in range(g.dim))
            acc = acc - _bdiff(flux, i, g.h, g.dim)
        return g.restrict(acc, 1)

    def divergence_diagonal(self) -> np.ndarray:
        g = self.grid
        diag = np.zeros(g.padded_shape(1))
        for i in range(g.dim):
            shifted = np.zeros_like(self.a[i, i])
            src = [slice(None)] * g.dim
            dst = [slice(None)] * g.dim
            src[i], dst[i] = slice(None, -1), slice(1, None)
            shifted[tuple(dst)] = self.a[i, i][tuple(src)]
            diag += self.a[i, i] + shifted
            for j in range(g.dim):
                if j != i:
                    diag += self.a[i, j]
        return g.restrict(diag, 1) / g.h**2

    def centered_grads(self, u: np.ndarray):
        g = self.grid
        E = g.embed(u, 1)
        return [
            g.restrict(0.5 * (_fdiff(E, i, g.h, g.dim) + _bdiff(E, i, g.h, g.dim)), 1)
            for i in range(g.dim)
        ]


def _values(u, grid):
    return as_values(u, grid)


def drift_representer(u, coeffs: SPDECoefficients, t: float = 0.0) -> np.ndarray:
    """H-representer ``g`` of the drift functional: ``(phi, g)_H`` equals it for all phi."""
    g = coeffs.grid
    u = _values(u, g)
    E, Du = coeffs._grads(u)
    acc = 0.0
    for i in range(g.dim):
        flux = -sum(coeffs.a[i, j] * Du[j] for j in range(g.dim)) - coeffs.a_lower[i] * E
        acc = acc - _bdiff(flux, i, g.h, g.dim)
    out = g.restrict(acc, 1)
    for i in range(g.dim):
        out = out + coeffs.interior(coeffs.b[i]) * g.restrict(Du[i], 1)
    return out + coeffs.interior(coeffs.c) * u + coeffs.interior(coeffs.f_at(t))


def weak_rhs_functional(u, coeffs: SPDECoefficients, phi, t: float = 0.0):
    """``(D_i phi, -a^{ij} D_j u - a^i u) + (phi, b^i D_i u + c u + f)``.

    Evaluated directly as lattice sums; batched over leading axes of ``u``
    and ``phi`` (which broadcast against each other).
    """
    g = coeffs.grid
    u = _values(u, g)
    phi = _values(phi, g)
    E, Du = coeffs._grads(u)
    _, Dphi = coeffs._grads(phi)
    lead = np.broadcast_shapes(u.shape[:-1], phi.shape[:-1])
    total = np.zeros(lead)
    for i in range(g.dim):
        flux = -sum(coeffs.a[i, j] * Du[j] for j in range(g.dim)) - coeffs.a_lower[i] * E
        prod = Dphi[i] * flux
        total = total + np.sum(prod.reshape(prod.shape[: prod.ndim - g.dim] + (-1,)), axis=-1)
    nodal = coeffs.interior(coeffs.c) * u + coeffs.interior(coeffs.f_at(t))
    for i in range(g.dim):
        nodal = nodal + coeffs.interior(coeffs.b[i]) * g.restrict(Du[i], 1)
    total = total + np.sum(phi * nodal, axis=-1)
    total = g.cell_volume * total
    return float(total) if np.ndim(total) == 0 else total


def riesz_vstar(u, coeffs: SPDECoefficients, t: float = 0.0, solver: ResolventSolver | None = None):
    """V-representer (m = 1) of the drift functional: ``R_0`` applied to its H-representer."""
    if solver is None:
        solver = ResolventSolver(GramOperator(coeffs.grid, 1), 0.0)
    if solver.gram.m != 1 or solver.lam != 0:
        raise ValueError("riesz_vstar needs the lambda = 0 solver of the m = 1 Gram operator")
    wrap = isinstance(u, GridFunction)
    v = solver.solve(drift_representer(u, coeffs, t))
    return GridFunction(coeffs.grid, v) if wrap else v


def diffusion_fields(u, coeffs: SPDECoefficients) -> np.ndarray:
    """Noise fields ``sum_i sigma^{ik} D_i u + nu^k u``, shape ``(..., K, N)``."""
    g = coeffs.grid
    u = _values(u, g)
    Dc = coeffs.centered_grads(u)
    sig = coeffs.interior(coeffs.sigma)  # (d, K, N)
    nu = coeffs.interior(coeffs.nu)  # (K, N)
    out = nu * u[..., None, :]
    for i in range(g.dim):
        out = out + sig[i] * Dc[i][..., None, :]
    return out


def diffusion_energy_density(u, coeffs: SPDECoefficients) -> np.ndarray:
    """``alpha^{ij} D_i u D_j u + 2 (sigma^i, nu) u D_i u + |nu|^2 u^2`` at each node."""
    g = coeffs.grid
    u = _values(u, g)
    Dc = coeffs.centered_grads(u)
    sig = coeffs.interior(coeffs.sigma)
    nu = coeffs.interior(coeffs.nu)
    out = np.sum(nu * nu, axis=0) * u * u
    for i in range(g.dim):
        out = out + 2.0 * np.sum(sig[i] * nu, axis=0) * u * Dc[i]
        for j in range(g.dim):
            alpha_ij = np.sum(sig[i] * sig[j], axis=0)
            out = out + alpha_ij * Dc[i] * Dc[j]
    return out


# -- assumptions ------------------------------------------------------------------

@dataclass(frozen=True)
class AssumptionReport:
    parabolicity_margin: float | None = None
    dissipativity_margin: float | None = None
    K: float | None = None
    parabolic: bool | None = None
    dissipative: bool | None = None

    @property
    def passed(self) -> bool:
        return self.parabolic is not False and self.dissipative is not False

    def merge(self, other: "AssumptionReport") -> "AssumptionReport":
        pick = lambda x, y: x if x is not None else y
        return AssumptionReport(
            pick(self.parabolicity_margin, other.parabolicity_margin),
            pick(self.dissipativity_margin, other.dissipativity_margin),
            pick(self.K, other.K),
            pick(self.parabolic, other.parabolic),
            pick(self.dissipative, other.dissipative),
        )


def check_parabolicity(coeffs: SPDECoefficients, tol: float = 1e-12) -> AssumptionReport:
    """Smallest eigenvalue over interior nodes of ``sym(2a - alpha)``, ``alpha = sigma sigma^T``."""
    a = coeffs.interior(coeffs.a)  # (d, d, N)
    s = coeffs.interior(coeffs.sigma)  # (d, K, N)
    alpha = np.einsum("ikn,jkn->ijn", s, s)
    M = 2.0 * a - alpha
    M = 0.5 * (M + np.swapaxes(M, 0, 1))
    eig = np.linalg.eigvalsh(np.moveaxis(M, -1, 0))
    margin = float(eig.min())
    return AssumptionReport(parabolicity_margin=margin, parabolic=bool(margin >= -tol))


def check_dissipativity(coeffs: SPDECoefficients, K_bound=0.0, slack: float = 1e-6) -> AssumptionReport:
    """``D_i eta^i + 2c + |nu|^2 <= K`` with ``eta^i = a^i - b^i - (sigma^i, nu)``.

    ``D_i eta^i`` uses central differences of the sampled field; the check
    allows ``slack * h`` for the differencing error.
    """
    g = coeffs.grid
    eta = coeffs.a_lower - coeffs.b - np.einsum("ik...,k...->i...", coeffs.sigma, coeffs.nu)
    div = 0.0
    for i in range(g.dim):
        div = div + 0.5 * (_fdiff(eta[i], i, g.h, g.dim) + _bdiff(eta[i], i, g.h, g.dim))
    lhs = g.restrict(div, 1) + 2.0 * coeffs.interior(coeffs.c) + coeffs.interior(np.sum(coeffs.nu**2, axis=0))
    K = np.broadcast_to(np.asarray(K_bound, dtype=float), lhs.shape)
    margin = float(np.max(lhs - K))
    return AssumptionReport(
        dissipativity_margin=margin,
        K=float(np.max(K)),
        dissipative=bool(margin <= slack * g.h),
    )


def check_assumptions(coeffs: SPDECoefficients, K_bound=0.0) -> AssumptionReport:
    return check_parabolicity(coeffs).merge(check_dissipativity(coeffs, K_bound))


# -- time stepping ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SPDEProblem:
    coeffs: SPDECoefficients
    u0: np.ndarray
    K_bound: float = 0.0
    name: str = "spde"

    def __post_init__(self):
        u0 = as_values(self.u0, self.coeffs.grid)
        if u0.shape != (self.coeffs.grid.N,):
            raise ValueError("u0 must be a single grid function")
        object.__setattr__(self, "u0", np.asarray(u0, dtype=float))

    @property
    def grid(self) -> Grid:
        return self.coeffs.grid

    def assumptions(self) -> AssumptionReport:
        return check_assumptions(self.coeffs, self.K_bound)


def step(u, coeffs: SPDECoefficients, dt: float, dW, t: float = 0.0,
         scheme: str = "semi-implicit", rel_tol: float = 1e-10):
    """One Euler-Maruyama step; the ``a^{ij}`` part is implicit in the default scheme.

    ``u`` is ``(..., N)``, ``dW`` is ``(..., K)``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    wrap = isinstance(u, GridFunction)
    g = coeffs.grid
    u = _values(u, g)
    dW = np.asarray(dW, dtype=float)
    noise = 0.0
    if coeffs.K:
        G = diffusion_fields(u, coeffs)
        noise = np.sum(G * dW[..., :, None], axis=-2)
    drift = drift_representer(u, coeffs, t)
    if scheme == "explicit":
        out = u + dt * drift + noise
    else:
        rhs = u + dt * (drift + coeffs.divergence_operator(u)) + noise
        diag = 1.0 + dt * coeffs.divergence_diagonal()
        if np.any(diag <= 0):
            diag = None
        out, _ = pcg(lambda v: v + dt * coeffs.divergence_operator(v), rhs, diag=diag, rel_tol=rel_tol)
    return GridFunction(g, out) if wrap else out


@dataclass(eq=False)
class Trajectory:
    """States ``(M + 1, P, N)`` at ``times``, with the increments ``(M, P, K)`` that drove them."""

    grid: Grid
    times: np.ndarray
    states: np.ndarray
    dW: np.ndarray
    paths: list
    scheme: str
    dt: float

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.states.shape[-1] != self.grid.N:
            raise GridMismatch("states do not match the grid")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def __len__(self):
        return len(self.times)

    def norm_H(self) -> np.ndarray:
        return np.sqrt(self.grid.cell_volume * np.sum(self.states**2, axis=-1))

    def norm_V(self, m: int = 1) -> np.ndarray:
        return np.sqrt(_inner_V_values(self.grid, self.states, self.states, m))

    def norm_plus_H(self) -> np.ndarray:
        up = np.maximum(self.states, 0.0)
        return np.sqrt(self.grid.cell_volume * np.sum(up**2, axis=-1))

    def path(self, i: int) -> "Trajectory":
        return Trajectory(self.grid, self.times, self.states[:, i:i + 1], self.dW[:, i:i + 1],
                          [self.paths[i]], self.scheme, self.dt)


def _n_steps(T: float, dt: float) -> int:
    return max(1, math.ceil(T / dt - 1e-9))


def simulate(problem: SPDEProblem, T: float, driver: NoiseDriver, paths=0, *,
             scheme: str = "semi-implicit", workers: int = 1, rel_tol: float = 1e-10,
             check: bool = False) -> Trajectory:
    """Run ``ceil(T / dt)`` steps for each path, ``dt`` being the driver's step.

    ``paths`` is a single index or an iterable of indices.  With ``check``
    the coefficient assumptions must hold, otherwise
    :class:`AssumptionViolated` is raised.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    coeffs = problem.coeffs
    if driver.K != coeffs.K:
        raise ValueError(f"driver has K={driver.K} channels, coefficients K={coeffs.K}")
    if check:
        rep = problem.assumptions()
        if not rep.passed:
            raise AssumptionViolated(f"assumptions fail: {rep}")
    paths = [int(paths)] if np.ndim(paths) == 0 else [int(p) for p in paths]
    dt = driver.dt
    M = _n_steps(T, dt)
    times = dt * np.arange(M + 1)

    def run(chunk):
        dW = driver.increments(chunk, M)  # (P, M, K)
        u = np.broadcast_to(problem.u0, (len(chunk), problem.grid.N)).copy()
        out = np.empty((M + 1, len(chunk), problem.grid.N))
        out[0] = u
        for n in range(M):
            u = step(u, coeffs, dt, dW[:, n], times[n], scheme=scheme, rel_tol=rel_tol)
            out[n + 1] = u
        return out, np.swapaxes(dW, 0, 1)

    parts = map_paths(run, paths, workers=workers)
    states = np.concatenate([p[0] for p in parts], axis=1)
    dW = np.concatenate([p[1] for p in parts], axis=1)
    return Trajectory(problem.grid, times, states, dW, paths, scheme, dt)


def weak_consistency_check(traj: Trajectory, coeffs: SPDECoefficients, phis, *, via_riesz: bool = False) -> dict:
    """Defect of the weak form along a stored trajectory.

    For each test function ``phi`` the series
    ``(phi, u_n) - (phi, u_0) - sum dt * (phi, v*)_V - sum_k (phi, G_k) dW^k``
    is formed with left-point integrands; the report holds its maximum
    absolute value over steps and paths per ``phi``.  The drift pairing is
    the weak functional itself, which equals ``(phi, v*)_V`` by construction;
    ``via_riesz`` recomputes it through :func:`riesz_vstar` instead.
    """
    g = traj.grid
    phis = np.atleast_2d(np.asarray([as_values(p, g) for p in phis] if isinstance(phis, list) else phis))
    U = traj.states[:-1]  # (M, P, N)
    vol = g.cell_volume
    if via_riesz:
        solver = ResolventSolver(GramOperator(g, 1), 0.0)
        V = np.stack([riesz_vstar(U[n], coeffs, traj.times[n], solver) for n in range(len(U))])
        drift = _inner_V_values(g, V[..., None, :], phis, 1)
    else:
        drift = np.stack([
            weak_rhs_functional(U[n][:, None, :], coeffs, phis, traj.times[n]) for n in range(len(U))
        ])  # (M, P, S)
    if coeffs.K:
        G = diffusion_fields(U, coeffs)  # (M, P, K, N)
        pair = vol * np.einsum("mpkn,sn->mpsk", G, phis)
        stoch = np.einsum("mpsk,mpk->mps", pair, traj.dW)
    else:
        stoch = np.zeros_like(drift)
    proj = vol * np.einsum("mpn,sn->mps", traj.states, phis)
    inc = proj[1:] - proj[:-1] - traj.dt * drift - stoch
    resid = np.concatenate([np.zeros((1,) + inc.shape[1:]), np.cumsum(inc, axis=0)])
    per_phi = np.max(np.abs(resid), axis=(0, 1))
    return {"residual": resid, "max_abs": per_phi, "max": float(per_phi.max(initial=0.0))}
