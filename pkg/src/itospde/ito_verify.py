"""Pathwise ledgers for Ito-type identities along simulated trajectories.

Every ledger evaluates its integrands at the left end of each step (the Ito
convention), records each term per step and path, and exposes the
cumulative residual ``LHS - RHS`` with value zero at the initial time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_simpson

from .errors import AssumptionViolated
from .grid_spaces import Grid, GridFunction, _fdiff, as_values, build_grid
from .resolvent import GramOperator, Resolvent
from .spde import (
    SPDEProblem,
    Trajectory,
    diffusion_fields,
    simulate,
    weak_rhs_functional,
)
from .stochastic import NoiseDriver, fmean, fstderr

__all__ = [
    "FunctionalR",
    "ItoLedger",
    "square",
    "positive_square",
    "bounded_square",
    "mollified_positive_square",
    "phi_value",
    "phi_grad",
    "phi_hess_dir",
    "energy_identity_ledger",
    "general_ito_ledger",
    "ledger_refinement",
    "refinement_passes",
    "lifting_convergence",
    "max_principle_experiment",
    "power_check",
    "gronwall_check",
    "positive_part_chain_rule_check",
    "grad_v_ratio",
]


@dataclass(frozen=True)
class FunctionalR:
    """Integrand ``r`` of ``phi(h) = int r(h(x)) dx`` with its first two derivatives.

    ``N`` bounds ``|r(x)| <= N x^2``, ``|r'(x)| <= N |x|`` and ``|r''| <= N``.
    For non-smooth members ``d2r`` is the left-continuous version.
    """

    name: str
    r: Callable
    dr: Callable
    d2r: Callable
    N: float
    smooth: bool = True

    def __post_init__(self):
        zero = np.zeros(1)
        if abs(float(self.r(zero)[0])) > 0 or abs(float(self.dr(zero)[0])) > 0:
            raise ValueError(f"{self.name}: need r(0) = r'(0) = 0")
        x = np.linspace(-10 * self.N, 10 * self.N, 4001)
        slack = 1 + 1e-12
        if np.any(np.abs(self.r(x)) > slack * self.N * x**2 + 1e-300):
            raise ValueError(f"{self.name}: |r(x)| <= N x^2 fails")
        if np.any(np.abs(self.dr(x)) > slack * self.N * np.abs(x) + 1e-300):
            raise ValueError(f"{self.name}: |r'(x)| <= N |x| fails")
        if np.any(np.abs(self.d2r(x)) > slack * self.N):
            raise ValueError(f"{self.name}: |r''| <= N fails")


def square() -> FunctionalR:
    return FunctionalR("square", lambda x: x * x, lambda x: 2.0 * x,
                       lambda x: np.full(np.shape(x), 2.0), N=2.0)


def positive_square() -> FunctionalR:
    """``(x^+)^2``; its second derivative ``2 I_{x>0}`` vanishes at 0 (left continuity)."""
    return FunctionalR(
        "positive_square",
        lambda x: np.maximum(x, 0.0) ** 2,
        lambda x: 2.0 * np.maximum(x, 0.0),
        lambda x: 2.0 * (np.asarray(x) > 0),
        N=2.0,
        smooth=False,
    )


def bounded_square() -> FunctionalR:
    """``x^2 / (1 + x^2)``: smooth, bounded, not quadratic."""
    return FunctionalR(
        "bounded_square",
        lambda x: x * x / (1 + x * x),
        lambda x: 2 * x / (1 + x * x) ** 2,
        lambda x: (2 - 6 * x * x) / (1 + x * x) ** 3,
        N=2.0,
    )


def _smooth_step(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = (t > 0) & (t < 1)
    ti = t[inside]
    a, b = np.exp(-1.0 / ti), np.exp(-1.0 / (1.0 - ti))
    out[inside] = a / (a + b)
    out[t >= 1] = 1.0
    return out


_TT = np.linspace(0.0, 1.0, 20001)
_PSI1 = cumulative_simpson(_smooth_step(_TT), x=_TT, initial=0.0)
_PSI2 = cumulative_simpson(_PSI1, x=_TT, initial=0.0)


def _psi1(t):
    t = np.asarray(t, dtype=float)
    return np.where(t <= 0, 0.0, np.where(t >= 1, t - 1.0 + _PSI1[-1], np.interp(t, _TT, _PSI1)))


def _psi2(t):
    t = np.asarray(t, dtype=float)
    tail = _PSI2[-1] + _PSI1[-1] * (t - 1.0) + 0.5 * (t - 1.0) ** 2
    return np.where(t <= 0, 0.0, np.where(t >= 1, tail, np.interp(t, _TT, _PSI2)))


def mollified_positive_square(eps: float) -> FunctionalR:
    """C-infinity approximation of ``(x^+)^2`` with ``r'' = 2 * step(x / eps)``.

    The step rises smoothly from 0 on ``(-inf, 0]`` to 1 on ``[eps, inf)``,
    so ``r''(0) = 0`` and the bounds hold with ``N = 2`` for every ``eps``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    return FunctionalR(
        f"mollified_positive_square(eps={eps:g})",
        lambda x: 2.0 * eps * eps * _psi2(np.asarray(x) / eps),
        lambda x: 2.0 * eps * _psi1(np.asarray(x) / eps),
        lambda x: 2.0 * _smooth_step(np.asarray(x) / eps),
        N=2.0,
    )


# -- functionals on grid functions ------------------------------------------------

def _grid_and_values(u, grid):
    if isinstance(u, GridFunction):
        return u.grid, u.values
    if grid is None:
        raise ValueError("grid is required for array input")
    return grid, as_values(u, grid)


def phi_value(r: FunctionalR, u, grid: Grid | None = None):
    """``h^d sum r(u(x))``."""
    grid, v = _grid_and_values(u, grid)
    out = grid.cell_volume * np.sum(r.r(v), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def phi_grad(r: FunctionalR, u, grid: Grid | None = None):
    """H-gradient of ``phi``: the nodal map ``x -> r'(u(x))``."""
    if isinstance(u, GridFunction):
        return GridFunction(u.grid, r.dr(u.values))
    return r.dr(as_values(u, grid))


def phi_hess_dir(r: FunctionalR, u, xi, grid: Grid | None = None):
    """Second directional derivative ``h^d sum r''(u) xi^2``."""
    grid, v = _grid_and_values(u, grid)
    x = as_values(xi, grid)
    out = grid.cell_volume * np.sum(r.d2r(v) * x * x, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def grad_v_ratio(r: FunctionalR, u, m: int = 1, grid: Grid | None = None) -> float:
    """``||r'(u)||_V / (N ||u||_V)``: the measured grid constant in the V-bound on ``phi_grad``."""
    from .grid_spaces import _inner_V_values

    grid, v = _grid_and_values(u, grid)
    g = r.dr(v)
    num = np.sqrt(_inner_V_values(grid, g, g, m))
    den = r.N * np.sqrt(_inner_V_values(grid, v, v, m))
    return float(np.max(np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)))


# -- ledgers ----------------------------------------------------------------------

@dataclass
class ItoLedger:
    """Per-step terms ``(M, P)`` of an Ito identity and its cumulative residual.

    ``lhs`` is the increment of the left-hand side; ``drift`` the V-pairing
    term times dt; ``correction`` the second-order (bracket) term times dt;
    ``stochastic`` the Ito-integral increment.
    """

    name: str
    times: np.ndarray
    lhs: np.ndarray
    drift: np.ndarray
    correction: np.ndarray
    stochastic: np.ndarray
    qv_bound_ok: bool = True
    qv_sum: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return self.lhs.shape[0]

    @property
    def step_residual(self) -> np.ndarray:
        return self.lhs - (self.drift + self.correction + self.stochastic)

    @property
    def residual(self) -> np.ndarray:
        """Cumulative residual ``(M + 1, P)``, zero at the initial time."""
        r = np.cumsum(self.step_residual, axis=0)
        return np.concatenate([np.zeros((1,) + r.shape[1:]), r])

    def terminal_abs(self) -> np.ndarray:
        return np.abs(self.residual[-1])


def _drift_pairing(U, coeffs, phi, times):
    if callable(coeffs.f):
        return np.stack([weak_rhs_functional(U[n], coeffs, phi[n], times[n]) for n in range(len(U))])
    return weak_rhs_functional(U, coeffs, phi, 0.0)


def general_ito_ledger(traj: Trajectory, coeffs, r: FunctionalR, driver: NoiseDriver | None = None,
                       name: str | None = None) -> ItoLedger:
    """Ledger for ``phi(u) = int r(u)``: increment of ``phi`` against
    ``(r'(u), v*)_V dt + 1/2 sum_k phi''[G_k] dt + sum_k (r'(u), G_k) dW^k``."""
    g = traj.grid
    if driver is not None and abs(driver.dt - traj.dt) > 1e-15 * traj.dt:
        raise ValueError("driver step does not match the trajectory")
    vol, dt = g.cell_volume, traj.dt
    U, U1 = traj.states[:-1], traj.states[1:]
    grad = r.dr(U)
    lhs = vol * np.sum(r.r(U1), axis=-1) - vol * np.sum(r.r(U), axis=-1)
    drift = _drift_pairing(U, coeffs, grad, traj.times) * dt
    if coeffs.K:
        G = diffusion_fields(U, coeffs)  # (M, P, K, N)
        corr = 0.5 * (vol * np.sum(r.d2r(U)[..., None, :] * G * G, axis=-1)).sum(axis=-1) * dt
        pair = vol * np.sum(grad[..., None, :] * G, axis=-1)  # (M, P, K)
        stoch = np.sum(pair * traj.dW, axis=-1)
        # quadratic variation of the stochastic term against its Cauchy-Schwarz bounds
        qv = np.sum(pair**2, axis=-1) * dt
        gnorm2 = vol * np.sum(grad * grad, axis=-1)
        Gnorm2 = (vol * np.sum(G * G, axis=-1)).sum(axis=-1)
        tol = 1e-12
        cs = np.sum(qv, axis=0) <= (1 + tol) * np.sum(gnorm2 * Gnorm2 * dt, axis=0) + tol
        unorm2 = vol * np.sum(traj.states * traj.states, axis=-1).max(axis=0)
        big = np.sum(qv, axis=0) <= (1 + tol) * r.N**2 * unorm2 * np.sum(Gnorm2 * dt, axis=0) + tol
        qv_ok = bool(np.all(cs) and np.all(big))
        qv_sum = np.sum(qv, axis=0)
    else:
        corr = np.zeros_like(lhs)
        stoch = np.zeros_like(lhs)
        qv_ok, qv_sum = True, np.zeros(lhs.shape[1:])
    return ItoLedger(name or f"ito[{r.name}]", traj.times, lhs, drift, corr, stoch, qv_ok, qv_sum)


def energy_identity_ledger(traj: Trajectory, coeffs, driver: NoiseDriver | None = None) -> ItoLedger:
    """Ledger for ``||u||_H^2``: ``2 (u, v*)_V dt + sum_k ||G_k||^2 dt + 2 sum_k (u, G_k) dW^k``."""
    g = traj.grid
    if driver is not None and abs(driver.dt - traj.dt) > 1e-15 * traj.dt:
        raise ValueError("driver step does not match the trajectory")
    vol, dt = g.cell_volume, traj.dt
    U, U1 = traj.states[:-1], traj.states[1:]
    lhs = vol * np.sum(U1 * U1, axis=-1) - vol * np.sum(U * U, axis=-1)
    drift = 2.0 * _drift_pairing(U, coeffs, U, traj.times) * dt
    if coeffs.K:
        G = diffusion_fields(U, coeffs)
        corr = (vol * np.sum(G * G, axis=-1)).sum(axis=-1) * dt
        pair = vol * np.sum(U[..., None, :] * G, axis=-1)
        stoch = 2.0 * np.sum(pair * traj.dW, axis=-1)
    else:
        corr = np.zeros_like(lhs)
        stoch = np.zeros_like(lhs)
    return ItoLedger("energy", traj.times, lhs, drift, corr, stoch)


@dataclass(frozen=True)
class RefinementRow:
    dt: float
    h: float
    n_paths: int
    mean_abs_residual: float
    stderr: float
    max_u_plus: float = float("nan")
    passed: bool = True


def ledger_refinement(problem: SPDEProblem, T: float, driver: NoiseDriver, levels: int = 3,
                      paths=range(1000), r: FunctionalR | None = None, *, workers: int = 1,
                      scheme: str = "semi-implicit") -> list[RefinementRow]:
    """Mean ``|residual(T)|`` of a ledger across dt-halving with common random numbers.

    ``r = None`` selects the squared-norm ledger.  Level ``l`` uses
    ``driver.refined(l)``; the Brownian path is shared across levels.
    """
    rows = []
    paths = list(paths)
    for lvl in range(levels):
        drv = driver.refined(lvl)
        traj = simulate(problem, T, drv, paths, scheme=scheme, workers=workers)
        led = (energy_identity_ledger(traj, problem.coeffs) if r is None
               else general_ito_ledger(traj, problem.coeffs, r))
        res = led.terminal_abs()
        rows.append(RefinementRow(drv.dt, problem.grid.h, len(paths), fmean(res), fstderr(res),
                                  float(traj.states.max())))
    return rows


def refinement_passes(rows, final_fraction: float = 0.1) -> bool:
    """Strictly decreasing means and a final value at most ``final_fraction`` of the first."""
    means = [row.mean_abs_residual for row in rows]
    monotone = all(b < a for a, b in zip(means, means[1:]))
    return bool(monotone and means[-1] <= final_fraction * means[0])


@dataclass(frozen=True)
class LiftRow:
    n: float
    sup_error: float
    bound: float
    passed: bool


def lifting_convergence(traj: Trajectory, n_list, m: int = 1, *, rel_tol: float = 1e-10,
                        spectral_bound: bool = True) -> list[LiftRow]:
    """``sup_t ||S_n u_t - u_t||_H`` for each ``n`` (max over paths).

    With ``spectral_bound`` each row also carries
    ``max_i mu_i / (n + mu_i) * sup_t ||u_t||_V`` from the dense Gram spectrum
    (small grids only); otherwise the bound column is ``inf``.
    """
    g = traj.grid
    gram = GramOperator(g, m)
    res = Resolvent(gram, rel_tol=rel_tol)
    U = traj.states.reshape(-1, g.N)
    vol = g.cell_volume
    sup_V = float(np.max(traj.norm_V(m)))
    mu = np.linalg.eigvalsh(gram.to_dense()) if spectral_bound else None
    rows = []
    prev = math.inf
    for n in sorted(float(x) for x in n_list):
        S = res.S(n, U)
        err = float(np.max(np.sqrt(vol * np.sum((S - U) ** 2, axis=-1))))
        bound = float(np.max(mu / (n + mu))) * sup_V if mu is not None else math.inf
        ok = err <= bound and (err < prev or err == 0.0)
        rows.append(LiftRow(n, err, bound, bool(ok)))
        prev = err
    return rows


# -- maximum principle ------------------------------------------------------------

@dataclass(frozen=True)
class MaxPrincipleRow:
    dt: float
    h: float
    n_paths: int
    max_u: float
    mean_plus2: float  # E ||u_T^+||_H^2
    stderr: float
    relative: float  # mean_plus2 / ||u_0||_H^2


@dataclass
class MaxPrincipleReport:
    rows: list
    gronwall: "GronwallReport | None"
    u0_norm2: float
    rel_threshold: float
    passed_threshold: bool
    passed_monotone: bool

    @property
    def passed(self) -> bool:
        g_ok = self.gronwall is None or self.gronwall.passed
        return self.passed_threshold and self.passed_monotone and g_ok


def max_principle_experiment(problem: SPDEProblem, T: float, driver: NoiseDriver, n_paths: int = 500,
                             levels: int = 3, *, rel_threshold: float = 1e-4, workers: int = 1,
                             override: bool = False, gronwall_C: float | None = None) -> MaxPrincipleReport:
    """Positive-part statistics of an ensemble with ``u_0 <= 0`` and ``f <= 0``.

    Runs the dt-ladder ``driver.refined(l)`` for ``l < levels`` with shared
    Brownian paths.  Passes when ``E ||u_T^+||^2 <= rel_threshold ||u_0||^2``
    at the finest step, the statistic decreases along the ladder, and the
    Gronwall-weighted sequence at the finest step is nonincreasing.
    """
    coeffs = problem.coeffs
    if not override:
        rep = problem.assumptions()
        if not rep.passed:
            raise AssumptionViolated(f"coefficient assumptions fail: {rep}")
        if np.any(problem.u0 > 0):
            raise AssumptionViolated("u0 must be <= 0")
        f0 = coeffs.interior(coeffs.f_at(0.0))
        if np.any(f0 > 0):
            raise AssumptionViolated("f must be <= 0")
    vol = problem.grid.cell_volume
    u0n2 = vol * float(problem.u0 @ problem.u0)
    rows, traj = [], None
    for lvl in range(levels):
        drv = driver.refined(lvl)
        traj = simulate(problem, T, drv, range(n_paths), workers=workers)
        plus2 = traj.norm_plus_H()[-1] ** 2
        mean = fmean(plus2)
        rows.append(MaxPrincipleRow(drv.dt, problem.grid.h, n_paths, float(traj.states.max()),
                                    mean, fstderr(plus2), mean / u0n2 if u0n2 > 0 else math.inf))
    gron = gronwall_check(traj, problem.K_bound, C=gronwall_C if gronwall_C is not None else 0.0)
    means = [r.mean_plus2 for r in rows]
    monotone = all(b < a or (a == 0 and b == 0) for a, b in zip(means, means[1:]))
    return MaxPrincipleReport(rows, gron, u0n2, rel_threshold,
                              bool(rows[-1].mean_plus2 <= rel_threshold * u0n2), bool(monotone))


def power_check(problem: SPDEProblem, T: float, driver: NoiseDriver, n_paths: int = 100,
                threshold: float = 0.1, *, workers: int = 1) -> dict:
    """Negative control: with a positive source the positive part must appear."""
    traj = simulate(problem, T, driver, range(n_paths), workers=workers)
    max_u = float(traj.states.max())
    return {"max_u": max_u, "threshold": threshold, "detected": bool(max_u > threshold)}


@dataclass
class GronwallReport:
    times: np.ndarray
    weighted: np.ndarray  # E[||u_n^+||^2 exp(-int K)]
    stderr: np.ndarray
    worst_excess: float  # max_n (increase - 3 se - C dt)
    passed: bool


def gronwall_check(traj: Trajectory, K_series=0.0, C: float = 0.0, n_sigma: float = 3.0) -> GronwallReport:
    """Check that ``E[||u_t^+||^2 exp(-int_0^t K)]`` does not increase.

    ``K_series`` is a scalar or the values of ``K`` at the stored times.
    Each increment may exceed zero by ``n_sigma`` standard errors of the
    per-path increment plus ``C * dt``.
    """
    t = traj.times
    K = np.broadcast_to(np.asarray(K_series, dtype=float), t.shape)
    intK = np.concatenate([[0.0], np.cumsum(K[:-1] * np.diff(t))])
    w = traj.norm_plus_H() ** 2 * np.exp(-intK)[:, None]  # (M+1, P)
    mean = np.array([fmean(row) for row in w])
    se = np.array([fstderr(row) for row in w])
    inc = np.diff(w, axis=0)
    inc_mean = np.array([fmean(row) for row in inc])
    inc_se = np.array([fstderr(row) for row in inc])
    excess = inc_mean - n_sigma * inc_se - C * traj.dt
    worst = float(excess.max(initial=-math.inf))
    return GronwallReport(t, mean, se, worst, bool(worst <= 0.0))


# -- positive part chain rule -------------------------------------------------------

@dataclass
class ChainRuleReport:
    hs: list
    mismatch: list
    rate: float
    passed: bool


def positive_part_chain_rule_check(u: Callable, hs=(1 / 16, 1 / 32, 1 / 64), bounds=((0.0, 1.0),),
                                   min_rate: float = 0.4) -> ChainRuleReport:
    """H-norm of ``D_i(u^+) - I_{u>0} D_i u`` on the grids ``hs``, with its log2 decay rate.

    ``u`` is a callable of coordinates ``(..., d)``.  The indicator is taken
    at the left node of each difference, and only differences between two
    interior nodes are measured: the zero extension puts a jump on every
    boundary edge where a sample does not vanish, which is not a chain-rule
    effect.  The rate is the least-squares slope of ``log2(mismatch)``
    against ``log2(h)``; an identically zero mismatch counts as exact.
    """
    norms = []
    for h in hs:
        grid = build_grid(bounds, h)
        E = grid.embed(grid.sample(u).values, 1)
        inside = grid.embed(np.ones(grid.N), 1) > 0
        up = np.maximum(E, 0.0)
        total = 0.0
        for i in range(grid.dim):
            edge = inside & np.roll(inside, -1, axis=i)
            mis = _fdiff(up, i, h, grid.dim) - (E > 0) * _fdiff(E, i, h, grid.dim)
            total += float(np.sum((mis * edge) ** 2))
        norms.append(math.sqrt(grid.cell_volume * total))
    if all(n == 0.0 for n in norms):
        return ChainRuleReport(list(hs), norms, math.inf, True)
    if any(n == 0.0 for n in norms):
        return ChainRuleReport(list(hs), norms, float("nan"), False)
    slope = float(np.polyfit(np.log2(hs), np.log2(norms), 1)[0])
    return ChainRuleReport(list(hs), norms, slope, bool(slope >= min_rate))
