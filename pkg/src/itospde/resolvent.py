"""Resolvent ``R_lam`` of the Sobolev Gram operator and the lifts ``S_n = n R_n``.

On a grid, ``R_lam f`` is the unique ``v`` with

    (f, u)_H = lam (v, u)_H + (v, u)_V   for every grid function u,

i.e. ``(lam I + A) v = f`` where ``A = sum_{|alpha|<=m} (D^alpha)^T D^alpha``
is the Gram operator of the V-inner product taken through the H-inner
product.  ``A`` contains the identity (the ``alpha = 0`` term), so the solve is
SPD for every ``lam >= 0``, including ``lam = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .grid_spaces import (
    Grid,
    GridFunction,
    _bdiff,
    _check_order,
    _dalpha,
    _inner_V_values,
    as_values,
    multi_indices,
)
from .linalg import pcg

__all__ = [
    "GramOperator",
    "ResolventSolver",
    "Resolvent",
    "CheckRow",
    "assemble_gram",
    "apply_resolvent",
    "apply_lift",
    "verify_resolvent_properties",
    "verify_theorem_1_1",
]


class GramOperator:
    """Matrix-free ``A`` with ``(A u, v)_H = (u, v)_V``."""

    def __init__(self, grid: Grid, m: int):
        self.grid = grid
        self.m = _check_order(m)
        self.alphas = [a for a in multi_indices(grid.dim, self.m) if sum(a) > 0]
        # D^alpha e_x has the same squared norm at every node (translation
        # invariance of the zero-extended lattice): prod_i C(2a_i, a_i) / h^(2|a|).
        self._diag = 1.0 + sum(
            math.prod(comb(2 * k, k) for k in a) / grid.h ** (2 * sum(a))
            for a in self.alphas
        )

    @property
    def diagonal(self) -> float:
        return self._diag

    def apply(self, u):
        """``A u`` for a grid function or an array of shape ``(..., N)``."""
        wrap = isinstance(u, GridFunction)
        vals = as_values(u, self.grid)
        grid, m = self.grid, self.m
        ua = grid.embed(vals, m)
        acc = np.zeros_like(ua)
        for alpha in self.alphas:
            w = _dalpha(ua, alpha, grid.h, grid.dim)
            for axis, k in enumerate(alpha):
                for _ in range(k):
                    w = -_bdiff(w, axis, grid.h, grid.dim)
            acc += w
        out = vals + grid.restrict(acc, m)
        return GridFunction(grid, out) if wrap else out

    __call__ = apply

    def to_dense(self) -> np.ndarray:
        """Dense matrix by probing with unit vectors (small grids only)."""
        return self.apply(np.eye(self.grid.N))


def assemble_gram(grid: Grid, m: int) -> GramOperator:
    return GramOperator(grid, m)


@dataclass
class ResolventSolver:
    """CG solver for ``(lam I + A) v = f`` at one fixed ``lam``."""

    gram: GramOperator
    lam: float
    rel_tol: float = 1e-10
    maxiter: int | None = None
    last_info: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.rel_tol <= 1e-6:
            raise ValueError(f"rel_tol must lie in (0, 1e-6], got {self.rel_tol}")

    @property
    def grid(self) -> Grid:
        return self.gram.grid

    def operator(self, v):
        return self.lam * v + self.gram.apply(v)

    def solve(self, f):
        wrap = isinstance(f, GridFunction)
        vals = as_values(f, self.grid)
        x, info = pcg(
            self.operator,
            vals,
            diag=self.lam + self.gram.diagonal,
            rel_tol=self.rel_tol,
            maxiter=self.maxiter,
        )
        self.last_info = info
        return GridFunction(self.grid, x) if wrap else x

    __call__ = solve


class Resolvent:
    """Family ``lam -> R_lam`` on one Gram operator, with per-``lam`` caching."""

    def __init__(self, gram: GramOperator, rel_tol: float = 1e-10, maxiter: int | None = None):
        self.gram = gram
        self.rel_tol = rel_tol
        self.maxiter = maxiter
        self._solvers: dict[float, ResolventSolver] = {}

    def solver(self, lam: float) -> ResolventSolver:
        lam = float(lam)
        if lam not in self._solvers:
            self._solvers[lam] = ResolventSolver(self.gram, lam, self.rel_tol, self.maxiter)
        return self._solvers[lam]

    def R(self, lam: float, f):
        return self.solver(lam).solve(f)

    def S(self, n: float, f):
        return apply_lift(n, self.solver(n), f)


def apply_resolvent(rs: ResolventSolver, f):
    return rs.solve(f)


def apply_lift(n: float, rs: ResolventSolver, f):
    """``S_n f = n R_n f``; ``rs`` must be the solver at ``lam = n``."""
    if not n > 0:
        raise ValueError(f"lift index must be positive, got {n}")
    if rs.lam != n:
        raise ValueError(f"solver is set up for lambda={rs.lam}, not n={n}")
    return n * rs.solve(f)


@dataclass(frozen=True)
class CheckRow:
    check: str
    lam: float
    measured: float
    bound: float
    passed: bool

    def as_csv_row(self):
        return [self.check, repr(float(self.lam)), repr(float(self.measured)),
                repr(float(self.bound)), "pass" if self.passed else "FAIL"]


def _power_norm(rs: ResolventSolver, n_iter: int, rng: np.random.Generator) -> float:
    """Largest eigenvalue of the SPD operator ``lam R_lam`` by power iteration."""
    if rs.lam == 0:
        return 0.0
    x = rng.standard_normal(rs.grid.N)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(n_iter):
        y = rs.lam * rs.solve(x)
        est = float(x @ y)
        x = y / np.linalg.norm(y)
    return est


def verify_resolvent_properties(grid: Grid, m: int, lams, f_samples, *, rel_tol=1e-10,
                       identity_tol=1e-8, power_iters=60, seed=0) -> list[CheckRow]:
    """Check the contraction, symmetry, energy and convergence properties of ``R_lam``.

    ``f_samples`` is an array ``(S, N)`` (or a list of grid functions).  One
    row per (check, lam) reports the worst case over the samples.
    """
    m = _check_order(m)
    F = np.atleast_2d(np.asarray(
        [as_values(f, grid) for f in f_samples] if isinstance(f_samples, list) else f_samples,
        dtype=float,
    ))
    if F.shape[0] == 0:
        raise ValueError("need at least one sample")
    # second sample set for the symmetry checks
    G = np.roll(F, 1, axis=0)
    if F.shape[0] == 1:
        G = F[:, ::-1].copy()
    gram = GramOperator(grid, m)
    res = Resolvent(gram, rel_tol=rel_tol)
    rng = np.random.default_rng(seed)
    vol = grid.cell_volume

    def ip(a, b):
        return vol * np.sum(a * b, axis=-1)

    def vp(a, b):
        return _inner_V_values(grid, a, b, m)

    nF_H = np.sqrt(ip(F, F))
    nF_V = np.sqrt(vp(F, F))
    rows: list[CheckRow] = []
    prev_defect_V = None
    for lam in sorted(float(x) for x in lams):
        RF = res.R(lam, F)
        RG = res.R(lam, G)
        lRF = lam * RF
        n_RF_H = np.sqrt(ip(RF, RF))
        n_RF_V = np.sqrt(vp(RF, RF))

        ratio = np.sqrt(ip(lRF, lRF)) / nF_H
        rows.append(CheckRow("contraction_H", lam, ratio.max(), 1.0 + 1e-10,
                             bool(ratio.max() <= 1.0 + 1e-10)))
        ratio = np.sqrt(vp(lRF, lRF)) / nF_V
        rows.append(CheckRow("contraction_V", lam, ratio.max(), 1.0 + 1e-10,
                             bool(ratio.max() <= 1.0 + 1e-10)))

        sym = np.abs(ip(RF, G) - ip(F, RG)) / (n_RF_H * np.sqrt(ip(G, G)) + np.sqrt(ip(RG, RG)) * nF_H)
        rows.append(CheckRow("symmetry_H", lam, sym.max(), identity_tol, bool(sym.max() <= identity_tol)))
        sym = np.abs(vp(RF, G) - vp(F, RG)) / (n_RF_V * np.sqrt(vp(G, G)) + np.sqrt(vp(RG, RG)) * nF_V)
        rows.append(CheckRow("symmetry_V", lam, sym.max(), identity_tol, bool(sym.max() <= identity_tol)))

        energy = lam * n_RF_H / nF_H
        rows.append(CheckRow("energy_lamR_H", lam, energy.max(), 1.0 + 1e-10,
                             bool(energy.max() <= 1.0 + 1e-10)))
        energy = n_RF_V / nF_H
        rows.append(CheckRow("energy_R_V", lam, energy.max(), 1.0 + 1e-10,
                             bool(energy.max() <= 1.0 + 1e-10)))

        rhs = ip(F, RF)
        resid = np.abs(lam * n_RF_H**2 + n_RF_V**2 - rhs) / np.abs(rhs)
        rows.append(CheckRow("identity_energy_equality", lam, resid.max(), identity_tol,
                             bool(resid.max() <= identity_tol)))

        defect = F - lRF
        lhs = vp(RF, F)
        resid = np.abs(lhs - ip(defect, defect) - lam * n_RF_V**2) / np.abs(lhs)
        rows.append(CheckRow("identity_V_pairing", lam, resid.max(), identity_tol,
                             bool(resid.max() <= identity_tol)))

        if lam > 0:
            rate = np.sqrt(ip(defect, defect)) / (nF_V / math.sqrt(lam))
            rows.append(CheckRow("rate_H", lam, rate.max(), 1.0, bool(rate.max() <= 1.0)))

        defect_V = np.sqrt(vp(defect, defect)) / nF_V
        if prev_defect_V is not None:
            step = np.max(defect_V - prev_defect_V)
            rows.append(CheckRow("convergence_V_monotone", lam, step, identity_tol,
                                 bool(step <= identity_tol)))
        prev_defect_V = defect_V

        norm = _power_norm(res.solver(lam), power_iters, rng)
        rows.append(CheckRow("fixed_point_opnorm", lam, norm, 1.0, bool(norm < 1.0)))
    return rows


# name used by the operation contract
verify_theorem_1_1 = verify_resolvent_properties
