"""Seeded Wiener increments and Ito-integral bookkeeping for H-valued integrands.

Every Monte Carlo path owns an independent random stream derived from
``(master_seed, path, level)`` through :class:`numpy.random.SeedSequence`, so
results never depend on the order or grouping in which paths are run.
Refinement level ``l`` halves the time step of level ``l - 1`` by Brownian
bridge midpoint sampling: the refined path reproduces the coarse increments
exactly when consecutive pairs are summed (common random numbers).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grid_spaces import Grid, GridFunction, as_values

__all__ = [
    "NoiseDriver",
    "ItoAccumulator",
    "MomentReport",
    "sample_increments",
    "accumulate_ito",
    "martingale_moment_check",
    "fmean",
    "fstderr",
    "map_paths",
]

RNG_ID = "numpy-PCG64/SeedSequence(seed,spawn_key=(path,level))/bridge"


@dataclass(frozen=True)
class NoiseDriver:
    """``K`` independent Wiener channels sampled on a uniform time grid.

    ``dt`` is the step at ``level``; level 0 draws increments directly, each
    further level splits every step of the previous one in two.
    """

    K: int
    master_seed: int
    base_dt: float
    level: int = 0
    rng_id: str = RNG_ID

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")
        if not self.base_dt > 0:
            raise ValueError(f"dt must be positive, got {self.base_dt}")
        if self.level < 0:
            raise ValueError("level must be >= 0")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")

    @property
    def dt(self) -> float:
        return self.base_dt / 2**self.level

    def refined(self, levels: int = 1) -> "NoiseDriver":
        return NoiseDriver(self.K, self.master_seed, self.base_dt, self.level + levels, self.rng_id)

    def coarsened(self) -> "NoiseDriver":
        if self.level == 0:
            raise ValueError("level-0 driver has no coarser parent")
        return NoiseDriver(self.K, self.master_seed, self.base_dt, self.level - 1, self.rng_id)

    def generator(self, path: int, level: int | None = None) -> np.random.Generator:
        level = self.level if level is None else level
        ss = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(path), int(level)))
        return np.random.Generator(np.random.PCG64(ss))

    def path_increments(self, path: int, n_steps: int) -> np.ndarray:
        """Increments ``(n_steps, K)`` of one path at this driver's level."""
        if self.level == 0:
            z = self.generator(path).standard_normal((n_steps, self.K))
            return math.sqrt(self.dt) * z
        n_coarse = -(-n_steps // 2)
        coarse = self.coarsened().path_increments(path, n_coarse)
        z = self.generator(path).standard_normal((n_coarse, self.K))
        first = 0.5 * coarse + math.sqrt(self.dt / 2.0) * z
        fine = np.empty((2 * n_coarse, self.K))
        fine[0::2] = first
        fine[1::2] = coarse - first
        return fine[:n_steps]

    def increments(self, paths, n_steps: int) -> np.ndarray:
        """Increments ``(P, n_steps, K)`` for a sequence of path indices."""
        paths = list(paths)
        out = np.empty((len(paths), n_steps, self.K))
        for i, p in enumerate(paths):
            out[i] = self.path_increments(p, n_steps)
        return out


def sample_increments(driver: NoiseDriver, path: int, step: int) -> np.ndarray:
    """The ``K`` increments of ``path`` over step ``step``."""
    if step < 0 or path < 0:
        raise ValueError("path and step must be non-negative")
    return driver.path_increments(path, step + 1)[step]


@dataclass(frozen=True)
class ItoAccumulator:
    """Running value of ``sum_k int (h, sigma^k)_H dw^k`` and its bracket.

    Fields may be arrays when a batch of paths is tracked together.
    """

    integral: np.ndarray | float = 0.0
    qv: np.ndarray | float = 0.0
    steps: int = 0


def _pairings(h: np.ndarray, sigma: np.ndarray, vol: float) -> np.ndarray:
    # (h, sigma^k)_H for each channel; h (..., N), sigma (..., K, N) -> (..., K)
    return vol * np.sum(h[..., None, :] * sigma, axis=-1)


def accumulate_ito(acc: ItoAccumulator, h, sigma, dW, dt: float, grid: Grid | None = None) -> ItoAccumulator:
    """Advance the accumulator by one step with left-point integrand ``h``.

    ``sigma`` holds the K channel fields ``(..., K, N)`` (a list of grid
    functions is accepted), ``dW`` the increments ``(..., K)``.
    """
    if isinstance(h, GridFunction):
        grid = h.grid
    if grid is None:
        raise ValueError("grid is required when h is a plain array")
    hv = as_values(h, grid)
    if isinstance(sigma, (list, tuple)):
        sigma = np.stack([as_values(s, grid) for s in sigma]) if len(sigma) else np.zeros((0, grid.N))
    sv = as_values(sigma, grid)
    c = _pairings(hv, sv, grid.cell_volume)
    dW = np.asarray(dW, dtype=float)
    return ItoAccumulator(
        integral=acc.integral + np.sum(c * dW, axis=-1),
        qv=acc.qv + dt * np.sum(c * c, axis=-1),
        steps=acc.steps + 1,
    )


def fmean(x) -> float:
    """Mean with compensated summation (order-independent to rounding)."""
    x = np.ravel(np.asarray(x, dtype=float))
    return math.fsum(x) / len(x)


def fstderr(x) -> float:
    x = np.ravel(np.asarray(x, dtype=float))
    n = len(x)
    if n < 2:
        return float("inf")
    mu = math.fsum(x) / n
    var = math.fsum((x - mu) ** 2) / (n - 1)
    return math.sqrt(var / n)


@dataclass(frozen=True)
class MomentReport:
    n_paths: int
    mean: float
    mean_stderr: float
    gap: float  # mean(M^2 - <M>)
    gap_stderr: float
    passed_mean: bool
    passed_gap: bool

    @property
    def passed(self) -> bool:
        return self.passed_mean and self.passed_gap


def martingale_moment_check(terminal, qv, n_sigma: float = 3.0) -> MomentReport:
    """Test ``E M_T = 0`` and ``E M_T^2 = E <M>_T`` at ``n_sigma`` standard errors.

    ``terminal`` and ``qv`` are per-path values of ``M_T`` and ``<M>_T``.
    """
    terminal = np.ravel(np.asarray(terminal, dtype=float))
    qv = np.ravel(np.asarray(qv, dtype=float))
    if len(terminal) < 100:
        raise ValueError(f"moment check needs at least 100 paths, got {len(terminal)}")
    if terminal.shape != qv.shape:
        raise ValueError("terminal and qv must have one entry per path")
    mean, se = fmean(terminal), fstderr(terminal)
    d = terminal**2 - qv
    gap, gse = fmean(d), fstderr(d)
    return MomentReport(
        n_paths=len(terminal),
        mean=mean,
        mean_stderr=se,
        gap=gap,
        gap_stderr=gse,
        passed_mean=bool(abs(mean) <= n_sigma * se),
        passed_gap=bool(abs(gap) <= n_sigma * gse),
    )


def map_paths(fn, paths, workers: int = 1, chunk: int = 64):
    """Apply ``fn`` to contiguous chunks of ``paths``; return the per-chunk results in order.

    ``fn`` receives a list of path indices.  Chunking is fixed by ``chunk``
    (not by the worker count), so output is identical for every ``workers``
    value.
    """
    paths = list(paths)
    chunks = [paths[i:i + chunk] for i in range(0, len(paths), chunk)]
    if workers <= 1 or len(chunks) <= 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, chunks))
    return parts
