"""Grid realizations of L2(G) and the zero-trace Sobolev space of order m.

A :class:`Grid` is the set of lattice nodes ``lo + j*h`` of a box that lie
strictly inside the box and satisfy an optional indicator for ``G``.  Grid
functions carry values only on interior nodes; everywhere else on the
(infinite) lattice they are zero.  Forward differences of grid functions
therefore live on a slightly larger, "staggered" support, which is held by
:class:`LatticeFunction` as a zero-padded array over the box lattice.

All array-level routines act on the trailing axes, so a batch of functions
(one per Monte Carlo path, say) is processed in a single call.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyInterior, GridMismatch, OrderTooHigh

__all__ = [
    "Grid",
    "GridFunction",
    "LatticeFunction",
    "build_grid",
    "multi_indices",
    "forward_diff",
    "backward_diff",
    "diff_alpha",
    "inner_H",
    "inner_V",
    "norm_H",
    "norm_V",
]

_LATTICE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Grid:
    """Interior lattice nodes of a box, possibly cut down by an indicator.

    Attributes
    ----------
    dim : int
        Space dimension, 1 or 2.
    bounds : tuple of (lo, hi) pairs
        The box, one interval per axis.
    h : float
        Mesh width, the same on every axis.
    interior_mask : ndarray of bool
        Shape ``(n_0 + 1, ..., n_{d-1} + 1)``; true on nodes of ``G``.
        Nodes on the box boundary are never interior.
    """

    dim: int
    bounds: tuple
    h: float
    interior_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if not self.h > 0:
            raise ValueError(f"mesh width must be positive, got {self.h}")
        mask = np.asarray(self.interior_mask, dtype=bool)
        if mask.ndim != self.dim:
            raise ValueError("interior_mask rank does not match dim")
        border = np.ones(mask.shape, dtype=bool)
        border[(slice(1, -1),) * self.dim] = False
        if np.any(mask & border):
            raise ValueError("boundary lattice nodes cannot be interior")
        if not mask.any():
            raise EmptyInterior("no lattice node lies in G")
        mask.setflags(write=False)
        object.__setattr__(self, "interior_mask", mask)
        object.__setattr__(self, "_restrict_cache", {})

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.h == other.h
            and self.bounds == other.bounds
            and np.array_equal(self.interior_mask, other.interior_mask)
        )

    def __hash__(self):
        return hash((self.dim, self.h, self.bounds, self.interior_mask.tobytes()))

    @property
    def shape(self) -> tuple:
        """Shape of the box lattice, boundary nodes included."""
        return self.interior_mask.shape

    @cached_property
    def node_index(self) -> np.ndarray:
        """Lattice multi-index of each interior node, shape ``(N, dim)``."""
        return np.argwhere(self.interior_mask)

    @property
    def N(self) -> int:
        return len(self.node_index)

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    def padded_shape(self, pad: int) -> tuple:
        return tuple(n + 2 * pad for n in self.shape)

    def lattice_coords(self, pad: int = 0) -> np.ndarray:
        """Coordinates of every padded-lattice node, shape ``(*padded, dim)``."""
        axes = [
            lo + self.h * np.arange(-pad, n + pad)
            for (lo, _), n in zip(self.bounds, self.shape)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @cached_property
    def coords(self) -> np.ndarray:
        """Coordinates of interior nodes, shape ``(N, dim)``."""
        lo = np.array([b[0] for b in self.bounds])
        return lo + self.h * self.node_index

    def _flat(self, pad: int) -> np.ndarray:
        cache = self._restrict_cache
        if pad not in cache:
            idx = self.node_index + pad
            cache[pad] = np.ravel_multi_index(tuple(idx.T), self.padded_shape(pad))
        return cache[pad]

    def embed(self, values, pad: int = 0) -> np.ndarray:
        """Zero-extend nodal values ``(..., N)`` to the padded lattice."""
        values = np.asarray(values, dtype=float)
        batch = values.shape[:-1]
        shape = self.padded_shape(pad)
        out = np.zeros(batch + (int(np.prod(shape)),))
        out[..., self._flat(pad)] = values
        return out.reshape(batch + shape)

    def restrict(self, arr, pad: int = 0) -> np.ndarray:
        """Read interior-node values ``(..., N)`` off a padded-lattice array."""
        arr = np.asarray(arr)
        batch = arr.shape[: arr.ndim - self.dim]
        return arr.reshape(batch + (-1,))[..., self._flat(pad)]

    def zeros(self) -> "GridFunction":
        return GridFunction(self, np.zeros(self.N))

    def sample(self, fn: Callable[[np.ndarray], np.ndarray]) -> "GridFunction":
        """Evaluate ``fn`` on interior coordinates ``(N, dim)``."""
        return GridFunction(self, np.broadcast_to(fn(self.coords), (self.N,)).astype(float))


def build_grid(bounds, h: float, indicator: Callable | None = None) -> Grid:
    """Build a :class:`Grid` from a box, a mesh width and an optional indicator.

    Parameters
    ----------
    bounds : (lo, hi) or sequence of (lo, hi)
        One interval per axis; a bare pair means a 1-D box.
    h : float
        Mesh width; every box side must be an integer multiple of it.
    indicator : callable, optional
        Maps coordinates of shape ``(..., dim)`` to booleans; nodes where it is
        false are excluded from ``G``.  Defaults to the open box itself.

    Examples
    --------
    >>> build_grid((0.0, 1.0), 0.25).coords.ravel().tolist()
    [0.25, 0.5, 0.75]
    """
    if not h > 0:
        raise ValueError(f"mesh width must be positive, got {h}")
    if np.ndim(bounds) == 1:
        bounds = (tuple(bounds),)
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    dim = len(bounds)
    counts = []
    for lo, hi in bounds:
        n = (hi - lo) / h
        if hi <= lo or abs(n - round(n)) > _LATTICE_TOL * max(1.0, n):
            raise ValueError(f"side ({lo}, {hi}) is not a positive multiple of h={h}")
        counts.append(int(round(n)))
    mask = np.zeros(tuple(n + 1 for n in counts), dtype=bool)
    mask[(slice(1, -1),) * dim] = True
    if indicator is not None:
        axes = [lo + h * np.arange(n + 1) for (lo, _), n in zip(bounds, counts)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        mask &= np.asarray(indicator(pts), dtype=bool)
    if not mask.any():
        raise EmptyInterior(f"no lattice node of the box {bounds} lies in G at h={h}")
    return Grid(dim=dim, bounds=bounds, h=float(h), interior_mask=mask)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Nodal values on interior nodes, zero everywhere else.

    ``values`` has shape ``(..., N)``; leading axes index a batch.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 0 or values.shape[-1] != self.grid.N:
            raise ValueError(
                f"expected trailing length {self.grid.N}, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must be finite")
        object.__setattr__(self, "values", values)

    def _check(self, other):
        if isinstance(other, GridFunction):
            if other.grid != self.grid:
                raise GridMismatch("grid functions live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.grid, self.values + self._check(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - self._check(other))

    def __rsub__(self, other):
        return GridFunction(self.grid, self._check(other) - self.values)

    def __mul__(self, other):
        return GridFunction(self.grid, self.values * self._check(other))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return GridFunction(self.grid, self.values / scalar)

    def __neg__(self):
        return GridFunction(self.grid, -self.values)

    def at(self, lattice_index: Sequence[int]) -> float:
        """Value at a lattice node; zero off the interior (and off the box)."""
        idx = tuple(int(i) for i in lattice_index)
        if any(i < 0 or i >= n for i, n in zip(idx, self.grid.shape)):
            return 0.0
        if not self.grid.interior_mask[idx]:
            return 0.0
        row = np.flatnonzero((self.grid.node_index == idx).all(axis=1))[0]
        return float(self.values[..., row])

    def to_lattice(self, pad: int = 0) -> "LatticeFunction":
        return LatticeFunction(self.grid, self.grid.embed(self.values, pad), pad)

    def to_csv(self, fh=None) -> str:
        """Write ``x0[,x1],value`` rows; returns the text when ``fh`` is None."""
        if self.values.ndim != 1:
            raise ValueError("only a single grid function can be written as CSV")
        buf = fh if fh is not None else io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(self.grid.dim)] + ["value"])
        for x, v in zip(self.grid.coords, self.values):
            writer.writerow([repr(float(c)) for c in x] + [repr(float(v))])
        return buf.getvalue() if fh is None else ""

    @classmethod
    def from_csv(cls, grid: Grid, text: str) -> "GridFunction":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        lo = np.array([b[0] for b in grid.bounds])
        values = np.zeros(grid.N)
        lookup = {tuple(ix): k for k, ix in enumerate(grid.node_index.tolist())}
        for row in rows:
            x = np.array([float(c) for c in row[: grid.dim]])
            ix = tuple(int(round(c)) for c in (x - lo) / grid.h)
            if ix not in lookup:
                raise ValueError(f"CSV node {tuple(x)} is not an interior node")
            values[lookup[ix]] = float(row[grid.dim])
        return cls(grid, values)


@dataclass(frozen=True, eq=False)
class LatticeFunction:
    """Values on the box lattice extended by ``pad`` nodes on every side.

    Array index ``j + pad`` holds lattice node ``j``; anything beyond the
    array is zero.  The outermost layer is kept at zero so that one more
    difference still fits.
    """

    grid: Grid
    values: np.ndarray
    pad: int

    def repad(self, pad: int) -> "LatticeFunction":
        if pad == self.pad:
            return self
        if pad < self.pad:
            raise ValueError("cannot shrink padding")
        k = pad - self.pad
        width = [(0, 0)] * (self.values.ndim - self.grid.dim) + [(k, k)] * self.grid.dim
        return LatticeFunction(self.grid, np.pad(self.values, width), pad)

    def at(self, lattice_index: Sequence[int]) -> float:
        idx = tuple(int(i) + self.pad for i in lattice_index)
        if any(i < 0 or i >= n for i, n in zip(idx, self.values.shape[-self.grid.dim:])):
            return 0.0
        return float(self.values[(...,) + idx])

    def interior(self) -> GridFunction:
        return GridFunction(self.grid, self.grid.restrict(self.values, self.pad))


# -- array kernels -----------------------------------------------------------

def _fdiff(arr: np.ndarray, axis: int, h: float, dim: int) -> np.ndarray:
    """(u(x + h e_axis) - u(x)) / h on a fixed padded array."""
    ax = arr.ndim - dim + axis
    shifted = np.zeros_like(arr)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    src[ax] = slice(1, None)
    dst[ax] = slice(None, -1)
    shifted[tuple(dst)] = arr[tuple(src)]
    return (shifted - arr) / h


def _bdiff(arr: np.ndarray, axis: int, h: float, dim: int) -> np.ndarray:
    """(u(x) - u(x - h e_axis)) / h on a fixed padded array."""
    ax = arr.ndim - dim + axis
    shifted = np.zeros_like(arr)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    src[ax] = slice(None, -1)
    dst[ax] = slice(1, None)
    shifted[tuple(dst)] = arr[tuple(src)]
    return (arr - shifted) / h


def _dalpha(arr: np.ndarray, alpha: Sequence[int], h: float, dim: int) -> np.ndarray:
    for axis, k in enumerate(alpha):
        for _ in range(k):
            arr = _fdiff(arr, axis, h, dim)
    return arr


def multi_indices(dim: int, m: int) -> list:
    """All multi-indices with ``|alpha| <= m``, ordered by ``|alpha|``."""
    out = [a for a in itertools.product(range(m + 1), repeat=dim) if sum(a) <= m]
    return sorted(out, key=lambda a: (sum(a), tuple(-x for x in a)))


def _check_order(m) -> int:
    if int(m) != m or m < 1:
        raise ValueError(f"Sobolev order must be an integer >= 1, got {m}")
    return int(m)


# -- operators on grid functions ----------------------------------------------

def _lattice(u, pad: int) -> LatticeFunction:
    if isinstance(u, GridFunction):
        return u.to_lattice(pad)
    return u.repad(max(pad, u.pad))


def forward_diff(u, axis: int) -> LatticeFunction:
    """Forward difference along ``axis`` with zero extension outside G."""
    if not 0 <= axis < u.grid.dim:
        raise ValueError(f"axis {axis} out of range for dim {u.grid.dim}")
    pad = (u.pad if isinstance(u, LatticeFunction) else 0) + 1
    lf = _lattice(u, pad)
    return LatticeFunction(u.grid, _fdiff(lf.values, axis, u.grid.h, u.grid.dim), pad)


def backward_diff(w, axis: int) -> LatticeFunction:
    """Backward difference; ``-backward_diff`` is the adjoint of :func:`forward_diff`."""
    if not 0 <= axis < w.grid.dim:
        raise ValueError(f"axis {axis} out of range for dim {w.grid.dim}")
    pad = (w.pad if isinstance(w, LatticeFunction) else 0) + 1
    lf = _lattice(w, pad)
    return LatticeFunction(w.grid, _bdiff(lf.values, axis, w.grid.h, w.grid.dim), pad)


def diff_alpha(u, alpha: Sequence[int], m: int | None = None):
    """``D^alpha u`` as a composition of forward differences.

    ``alpha = 0`` returns ``u`` unchanged.  When ``m`` is given, orders above
    it raise :class:`OrderTooHigh`.
    """
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != u.grid.dim or any(a < 0 for a in alpha):
        raise ValueError(f"bad multi-index {alpha} for dim {u.grid.dim}")
    if m is not None and sum(alpha) > m:
        raise OrderTooHigh(f"|alpha| = {sum(alpha)} exceeds m = {m}")
    out = u
    for axis, k in enumerate(alpha):
        for _ in range(k):
            out = forward_diff(out, axis)
    return out


def _same_grid(u, v):
    if u.grid != v.grid:
        raise GridMismatch("arguments live on different grids")


def inner_H(u, v) -> np.ndarray | float:
    """L2 inner product ``h^d * sum u v`` (batched over leading axes)."""
    _same_grid(u, v)
    grid = u.grid
    if isinstance(u, GridFunction) and isinstance(v, GridFunction):
        s = np.sum(u.values * v.values, axis=-1)
    else:
        pad = max(getattr(u, "pad", 0), getattr(v, "pad", 0))
        prod = _lattice(u, pad).values * _lattice(v, pad).values
        s = np.sum(prod.reshape(prod.shape[: prod.ndim - grid.dim] + (-1,)), axis=-1)
    s = grid.cell_volume * s
    return float(s) if np.ndim(s) == 0 else s


def inner_V(u, v, m: int) -> np.ndarray | float:
    """Sobolev inner product ``sum_{|alpha|<=m} (D^alpha u, D^alpha v)_H``."""
    m = _check_order(m)
    _same_grid(u, v)
    return _inner_V_values(u.grid, u.values, v.values, m)


def _inner_V_values(grid: Grid, u: np.ndarray, v: np.ndarray, m: int):
    ua, va = grid.embed(u, m), grid.embed(v, m)
    batch = np.broadcast_shapes(ua.shape, va.shape)[: ua.ndim - grid.dim]
    total = np.zeros(batch)
    for alpha in multi_indices(grid.dim, m):
        du = _dalpha(ua, alpha, grid.h, grid.dim)
        dv = _dalpha(va, alpha, grid.h, grid.dim)
        total = total + np.sum((du * dv).reshape(batch + (-1,)), axis=-1)
    total = grid.cell_volume * total
    return float(total) if np.ndim(total) == 0 else total


def norm_H(u):
    return np.sqrt(inner_H(u, u))


def norm_V(u, m: int):
    return np.sqrt(inner_V(u, u, m))


def as_values(u, grid: Grid | None = None) -> np.ndarray:
    """Nodal array of a :class:`GridFunction` or raw array, checking the grid."""
    if isinstance(u, GridFunction):
        if grid is not None and u.grid != grid:
            raise GridMismatch("argument lives on a different grid")
        return u.values
    arr = np.asarray(u, dtype=float)
    if grid is not None and arr.shape[-1:] != (grid.N,):
        raise GridMismatch(f"expected trailing length {grid.N}, got shape {arr.shape}")
    return arr


def stack(functions: Iterable[GridFunction]) -> GridFunction:
    functions = list(functions)
    grid = functions[0].grid
    return GridFunction(grid, np.stack([as_values(f, grid) for f in functions]))
