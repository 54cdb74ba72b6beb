"""Independent dense reference implementations used by the tests.

Nothing here imports the package's difference kernels: difference operators
are built as explicit matrices with the zero extension written into the
stencil, and combined across axes with Kronecker products.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def forward_matrix(length: int, h: float) -> np.ndarray:
    """Forward difference of a zero-extended vector of ``length`` entries.

    The result has ``length + 1`` entries: positions ``-1 .. length - 1``
    relative to the first input entry, which is the full support.
    """
    D = np.zeros((length + 1, length))
    for j in range(length + 1):
        if j < length:
            D[j, j] += 1.0 / h  # u_{j}, with the output row j standing for position j - 1
        if j >= 1:
            D[j, j - 1] -= 1.0 / h
    return D


def power_matrix(n: int, k: int, h: float) -> np.ndarray:
    """``k``-fold forward difference ``D^k`` on ``n`` interior nodes, full support."""
    M = np.eye(n)
    for i in range(k):
        M = forward_matrix(n + i, h) @ M
    return M


def multi_indices(dim: int, m: int):
    return [a for a in itertools.product(range(m + 1), repeat=dim) if sum(a) <= m]


def dalpha_matrix(ns, alpha, h) -> np.ndarray:
    """Kronecker product of the per-axis difference powers (C-ordered nodes)."""
    M = np.ones((1, 1))
    for n, k in zip(ns, alpha):
        M = np.kron(M, power_matrix(n, k, h))
    return M


def gram_matrix(ns, m: int, h: float) -> np.ndarray:
    """``A = sum_{|alpha| <= m} (D^alpha)^T D^alpha`` on a full box with ``ns`` nodes per axis."""
    N = math.prod(ns)
    A = np.zeros((N, N))
    for alpha in multi_indices(len(ns), m):
        D = dalpha_matrix(ns, alpha, h)
        A += D.T @ D
    return A


def inner_H(u, v, h, dim):
    return h**dim * float(np.dot(u, v))


def inner_V(u, v, ns, m, h):
    return h ** len(ns) * float(u @ gram_matrix(ns, m, h) @ v)


def resolvent(ns, m, h, lam, f):
    A = gram_matrix(ns, m, h)
    return np.linalg.solve(lam * np.eye(len(A)) + A, f)


def lift_spectral_factor(ns, m, h, n) -> float:
    """``max_i mu_i / (n + mu_i)`` over the spectrum of the dense Gram matrix."""
    mu = np.linalg.eigvalsh(gram_matrix(ns, m, h))
    return float(np.max(mu / (n + mu)))


def scalar_heat_step(u, h, dt):
    """Implicit heat step on the single interior node of a ``h = 1/2`` grid."""
    second = 2.0 / h**2
    return u / (1.0 + dt * second)


def positive_part_mismatch_linear(h):
    """H-norm of ``D(u+) - I_{u>0} D u`` for ``u = x - 1/2`` on ``(0, 1)``.

    Nodes ``x_j = j h``; the forward difference at ``x_j`` involves
    ``x_j, x_{j+1}``.  With ``1/2`` a node (``h = 1/2^k``), the only
    mismatching edge is the one starting at ``x = 1/2``: there ``u = 0`` so the
    indicator vanishes while ``D(u+) = (h - 0) / h = 1``.  Zero extension at
    ``x = 1`` adds one more edge where ``u > 0`` jumps to 0, which matches on
    both sides.  So the mismatch is 1 on one edge and its norm is ``sqrt(h)``.
    """
    return math.sqrt(h)
