"""Finite-difference discretization of -div(a(x) grad u) = f on the unit box.

The operator uses a flux-conservative 3/5/7-point stencil with zero Dirichlet
data, so the assembled matrix is exactly symmetric.  A :class:`DiscreteOperator`
is the black box the learning algorithm queries: it maps a forcing vector to a
solution vector and counts every solve.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla

MAX_NODES = 2**21
DENSE_CAP = 4096
SOLVE_RTOL = 1e-10
CG_RTOL = 1e-11
SOLVE_CHUNK = 32


class GridError(ValueError):
    pass


class EllipticityError(ValueError):
    pass


class DenseCapError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    """Uniform interior grid of ``n**d`` nodes on (0, 1)^d, lexicographic (C) order."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise GridError(f"dimension d={self.d} not in {{1, 2, 3}}")
        if self.n < 2:
            raise GridError(f"n={self.n} must be at least 2")

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def total(self) -> int:
        return self.n**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def weight(self) -> float:
        """Quadrature weight h^d attached to every node."""
        return self.h**self.d

    def multi_index(self, index):
        return np.stack(np.unravel_index(np.asarray(index), self.shape), axis=-1)

    def index(self, multi):
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.shape)

    def coords(self) -> np.ndarray:
        """Node coordinates, shape (total, d)."""
        return (self.multi_index(np.arange(self.total)) + 1) * self.h


def build_grid(d: int, n: int, max_nodes: int = MAX_NODES) -> Grid:
    grid = Grid(d, n)
    if grid.total > max_nodes:
        raise GridError(f"n^d = {grid.total} exceeds the node cap {max_nodes}")
    return grid


class CoefficientField:
    """Isotropic scalar coefficient a(x), evaluated at flux points (edge midpoints).

    Build one with :meth:`identity`, :meth:`from_function`, :meth:`from_nodal` or
    :meth:`preset`.
    """

    PRESETS = ("identity", "smooth", "checkerboard")

    def __init__(self, kind: str, func: Callable[[np.ndarray], np.ndarray] | None = None,
                 nodal=None, a_min: float = 0.0):
        self.kind = kind
        self._func = func
        self._nodal = None if nodal is None else np.asarray(nodal, dtype=float)
        self.a_min = a_min

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def from_function(cls, func, kind="isotropic"):
        return cls(kind, func=func)

    @classmethod
    def from_nodal(cls, values):
        """Nodal samples on the interior nodes; flux values are neighbour averages."""
        return cls("nodal", nodal=values)

    @classmethod
    def preset(cls, name: str):
        if name == "identity":
            return cls.identity()
        if name == "smooth":
            return cls.from_function(_smooth, kind="smooth")
        if name == "checkerboard":
            return cls.from_function(_checkerboard, kind="checkerboard")
        raise ValueError(f"unknown coefficient preset {name!r}; choose from {cls.PRESETS}")

    def flux_values(self, grid: Grid, axis: int) -> np.ndarray:
        """Coefficient on the edges normal to ``axis``.

        Returns an array of shape ``grid.shape`` with ``n + 1`` entries along
        ``axis``: edge ``e`` joins nodes ``e - 1`` and ``e`` (boundary nodes at
        ``-1`` and ``n``).
        """
        edge_shape = list(grid.shape)
        edge_shape[axis] = grid.n + 1
        if self.kind == "identity":
            return np.ones(edge_shape)
        if self._nodal is not None:
            vals = self._nodal.reshape(grid.shape)
            lo = np.concatenate([np.take(vals, [0], axis=axis), vals], axis=axis)
            hi = np.concatenate([vals, np.take(vals, [-1], axis=axis)], axis=axis)
            return 0.5 * (lo + hi)
        idx = np.indices(edge_shape).astype(float)
        pts = (idx + 1.0) * grid.h
        pts[axis] -= 0.5 * grid.h
        pts = np.moveaxis(pts, 0, -1).reshape(-1, grid.d)
        return np.asarray(self._func(pts), dtype=float).reshape(edge_shape)


def _smooth(x):
    val = np.sin(2 * np.pi * x[:, 0])
    for k in range(1, x.shape[1]):
        val = val * np.cos(2 * np.pi * x[:, k])
    return 1.0 + 0.5 * val


def _checkerboard(x, contrast=10.0):
    parity = np.floor(2 * x).astype(int).sum(axis=1) % 2
    return np.where(parity == 1, contrast, 1.0)


def _difference_1d(n):
    # (n+1) x n forward differences with zero Dirichlet ends
    return sps.diags([np.ones(n + 1), -np.ones(n)], [0, -1], shape=(n + 1, n), format="csr")


class SolveCounter:
    """Thread-safe running count of oracle solves."""

    def __init__(self):
        self._lock = threading.Lock()
        self._value = 0

    def add(self, k=1):
        with self._lock:
            self._value += k

    @property
    def value(self):
        return self._value


@dataclass
class DiscreteOperator:
    """The forcing -> solution black box for one grid and coefficient field."""

    grid: Grid
    K: sps.csc_matrix
    coefficient: CoefficientField | None = None
    workers: int = 1
    counter: SolveCounter = field(default_factory=SolveCounter)

    def __post_init__(self):
        self._lu = None
        if self.grid.d <= 2:
            self._lu = spla.splu(self.K.tocsc())

    @property
    def weight(self) -> float:
        return self.grid.weight

    @property
    def size(self) -> int:
        return self.grid.total

    @property
    def solves(self) -> int:
        return self.counter.value

    def __call__(self, F):
        return solve(self, F)

    def _solve_block(self, B):
        if self._lu is not None:
            return self._lu.solve(B)
        X = np.empty_like(B)
        for j in range(B.shape[1]):
            x, info = spla.cg(self.K, B[:, j], rtol=CG_RTOL, atol=0.0, maxiter=20 * self.size)
            if info != 0:
                raise SolverError(f"conjugate gradients did not converge (info={info})")
            X[:, j] = x
        return X


def assemble(grid: Grid, coeff: CoefficientField | None = None, workers: int = 1) -> DiscreteOperator:
    """Flux-form stencil matrix K = sum_k D_k^T diag(a_k) D_k / h^2."""
    coeff = coeff or CoefficientField.identity()
    n, d = grid.n, grid.d
    eye = sps.identity(n, format="csr")
    D1 = _difference_1d(n)
    K = sps.csr_matrix((grid.total, grid.total))
    for axis in range(d):
        a = coeff.flux_values(grid, axis)
        bad = ~(a > coeff.a_min)
        if bad.any():
            raise EllipticityError(
                f"coefficient not uniformly elliptic: {int(bad.sum())} flux points with a <= {coeff.a_min}"
                f" (min value {a.min():.3g}, axis {axis})")
        factors = [eye] * d
        factors[axis] = D1
        Dk = factors[0]
        for f in factors[1:]:
            Dk = sps.kron(Dk, f, format="csr")
        K = K + Dk.T @ sps.diags(a.ravel()) @ Dk
    K = (K / grid.h**2).tocsc()
    K.sort_indices()
    return DiscreteOperator(grid, K, coeff, workers=workers)


def solve(op: DiscreteOperator, f):
    """Solve K u = f for one vector or for the columns of a matrix.

    Columns are solved in fixed-size chunks so results do not depend on the
    worker count.  Every column counts as one solve.
    """
    f = np.asarray(f, dtype=float)
    single = f.ndim == 1
    F = f[:, None] if single else f
    if F.shape[0] != op.size:
        raise ValueError(f"forcing length {F.shape[0]} does not match grid size {op.size}")
    m = F.shape[1]
    chunks = [F[:, i:i + SOLVE_CHUNK] for i in range(0, m, SOLVE_CHUNK)]
    if op.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(op.workers) as pool:
            parts = list(pool.map(op._solve_block, chunks))
    else:
        parts = [op._solve_block(c) for c in chunks]
    U = np.hstack(parts) if parts else np.zeros_like(F)
    fnorm = np.linalg.norm(F, axis=0)
    resid = np.linalg.norm(op.K @ U - F, axis=0)
    rel = np.where(fnorm > 0, resid / np.where(fnorm > 0, fnorm, 1.0), resid)
    worst = float(rel.max()) if m else 0.0
    if worst > SOLVE_RTOL:
        raise SolverError(f"solve residual {worst:.3e} exceeds {SOLVE_RTOL:g}", residual=worst)
    op.counter.add(m)
    return U[:, 0] if single else U


def dense_kernel(op: DiscreteOperator, cap: int = DENSE_CAP) -> np.ndarray:
    """Discrete Green's function K^{-1} / h^d (test oracle; not counted as solves)."""
    if op.size > cap:
        raise DenseCapError(f"n^d = {op.size} exceeds the dense cap {cap}")
    c = sla.cho_factor(op.K.toarray(), lower=True)
    return sla.cho_solve(c, np.eye(op.size)) / op.weight


def hs_norm(G, grid: Grid) -> float:
    """Discrete Hilbert-Schmidt norm h^d * ||G||_F."""
    return grid.weight * float(np.linalg.norm(G))


def op_norm(G, grid: Grid, tol: float = 1e-8, maxiter: int = 5000, seed: int = 0) -> float:
    """L2 -> L2 operator norm h^d * ||G||_2 by power iteration on G^T G."""
    G = np.asarray(G)
    if not np.any(G):
        return 0.0
    x = np.random.default_rng(seed).standard_normal(G.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(maxiter):
        y = G.T @ (G @ x)
        new = float(np.sqrt(np.linalg.norm(y)))
        if new == 0.0:
            return 0.0
        x = y / np.linalg.norm(y)
        if abs(new - est) <= tol * new:
            est = new
            break
        est = new
    return grid.weight * est
