"""Randomized SVD of operator blocks seen only through their action on vectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

RANK_RTOL = 1e-13


@dataclass
class BlockOracle:
    """Matrix-free access to a ``rows x cols`` block.

    ``apply`` and ``apply_transpose`` act on columns of a 2-D array.
    ``probes(count, rng)`` returns ``cols x count`` test vectors; the default
    is standard normal.
    """

    apply: Callable[[np.ndarray], np.ndarray]
    apply_transpose: Callable[[np.ndarray], np.ndarray]
    shape: tuple
    probes: Callable | None = None

    @classmethod
    def from_matrix(cls, A, probes=None):
        A = np.asarray(A)
        return cls(lambda X: A @ X, lambda X: A.T @ X, A.shape, probes)

    def draw(self, count, rng):
        if self.probes is None:
            return rng.standard_normal((self.shape[1], count))
        return self.probes(count, rng)


@dataclass
class LowRankBlock:
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    target: int = -1
    source: int = -1
    posterior: float = float("nan")
    tol_met: bool = True
    info: dict = field(default_factory=dict)

    @property
    def rank(self):
        return len(self.s)

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    @classmethod
    def empty(cls, rows, cols, **kw):
        return cls(np.zeros((rows, 0)), np.zeros(0), np.zeros((cols, 0)), **kw)

    def dense(self):
        return (self.U * self.s) @ self.V.T


def apply_lowrank(block: LowRankBlock, x):
    x = np.asarray(x)
    if x.shape[0] != block.V.shape[0]:
        raise ValueError(f"input length {x.shape[0]} does not match block columns {block.V.shape[0]}")
    if block.rank == 0:
        return np.zeros((block.U.shape[0],) + x.shape[1:])
    coef = block.V.T @ x
    coef = coef * (block.s[:, None] if x.ndim == 2 else block.s)
    return block.U @ coef


def frob(block: LowRankBlock) -> float:
    return float(np.linalg.norm(block.s))


def _orth(Y, rtol=RANK_RTOL):
    """Orthonormal basis of range(Y), dropping numerically null directions."""
    if Y.size == 0 or not np.any(Y):
        return np.zeros((Y.shape[0], 0))
    U, sv, _ = sla.svd(Y, full_matrices=False)
    r = int(np.sum(sv > rtol * sv[0]))
    return U[:, :r]


def range_finder(oracle: BlockOracle, k: int, p: int = 10, rng=None, power_iters: int = 0):
    """Orthonormal Q capturing the range of ``k + p`` random sketches.

    Returns a basis with zero columns when every sketch vanishes.
    """
    rng = rng if rng is not None else np.random.default_rng()
    Omega = oracle.draw(k + p, rng)
    Y = oracle.apply(Omega)
    for _ in range(power_iters):
        Y = oracle.apply(oracle.apply_transpose(_orth(Y)))
    return _orth(Y)


def truncated_svd_from_range(oracle: BlockOracle, Q, k: int) -> LowRankBlock:
    """Rank-k truncation of Q Q^T A using one transpose application per basis column."""
    rows, cols = oracle.shape
    if k == 0 or Q.shape[1] == 0:
        return LowRankBlock.empty(rows, cols)
    Bt = oracle.apply_transpose(Q)  # cols x q, equals (Q^T A)^T
    Ub, s, Vt = sla.svd(Bt.T, full_matrices=False)
    k = min(k, len(s))
    return LowRankBlock(Q @ Ub[:, :k], s[:k], Vt[:k].T)


def posterior_error(block: LowRankBlock, probes, images) -> float:
    """max_j ||A w_j - block(w_j)|| / ||w_j|| over held-out probe columns."""
    if probes.shape[1] == 0:
        return float("nan")
    resid = images - apply_lowrank(block, probes)
    return float(np.max(np.linalg.norm(resid, axis=0) / np.linalg.norm(probes, axis=0)))


def _rank_ladder(k_max, k_step):
    ks = list(range(k_step, k_max + 1, k_step))
    if not ks or ks[-1] != k_max:
        ks.append(k_max)
    return ks


def rsvd_adaptive(oracle: BlockOracle, tol: float, k_max: int, k_step: int = 2, p: int = 10,
                  q: int = 10, rng=None, power_iters: int = 0) -> LowRankBlock:
    """Smallest rank on the ladder k_step, 2 k_step, ... whose posterior error is <= tol.

    One sketch of width ``k_max + p`` is taken up front; each candidate rank
    truncates it.  If ``k_max`` is reached the best candidate is returned with
    ``tol_met=False``.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    rows, cols = oracle.shape
    k_max = min(k_max, rows, cols)
    Q = range_finder(oracle, k_max, p, rng, power_iters)
    post_in = oracle.draw(q, rng)
    post_out = oracle.apply(post_in)
    if Q.shape[1] == 0:
        return LowRankBlock.empty(rows, cols, posterior=posterior_error(
            LowRankBlock.empty(rows, cols), post_in, post_out))
    Bt = oracle.apply_transpose(Q)
    Ub, s, Vt = sla.svd(Bt.T, full_matrices=False)
    return _select_rank(Q @ Ub, s, Vt.T, tol, k_max, k_step, post_in, post_out)


def _select_rank(U, s, V, tol, k_max, k_step, post_in, post_out):
    best = None
    for k in _rank_ladder(k_max, k_step):
        k = min(k, len(s))
        blk = LowRankBlock(U[:, :k], s[:k], V[:, :k])
        blk.posterior = posterior_error(blk, post_in, post_out)
        if best is None or blk.posterior < best.posterior:
            best = blk
        if blk.posterior <= tol:
            return blk
        if k == len(s):
            break
    best.tol_met = False
    return best


def lowrank_from_sketches(Y, W, Psi, k: int, tol: float | None = None, k_step: int = 1,
                          post_in=None, post_out=None, rtol: float = RANK_RTOL) -> LowRankBlock:
    """Single-pass randomized SVD from a range sketch and a co-range sketch.

    ``Y = A @ Omega`` spans the range; ``W = Psi @ A`` is the co-range sketch
    (for a symmetric parent operator it is read off the mirrored block, so no
    extra transpose applications are needed).  With ``tol`` given, the rank
    is chosen on the ladder k_step, 2 k_step, ..., k by the posterior error on
    ``(post_in, post_out)``; otherwise the rank is fixed at k.
    """
    rows, cols = Y.shape[0], W.shape[1]
    Q = _orth(Y, rtol)
    if Q.shape[1] == 0 or k == 0:
        blk = LowRankBlock.empty(rows, cols)
        if post_in is not None:
            blk.posterior = posterior_error(blk, post_in, post_out)
        return blk

    def candidate(kk):
        Qk = Q[:, :kk]
        X, *_ = sla.lstsq(Psi @ Qk, W)
        Ux, s, Vt = sla.svd(X, full_matrices=False)
        return LowRankBlock(Qk @ Ux, s, Vt.T)

    kmax = min(k, Q.shape[1])
    if tol is None:
        blk = candidate(kmax)
        if post_in is not None and post_in.shape[1]:
            blk.posterior = posterior_error(blk, post_in, post_out)
        return blk
    best = None
    for kk in _rank_ladder(kmax, k_step):
        blk = candidate(kk)
        blk.posterior = posterior_error(blk, post_in, post_out)
        if best is None or blk.posterior < best.posterior:
            best = blk
        if blk.posterior <= tol:
            return blk
    best.tol_met = False
    return best
