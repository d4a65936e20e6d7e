"""Gaussian-process forcing terms on grid nodes.

Draws use counter-based Philox streams keyed by ``(master seed, stream id,
draw index)`` so a given vector never depends on how many others were drawn or
in which order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .grid_pde import DENSE_CAP, DenseCapError, Grid

log = logging.getLogger(__name__)

# stream purposes
SKETCH = 1
POSTERIOR = 2
HS_ESTIMATE = 3
NEAR_FIELD = 4
DATASET = 5
TEST = 6


class CovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "squared_exponential"
    length_scale: float = 0.2

    def __post_init__(self):
        if self.kind not in ("squared_exponential", "white"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "squared_exponential" and not (np.isfinite(self.length_scale) and self.length_scale > 0):
            raise ValueError(f"length scale must be finite and positive, got {self.length_scale}")

    def scaled(self, factor: float) -> "KernelSpec":
        return KernelSpec(self.kind, self.length_scale * factor)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for the integer key ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def standard_normal(seed: int, key: tuple, count: int, size: int) -> np.ndarray:
    """``count`` standard normal vectors (rows), the i-th from stream ``(*key, i)``."""
    out = np.empty((count, size))
    for i in range(count):
        out[i] = stream(seed, *key, i).standard_normal(size)
    return out


def covariance_matrix(grid: Grid, kernel: KernelSpec, support=None, cap: int = DENSE_CAP) -> np.ndarray:
    """Kernel matrix on the grid nodes (or on the node subset ``support``)."""
    x = grid.coords()
    if support is not None:
        x = x[np.asarray(support)]
    m = x.shape[0]
    if m > cap:
        raise DenseCapError(f"covariance of size {m} exceeds the dense cap {cap}")
    if kernel.kind == "white":
        return np.eye(m)
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
    return np.exp(-sq / (2.0 * kernel.length_scale**2))


@dataclass(frozen=True)
class CovarianceFactor:
    L: np.ndarray
    jitter: float
    seed: int = 0

    @property
    def size(self):
        return self.L.shape[0]


def factorize(C, jitter_start: float = 1e-12, seed: int = 0, max_escalations: int = 8) -> CovarianceFactor:
    """Cholesky factor of C + tau*I, escalating tau by 10x until it succeeds."""
    C = np.asarray(C, dtype=float)
    if C.shape[0] == 0:
        return CovarianceFactor(np.zeros((0, 0)), 0.0, seed)
    tau = jitter_start * float(np.mean(np.diag(C)))
    eye = np.eye(C.shape[0])
    for attempt in range(max_escalations + 1):
        try:
            L = sla.cholesky(C + tau * eye, lower=True)
        except sla.LinAlgError:
            tau *= 10.0
            continue
        if attempt:
            log.debug("covariance factorized with jitter %.1e after %d escalations", tau, attempt)
        return CovarianceFactor(L, tau, seed)
    raise CovarianceError(f"covariance not factorizable (last jitter tried {tau / 10:.1e})")


def draw(factor: CovarianceFactor, count: int, stream_id=0) -> np.ndarray:
    """``count`` GP samples as rows; row i uses stream (seed, stream_id, i)."""
    key = stream_id if isinstance(stream_id, tuple) else (stream_id,)
    Z = standard_normal(factor.seed, key, count, factor.size)
    return Z @ factor.L.T


def mask(f, support) -> np.ndarray:
    f = np.asarray(f)
    out = np.zeros_like(f)
    support = np.asarray(support, dtype=int)
    out[..., support] = f[..., support]
    return out


@dataclass(frozen=True)
class QualityReport:
    """Engineering proxy for how well the probes excite the dominant modes.

    ``gamma_hat = lambda_min(V^T C V) / lambda_max(C)``.  It is not the exact
    data-quality factor of the underlying theory, only a stand-in for it.
    """

    k: int
    gamma_hat: float
    method: str = "proxy:min-rayleigh-over-max-eig"
    underflow: bool = False


def quality_proxy(C, V) -> QualityReport:
    C = np.asarray(C, dtype=float)
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    k = V.shape[1]
    if np.abs(V.T @ V - np.eye(k)).max() > 1e-10:
        raise ValueError("mode basis V_k is not orthonormal to 1e-10")
    lam_max = float(np.linalg.eigvalsh(C)[-1])
    lam_min = float(np.linalg.eigvalsh(V.T @ C @ V)[0])
    gamma = lam_min / lam_max
    underflow = not gamma > 0
    if underflow:
        gamma = float(np.finfo(float).tiny)
    return QualityReport(k, min(gamma, 1.0), underflow=underflow)
