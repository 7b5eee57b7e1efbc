"""Kernels, derivative Gram blocks, mean-function projection and GP conditioning.

The kernel primitives take an ``xp`` array namespace so the same formulas
serve plain numpy callers and the jit-compiled model in :mod:`bne.model`.
Derivatives are always taken along coordinate 0 of the input, which is the
scalar argument of the calibration function.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

FAMILIES = ("matern32", "rbf", "periodic")
JITTER_LADDER = (1e-8, 1e-6, 1e-4)


class GPError(RuntimeError):
    """Raised on kernel misuse or a factorization that cannot be stabilized."""


@dataclass(frozen=True)
class KernelSpec:
    family: str = "matern32"
    length_scale: float = 1.0
    period: float = 1.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.length_scale > 0:
            raise ValueError("length_scale must be positive")
        if not self.period > 0:
            raise ValueError("period must be positive")
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")


@dataclass(frozen=True)
class GramBlocks:
    """Joint covariance of a process and its derivative along coordinate 0.

    ``K_d[i, j]`` is the derivative of ``k(z_i, z')`` in ``z'`` at ``z_j`` and
    ``K_dd`` the mixed second derivative.  ``jitter`` is the value that makes
    :meth:`joint` positive definite; it is not baked into the blocks.
    """

    K: np.ndarray
    K_d: np.ndarray
    K_dd: np.ndarray
    jitter: float

    def joint(self, with_jitter: bool = True) -> np.ndarray:
        J = np.block([[self.K, self.K_d], [self.K_d.T, self.K_dd]])
        if with_jitter:
            J = J + self.jitter * np.eye(J.shape[0])
        return J


@dataclass(frozen=True)
class Projector:
    P: np.ndarray
    basis: np.ndarray


def _as_points(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 0:
        Z = Z.reshape(1, 1)
    elif Z.ndim == 1:
        Z = Z[:, None]
    return Z


# -- kernel primitives (xp-generic) -----------------------------------------


def _safe_norm(diff, xp):
    d2 = xp.sum(diff * diff, axis=-1)
    pos = d2 > 0
    return xp.where(pos, xp.sqrt(xp.where(pos, d2, 1.0)), 0.0)


def matern32_blocks(Z1, Z2, length_scale, amplitude=1.0, xp=np):
    """Return ``k``, ``dk/dz'_0``, ``dk/dz_0`` and ``d2k/dz_0 dz'_0``.

    ``Z1`` is (n, D), ``Z2`` is (m, D); outputs are (n, m).
    """
    diff = Z1[:, None, :] - Z2[None, :, :]
    r = _safe_norm(diff, xp)
    a = math.sqrt(3.0) / length_scale
    e = xp.exp(-a * r)
    d0 = diff[..., 0]
    k = amplitude * (1.0 + a * r) * e
    k_dzp = amplitude * a * a * e * d0
    # d0**2 / r is bounded by |d0| and vanishes at r = 0
    ratio = xp.where(r > 0, d0 * d0 / xp.where(r > 0, r, 1.0), 0.0)
    k_dzdzp = amplitude * a * a * e * (1.0 - a * ratio)
    return k, k_dzp, -k_dzp, k_dzdzp


def rbf_blocks(Z1, Z2, length_scale, amplitude=1.0, xp=np):
    diff = Z1[:, None, :] - Z2[None, :, :]
    d2 = xp.sum(diff * diff, axis=-1)
    inv_l2 = 1.0 / (length_scale * length_scale)
    k = amplitude * xp.exp(-0.5 * d2 * inv_l2)
    d0 = diff[..., 0]
    k_dzp = k * d0 * inv_l2
    k_dzdzp = k * (inv_l2 - d0 * d0 * inv_l2 * inv_l2)
    return k, k_dzp, -k_dzp, k_dzdzp


def periodic_matrix(Z1, Z2, length_scale, period, amplitude=1.0, xp=np):
    diff = Z1[:, None, :] - Z2[None, :, :]
    r = _safe_norm(diff, xp)
    s = xp.sin(math.pi * r / period)
    return amplitude * xp.exp(-2.0 * s * s / (length_scale * length_scale))


def kernel_matrix(spec: KernelSpec, Z1, Z2=None) -> np.ndarray:
    """Covariance matrix between two point sets (rows are points)."""
    Z1 = _as_points(Z1)
    Z2 = Z1 if Z2 is None else _as_points(Z2)
    if Z1.shape[1] != Z2.shape[1]:
        raise GPError(f"dimension mismatch: {Z1.shape[1]} vs {Z2.shape[1]}")
    if spec.family == "matern32":
        return matern32_blocks(Z1, Z2, spec.length_scale, spec.amplitude)[0]
    if spec.family == "rbf":
        return rbf_blocks(Z1, Z2, spec.length_scale, spec.amplitude)[0]
    return periodic_matrix(Z1, Z2, spec.length_scale, spec.period, spec.amplitude)


def kernel_eval(spec: KernelSpec, z, z_prime) -> float:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    z_prime = np.atleast_1d(np.asarray(z_prime, dtype=float))
    if z.shape != z_prime.shape:
        raise GPError(f"dimension mismatch: {z.shape} vs {z_prime.shape}")
    return float(kernel_matrix(spec, z[None, :], z_prime[None, :])[0, 0])


def derivative_kernels(spec: KernelSpec, Z) -> GramBlocks:
    """Gram blocks of a process and its derivative along coordinate 0 at ``Z``."""
    Z = _as_points(Z)
    if spec.family == "matern32":
        K, K_d, _, K_dd = matern32_blocks(Z, Z, spec.length_scale, spec.amplitude)
    elif spec.family == "rbf":
        K, K_d, _, K_dd = rbf_blocks(Z, Z, spec.length_scale, spec.amplitude)
    else:
        raise GPError(f"derivative kernels are not available for family {spec.family!r}")
    K = 0.5 * (K + K.T)
    K_dd = 0.5 * (K_dd + K_dd.T)
    n = 2 * Z.shape[0]
    jitter = JITTER_LADDER[0] * (np.trace(K) + np.trace(K_dd)) / n
    return GramBlocks(K=K, K_d=K_d, K_dd=K_dd, jitter=float(jitter))


# -- linear algebra -----------------------------------------------------------


def projector(F) -> Projector:
    """Orthogonal projector onto the complement of the columns of ``F``."""
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    n, m = F.shape
    if m == 0:
        return Projector(P=np.eye(n), basis=F)
    _, R, piv = scipy.linalg.qr(F, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, m) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < m:
        raise GPError(
            f"mean-function basis is rank deficient: column {int(piv[rank])} "
            "is linearly dependent on the others"
        )
    Q, _ = np.linalg.qr(F)
    P = np.eye(n) - Q @ Q.T
    return Projector(P=0.5 * (P + P.T), basis=F)


def independent_columns(F, rtol: float = 1e-10) -> np.ndarray:
    """Indices (sorted) of a maximal set of numerically independent columns of ``F``."""
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[1] == 0 or F.shape[0] == 0:
        return np.arange(0)
    _, R, piv = scipy.linalg.qr(F, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * diag[0])) if diag[0] > 0 else 0
    return np.sort(piv[:rank])


def orthogonalize(K, F) -> tuple[Projector, np.ndarray]:
    """Project ``K`` onto the residual space of the mean functions in ``F``."""
    K = np.asarray(K, dtype=float)
    proj = projector(np.asarray(F, dtype=float).reshape(K.shape[0], -1))
    K_orth = proj.P @ K @ proj.P.T
    return proj, 0.5 * (K_orth + K_orth.T)


def stable_cholesky(K) -> tuple[np.ndarray, float]:
    """Cholesky factor with the escalating jitter ladder.

    Returns the lower factor and the jitter that was added.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    scale = max(float(np.trace(K)) / n, np.finfo(float).tiny)
    for level in JITTER_LADDER:
        jitter = level * scale
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            logger.debug("cholesky failed at jitter %.1e, escalating", jitter)
            continue
        return L, jitter
    raise GPError(f"Cholesky failed after jitter escalation up to {JITTER_LADDER[-1]:g} x trace/N")


def _psd_clip(C):
    C = 0.5 * (C + C.T)
    w, V = np.linalg.eigh(C)
    if w.size and w.min() < 0:
        w = np.maximum(w, 0.0)
        C = (V * w) @ V.T
        C = 0.5 * (C + C.T)
    return C


def gp_condition(K_train, K_cross, K_test, observed, prior_mean_train=0.0, prior_mean_test=0.0):
    """Posterior mean and covariance of a GP at test points given noiseless values.

    ``K_cross`` has shape (n_train, n_test).  A :class:`GramBlocks` may be passed
    for ``K_train`` in which case its jittered joint matrix is used.
    """
    if isinstance(K_train, GramBlocks):
        K_train = K_train.joint(with_jitter=False)
    K_train = np.asarray(K_train, dtype=float)
    K_test = np.asarray(K_test, dtype=float)
    n = K_train.shape[0]
    mean_test = np.broadcast_to(np.asarray(prior_mean_test, dtype=float), (K_test.shape[0],)).copy()
    if n == 0:
        return mean_test, _psd_clip(K_test.copy())
    K_cross = np.asarray(K_cross, dtype=float).reshape(n, -1)
    resid = np.asarray(observed, dtype=float) - np.broadcast_to(prior_mean_train, (n,))
    L, _ = stable_cholesky(K_train)
    alpha = scipy.linalg.cho_solve((L, True), resid)
    V = scipy.linalg.solve_triangular(L, K_cross, lower=True)
    mean = mean_test + K_cross.T @ alpha
    cov = K_test - V.T @ V
    return mean, _psd_clip(cov)
