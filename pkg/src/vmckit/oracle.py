"""Brute-force ground truth for estimator tests.

Expectations are computed by summing over every ordered tuple of sample
indices with product weights, so they are exact up to rounding.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .model import FiniteWeights, inner_product

ENUMERATION_LIMIT = 10 ** 6


class OracleError(ValueError):
    pass


def enumerate_expectation(estimator: Callable, probs: Sequence[float], n: int) -> np.ndarray:
    """``E[estimator(X_1..X_n)]`` for i.i.d. ``X_i ~ probs`` by full enumeration.

    Tuples with zero weight are skipped so estimators may be undefined there.
    """
    p = np.asarray(probs, dtype=float)
    s = p.size
    if s ** n > ENUMERATION_LIMIT:
        raise OracleError(f"{s}^{n} tuples exceeds the enumeration limit {ENUMERATION_LIMIT}")
    if abs(p.sum() - 1.0) > 1e-10 or np.any(p < 0):
        raise OracleError("sampling probabilities must be nonnegative and sum to 1")
    weights, values = [], []
    for tup in itertools.product(range(s), repeat=n):
        w = float(np.prod(p[list(tup)]))
        if w == 0.0:
            continue
        try:
            v = np.asarray(estimator(tup), dtype=float)
        except Exception as exc:
            raise OracleError(f"estimator failed on tuple {tup}: {exc}") from exc
        weights.append(w)
        values.append(v)
    return np.tensordot(np.array(weights), np.stack(values), axes=(0, 0))


def fd_gradient(fn: Callable, theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of ``theta``."""
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fp, fm = fn(theta + e), fn(theta - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value along coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return g


def exact_norm(ansatz, theta, rho: FiniteWeights) -> float:
    """``||psi_theta||_rho`` by full summation over a finite space."""
    psi = ansatz.value(theta, ansatz.space.points)
    return float(np.sqrt(inner_product(psi, psi, rho)))


def vector_angle(a, b) -> float:
    """Angle between two vectors in radians, accurate near 0 and pi."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    if np.linalg.norm(a) == 0 or nb == 0:
        raise OracleError("angle undefined for a zero vector")
    u = b / nb
    along = float(a @ u)
    across = float(np.linalg.norm(a - along * u))
    return math.atan2(across, along)


# ---------------------------------------------------------------------------
# Exact variance of pairwise-average estimators.  Both gradient estimators
# can be written as ``1/(n(n-1)) sum_{i != j} k(X_i, X_j)`` (the diagonal
# terms cancel), so their variance is a closed-form function of n.
# ---------------------------------------------------------------------------

def pair_statistic_variance(kernel, probs: Sequence[float], n) -> np.ndarray:
    """Total variance ``E|U - EU|^2`` of ``U = 1/(n(n-1)) sum_{i != j} k(X_i, X_j)``.

    ``kernel`` has shape ``(S, S, d)``; ``n`` may be an array of batch sizes.
    Uses ``Var U = (4 (n-2) zeta1 + 2 zeta2) / (n (n-1))`` for the
    symmetrized kernel.
    """
    k = np.asarray(kernel, dtype=float)
    p = np.asarray(probs, dtype=float)
    n = np.asarray(n, dtype=float)
    if np.any(n < 2):
        raise OracleError("pairwise statistics need n >= 2")
    ks = 0.5 * (k + k.transpose(1, 0, 2))
    mu = np.einsum("x,y,xyd->d", p, p, ks)
    g1 = np.einsum("y,xyd->xd", p, ks)
    zeta1 = float(p @ np.sum((g1 - mu) ** 2, axis=1))
    zeta2 = float(np.einsum("x,y,xy->", p, p, np.sum((ks - mu) ** 2, axis=2)))
    return (4 * (n - 2) * zeta1 + 2 * zeta2) / (n * (n - 1))


def vmc_pair_kernel(h, ansatz, theta) -> np.ndarray:
    """``k(x, y) = 2 (E(x) - E(y)) grad log|psi(x)|`` for a matrix Hamiltonian."""
    pts = ansatz.space.points
    psi = ansatz.value(theta, pts)
    if np.any(psi == 0):
        raise OracleError("psi must be nonzero everywhere")
    e = (h.matrix @ psi) / psi
    glog = ansatz.grad_theta(theta, pts) / psi[:, None]
    return 2.0 * (e[:, None] - e[None, :])[:, :, None] * glog[:, None, :]


def directional_pair_kernel(ansatz, theta, phi, z_tilde: float) -> np.ndarray:
    """``k(x, y) = psi(x) (phi(x) psi(y) - psi(x) phi(y)) grad psi(y) / Z~^3``."""
    pts = ansatz.space.points
    psi = ansatz.value(theta, pts)
    grad = ansatz.grad_theta(theta, pts)
    phi = np.asarray(phi, dtype=float)
    a = psi[:, None] * (phi[:, None] * psi[None, :] - psi[:, None] * phi[None, :])
    return a[:, :, None] * grad[None, :, :] / z_tilde ** 3
