"""Configuration spaces, measures, inner products and Hamiltonians.

Finite spaces are index sets ``{0, ..., S-1}`` and points are integer
indices.  Continuous spaces are axis-aligned boxes in ``R^D`` and points are
rows of a ``(n, D)`` float array.  Every routine in the package works on
batches of points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

SYMMETRY_TOL = 1e-12


class ModelError(ValueError):
    """Invalid space, measure or Hamiltonian."""


@dataclass(frozen=True)
class FiniteSpace:
    size: int

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise ModelError(f"finite space needs size >= 2, got {self.size}")

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.size)

    def check_points(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.dtype.kind not in "iu":
            raise ModelError("finite-space points must be integer indices")
        if x.size and (x.min() < 0 or x.max() >= self.size):
            raise ModelError(f"point index out of range [0, {self.size})")
        return x


@dataclass(frozen=True)
class BoxSpace:
    """Bounded box ``prod_i [lo_i, hi_i]``; stands in for R^D."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi) or len(lo) < 1:
            raise ModelError("box bounds must be nonempty and of equal length")
        if any(not (a < b) for a, b in zip(lo, hi)):
            raise ModelError("every lower bound must be below its upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, dim: int, half_width: float) -> "BoxSpace":
        return cls((-half_width,) * dim, (half_width,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def check_points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ModelError(f"expected points of shape (n, {self.dim}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ModelError("non-finite coordinates")
        return x


ConfigSpace = Union[FiniteSpace, BoxSpace]


@dataclass(frozen=True)
class FiniteWeights:
    """Probability weights on a finite space, normalized at construction."""

    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise ModelError("weights must be a nonempty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ModelError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ModelError("weights sum to zero")
        w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, size: int) -> "FiniteWeights":
        return cls(np.ones(size))


@dataclass(frozen=True)
class Lebesgue:
    """Uniform probability on a box (Lebesgue measure, normalized)."""

    box: BoxSpace


@dataclass(frozen=True)
class TargetInduced:
    """Probability density proportional to ``|phi|^2`` on a box."""

    phi: Callable[[np.ndarray], np.ndarray]
    box: BoxSpace


Measure = Union[FiniteWeights, Lebesgue, TargetInduced]


@dataclass(frozen=True)
class MatrixHamiltonian:
    """Real symmetric matrix acting on functions of a finite space.

    ``check=False`` skips the symmetry test; only the negative-control
    fixtures use it.
    """

    matrix: np.ndarray = field(repr=False)
    check: bool = True

    def __post_init__(self):
        h = np.array(self.matrix, dtype=float)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ModelError("Hamiltonian matrix must be square")
        if not np.all(np.isfinite(h)):
            raise ModelError("Hamiltonian has non-finite entries")
        if self.check and np.max(np.abs(h - h.T)) > SYMMETRY_TOL:
            raise ModelError("Hamiltonian matrix is not symmetric")
        h.setflags(write=False)
        object.__setattr__(self, "matrix", h)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class SchrodingerHamiltonian:
    """``-1/2 Laplacian + V`` in atomic units."""

    potential: Callable[[np.ndarray], np.ndarray]
    kinetic_coefficient: float = 0.5


Hamiltonian = Union[MatrixHamiltonian, SchrodingerHamiltonian]


def path_hamiltonian(diagonal: Sequence[float]) -> MatrixHamiltonian:
    """Graph Laplacian of a path plus an on-site potential."""
    v = np.asarray(diagonal, dtype=float)
    s = v.size
    h = np.zeros((s, s))
    for i in range(s - 1):
        h[i, i + 1] = h[i + 1, i] = -1.0
        h[i, i] += 1.0
        h[i + 1, i + 1] += 1.0
    return MatrixHamiltonian(h + np.diag(v))


def random_symmetric_hamiltonian(size: int, rng: np.random.Generator) -> MatrixHamiltonian:
    a = rng.standard_normal((size, size))
    return MatrixHamiltonian((a + a.T) / 2)


def harmonic_potential(x: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(np.atleast_2d(x) ** 2, axis=-1)


def coulomb_potential(x: np.ndarray, charge: float = 1.0) -> np.ndarray:
    return -charge / np.linalg.norm(np.atleast_2d(x), axis=-1)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ModelError("non-finite values in inner product")


def inner_product(f, g, rho: Optional[Measure] = None) -> float:
    """``<f, g>_rho``.

    With ``FiniteWeights`` the full vectors over the space are expected and
    the weighted sum is exact.  For any other measure (or ``None``) ``f`` and
    ``g`` are values on a batch drawn from the measure and the sample mean of
    ``f*g`` is returned.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != g.shape:
        raise ModelError(f"mismatched shapes {f.shape} and {g.shape}")
    _check_finite(f, g)
    if isinstance(rho, FiniteWeights):
        if f.shape[0] != rho.weights.size:
            raise ModelError("function length does not match the measure")
        return float(np.tensordot(rho.weights, f * g, axes=(0, 0)))
    return float(np.mean(f * g, axis=0))


def norm(f, rho: Optional[Measure] = None) -> float:
    return float(np.sqrt(inner_product(f, f, rho)))


def apply_hamiltonian(h: Hamiltonian, ansatz, theta: np.ndarray, x) -> np.ndarray:
    """``(H psi_theta)(x)`` for a batch of points."""
    if isinstance(h, MatrixHamiltonian):
        if not hasattr(ansatz, "space") or not isinstance(ansatz.space, FiniteSpace):
            raise ModelError("matrix Hamiltonian requires a finite-space ansatz")
        if ansatz.space.size != h.size:
            raise ModelError("Hamiltonian size does not match the space")
        x = ansatz.space.check_points(x)
        psi_all = ansatz.value(theta, ansatz.space.points)
        return (h.matrix @ psi_all)[x]
    if isinstance(h, SchrodingerHamiltonian):
        if not hasattr(ansatz, "laplacian_x"):
            raise ModelError("ansatz has no spatial Laplacian")
        x = np.asarray(x, dtype=float)
        lap = ansatz.laplacian_x(theta, x)
        return -h.kinetic_coefficient * lap + h.potential(x) * ansatz.value(theta, x)
    raise ModelError(f"unknown Hamiltonian {type(h).__name__}")


def ground_truth_spectrum(h: MatrixHamiltonian) -> tuple[float, np.ndarray]:
    """Lowest eigenpair by dense diagonalization.

    The eigenvector has unit norm and its first nonzero component positive.
    """
    if h.size > 512:
        raise ModelError("dense eigensolve limited to size <= 512")
    try:
        vals, vecs = np.linalg.eigh(h.matrix)
    except np.linalg.LinAlgError as exc:
        raise ModelError(f"eigensolver failed: {exc}") from exc
    e0 = float(vals[0])
    v = vecs[:, 0].copy()
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if v[nz[0]] < 0:
        v = -v
    return e0, v
