"""Energy minimization: local energy, Rayleigh quotient, gradient estimator, SGD loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ansatz import Ansatz, AnsatzError
from .model import FiniteSpace, MatrixHamiltonian, apply_hamiltonian
from .parallel import map_chunks
from .sampler import BornDensity, MetropolisSampler, SampleBatch, make_rng, sample_exact_finite
from .trace import TraceRow

DIVERGENCE_LIMIT = 1e8
STREAM_SAMPLE = 1
STREAM_MCMC = 2


class VmcError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule.

    ``constant``: ``eta0``.
    ``inverse_sqrt``: ``eta0 * sqrt(n / (m + 1))``.
    ``h4``: ``eta0 / sqrt(1 + m / m0)``.
    """

    kind: str
    eta0: float
    n: int = 1
    m0: float = 10000.0

    def __post_init__(self):
        if self.kind not in ("constant", "inverse_sqrt", "h4"):
            raise VmcError(f"unknown schedule {self.kind!r}")
        if not self.eta0 > 0:
            raise VmcError("eta0 must be positive")
        if self.kind == "h4" and not self.m0 > 0:
            raise VmcError("m0 must be positive")

    def __call__(self, m: int) -> float:
        if self.kind == "constant":
            return self.eta0
        if self.kind == "inverse_sqrt":
            return self.eta0 * math.sqrt(self.n / (m + 1))
        return self.eta0 / math.sqrt(1 + m / self.m0)


@dataclass
class GradientEstimate:
    g: np.ndarray
    n: int
    kind: str  # "vmc" | "directional" | "plugin"

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.g))


@dataclass
class EnergyReport:
    per_sample_energies: np.ndarray
    exact_L: Optional[float] = None

    @property
    def L_hat(self) -> float:
        return float(np.mean(self.per_sample_energies))


def local_energy(h, ansatz: Ansatz, theta, x) -> np.ndarray:
    """``(H psi)(x) / psi(x)``; raises where ``psi(x) = 0``."""
    psi = ansatz.value(theta, x)
    if np.any(psi == 0):
        raise VmcError("local energy undefined where psi = 0")
    return apply_hamiltonian(h, ansatz, theta, x) / psi


def _finite_values(h, ansatz, theta):
    if not isinstance(h, MatrixHamiltonian) or not isinstance(ansatz.space, FiniteSpace):
        raise VmcError("exact quantities need a matrix Hamiltonian on a finite space")
    psi = ansatz.value(theta, ansatz.space.points)
    if not np.any(psi != 0):
        raise VmcError("psi vanishes identically")
    return psi


def exact_energy(h: MatrixHamiltonian, ansatz: Ansatz, theta) -> float:
    """Rayleigh quotient ``<psi|H|psi> / <psi|psi>`` by full summation."""
    psi = _finite_values(h, ansatz, theta)
    return float(psi @ h.matrix @ psi / (psi @ psi))


def exact_grad_energy(h: MatrixHamiltonian, ansatz: Ansatz, theta) -> np.ndarray:
    """``2 E_p[(E_loc - L) grad log|psi|]`` summed over the support of ``p``."""
    psi = _finite_values(h, ansatz, theta)
    p = BornDensity.from_values(psi).weights
    support = np.flatnonzero(p > 0)
    e_loc = (h.matrix @ psi)[support] / psi[support]
    big_l = float(np.dot(p[support], e_loc))
    glog = ansatz.grad_log_abs(theta, support)
    return 2.0 * ((p[support] * (e_loc - big_l)) @ glog)


def grad_local_energy(h: MatrixHamiltonian, ansatz: Ansatz, theta, x) -> np.ndarray:
    """Parameter gradient of the local energy at finite-space points, shape ``(n, d)``."""
    pts = ansatz.space.points
    psi_all = ansatz.value(theta, pts)
    grad_all = ansatz.grad_theta(theta, pts)
    x = ansatz.space.check_points(x)
    psi = psi_all[x]
    if np.any(psi == 0):
        raise VmcError("local energy undefined where psi = 0")
    h_psi = (h.matrix @ psi_all)[x]
    h_grad = (h.matrix @ grad_all)[x]
    return (h_grad * psi[:, None] - h_psi[:, None] * grad_all[x]) / (psi ** 2)[:, None]


def vmc_gradient(local_energies, grad_log) -> np.ndarray:
    """``2/(n-1) * sum_i (E_i - mean(E)) * grad_log_i``."""
    e = np.asarray(local_energies, dtype=float)
    n = e.size
    if n < 2:
        raise VmcError("the gradient estimator needs n >= 2 samples")
    dev = e - np.mean(e)
    return (2.0 / (n - 1)) * (dev @ grad_log)


def evaluate_batch(h, ansatz: Ansatz, theta, points) -> SampleBatch:
    """Fill ``psi``, ``grad`` (log-derivative) and local energies for a batch."""
    def work(s):
        x = points[s]
        psi = ansatz.value(theta, x)
        if np.any(psi == 0):
            raise VmcError("a sample landed where psi = 0")
        glog = ansatz.grad_log_abs(theta, x)
        return psi, glog, apply_hamiltonian(h, ansatz, theta, x) / psi

    psi, glog, e_loc = map_chunks(work, len(points))
    return SampleBatch(points, psi=psi, grad=glog, local_energy=e_loc)


def grad_estimator(ansatz: Ansatz, theta, batch: SampleBatch) -> GradientEstimate:
    """Unbiased energy-gradient estimate from a batch carrying local energies."""
    if batch.local_energy is None:
        raise VmcError("batch has no local energies")
    if batch.n < 2:
        raise VmcError("the gradient estimator needs n >= 2 samples")
    glog = batch.grad
    if glog is None:
        glog = map_chunks(lambda s: ansatz.grad_log_abs(theta, batch.points[s]), batch.n)
    return GradientEstimate(vmc_gradient(batch.local_energy, glog), batch.n, "vmc")


def vmc_estimator_fn(h: MatrixHamiltonian, ansatz: Ansatz, theta) -> Callable:
    """Closure mapping an index tuple to the estimator value (for enumeration)."""
    pts = ansatz.space.points
    psi = ansatz.value(theta, pts)
    nz = psi != 0
    e_loc = np.full(pts.size, np.nan)
    e_loc[nz] = (h.matrix @ psi)[nz] / psi[nz]
    glog = np.full((pts.size, ansatz.num_params), np.nan)
    glog[nz] = ansatz.grad_log_abs(theta, pts[nz])

    def estimator(idx):
        idx = np.asarray(idx)
        return vmc_gradient(e_loc[idx], glog[idx])

    return estimator


@dataclass
class TrainState:
    theta: np.ndarray
    step: int
    status: str = "ok"  # "ok" | "diverged"
    message: str = ""


@dataclass
class VmcProblem:
    """Everything one energy-minimization run needs.

    ``sampler`` is ``"exact"`` (finite spaces) or a :class:`MetropolisSampler`.
    ``exact_energy_fn``/``exact_grad_fn`` are optional oracles recorded in
    the trace; on finite spaces they default to full summation.
    """

    hamiltonian: object
    ansatz: Ansatz
    theta0: np.ndarray
    n: int
    schedule: Schedule
    steps: int
    seed: int = 0
    sampler: object = "exact"
    exact_energy_fn: Optional[Callable] = None
    exact_grad_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.n < 2:
            raise VmcError("batch size n must be >= 2")
        if self.steps < 1:
            raise VmcError("need at least one step")
        if isinstance(self.ansatz.space, FiniteSpace) and isinstance(self.hamiltonian, MatrixHamiltonian):
            if self.exact_energy_fn is None:
                self.exact_energy_fn = lambda t: exact_energy(self.hamiltonian, self.ansatz, t)
            if self.exact_grad_fn is None:
                self.exact_grad_fn = lambda t: exact_grad_energy(self.hamiltonian, self.ansatz, t)


def _draw(problem: VmcProblem, theta, m: int) -> np.ndarray:
    if isinstance(problem.sampler, str):
        if problem.sampler != "exact":
            raise VmcError(f"unknown sampler {problem.sampler!r}")
        dens = BornDensity.from_ansatz(problem.ansatz, theta)
        return sample_exact_finite(dens, problem.n, make_rng(problem.seed, STREAM_SAMPLE, m)).points
    return problem.sampler.draw(lambda x: problem.ansatz.value(theta, x)).points


def vmc_train(problem: VmcProblem, callback: Optional[Callable] = None):
    """Plain SGD on the energy with the unbiased gradient estimator.

    Returns ``(state, rows)``.  A non-finite quantity or ``|theta| > 1e8``
    stops the run with ``status="diverged"`` and a final diagnostic row.
    """
    theta = problem.ansatz.check_theta(problem.theta0).copy()
    rows = []
    runmin = math.inf
    prev = None
    state = TrainState(theta, 0)
    for m in range(problem.steps):
        eta = problem.schedule(m)
        try:
            points = _draw(problem, theta, m)
            batch = evaluate_batch(problem.hamiltonian, problem.ansatz, theta, points)
            est = grad_estimator(problem.ansatz, theta, batch)
        except (VmcError, AnsatzError, ValueError) as exc:
            rows.append(TraceRow(m, eta, energy_est=math.nan))
            return TrainState(theta, m, "diverged", str(exc)), rows
        g = est.g
        gnorm = est.norm
        runmin = min(runmin, gnorm)
        row = TraceRow(m, eta, energy_est=float(np.mean(batch.local_energy)),
                       grad_norm=gnorm, runmin_grad_norm=runmin)
        if problem.exact_energy_fn is not None:
            row.energy_exact = float(problem.exact_energy_fn(theta))
        if problem.exact_grad_fn is not None:
            row.grad_norm_exact = float(np.linalg.norm(problem.exact_grad_fn(theta)))
        if prev is not None:
            dtheta = np.linalg.norm(theta - prev[0])
            if dtheta > 0:
                row.lipschitz_est = float(np.linalg.norm(g - prev[1]) / dtheta)
        if isinstance(problem.sampler, MetropolisSampler):
            row.acceptance_rate = problem.sampler.acceptance_rate
        rows.append(row)
        if callback is not None:
            callback(m, theta, row)
        new_theta = theta - eta * g
        if not row.is_finite() or not np.all(np.isfinite(new_theta)) \
                or np.linalg.norm(new_theta) > DIVERGENCE_LIMIT:
            return TrainState(theta, m, "diverged", "non-finite value or |theta| above limit"), rows
        prev = (theta, g)
        theta = new_theta
        state = TrainState(theta, m + 1)
    return state, rows
