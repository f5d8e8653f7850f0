"""Scale-invariant supervised fitting of a wave function to a target.

The loss minimized is ``L(theta) = -<phi, psi>_rho / ||psi||_rho`` (no
absolute value, so the sign of the overlap matters).  The stochastic
gradient is the directional estimator

    G = 1/Z~^3 * 1/(n-1) * sum_j a_j grad psi(X_j),
    a_j = -||psi||_n^2 phi(X_j) + <phi, psi>_n psi(X_j),

whose expectation is ``(||psi||_rho / Z~)^3`` times the true gradient, so any
positive norm estimate ``Z~`` keeps it pointing the right way.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .ansatz import Ansatz, AnsatzError, MatrixMlpAnsatz
from .model import BoxSpace, FiniteWeights, Lebesgue, TargetInduced, inner_product
from .sampler import RhoSampler, make_rng
from .trace import TraceRow
from .vmc import DIVERGENCE_LIMIT, GradientEstimate, Schedule, TrainState

STREAM_RHO = 3
STREAM_NORM = 4
STREAM_EVAL = 5
STREAM_INIT = 6


class PretrainError(ValueError):
    pass


@dataclass(frozen=True)
class Target:
    """Function to fit and the measure the fit is judged under.

    ``phi`` is a vector over the space for finite measures, else a callable
    on ``(n, D)`` points.  ``eval_points``/``eval_weights`` (optional) define
    a fixed quadrature or sample set used to report angles on continuous
    spaces.
    """

    phi: object
    rho: object
    bound: Optional[float] = None
    eval_points: Optional[np.ndarray] = None
    eval_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if isinstance(self.rho, FiniteWeights):
            phi = np.asarray(self.phi, dtype=float)
            if phi.shape != self.rho.weights.shape:
                raise PretrainError("target vector does not match the measure")
            if not inner_product(phi, phi, self.rho) > 0:
                raise PretrainError("target has zero norm under rho")
            if self.bound is not None and np.max(np.abs(phi)) > self.bound:
                raise PretrainError("target exceeds its declared bound")
            object.__setattr__(self, "phi", phi)

    @property
    def finite(self) -> bool:
        return isinstance(self.rho, FiniteWeights)

    def values(self, x) -> np.ndarray:
        if self.finite:
            return self.phi[np.asarray(x)]
        return self.phi(x)


def _positive_norm(psi, rho=None) -> float:
    nrm = math.sqrt(inner_product(psi, psi, rho))
    if nrm == 0:
        raise PretrainError("trained function has zero norm")
    return nrm


def si_loss(psi, phi, rho=None) -> float:
    """``||phi||^2 - (<phi, psi> / ||psi||)^2``: squared distance from ``phi`` to the line through ``psi``."""
    npsi = _positive_norm(psi, rho)
    return inner_product(phi, phi, rho) - (inner_product(phi, psi, rho) / npsi) ** 2


def wavefunction_angle(psi, phi, rho=None) -> float:
    """Sine of the angle between ``psi`` and ``phi`` in ``L^2(rho)``."""
    npsi = _positive_norm(psi, rho)
    nphi = _positive_norm(phi, rho)
    u = np.asarray(psi, dtype=float) / npsi
    v = np.asarray(phi, dtype=float) / nphi
    cos = inner_product(v, u, rho)
    # norm of the component of u orthogonal to v; avoids sqrt(1 - cos^2) cancellation
    return min(1.0, math.sqrt(max(0.0, inner_product(u - cos * v, u - cos * v, rho))))


def objective(ansatz: Ansatz, theta, target: Target) -> float:
    """``-<phi, psi> / ||psi||`` by full summation (finite targets)."""
    if not target.finite:
        raise PretrainError("exact objective needs a finite target")
    psi = ansatz.value(theta, ansatz.space.points)
    return -inner_product(target.phi, psi, target.rho) / _positive_norm(psi, target.rho)


def exact_grad_supervised(ansatz: Ansatz, theta, target: Target) -> np.ndarray:
    """Exact gradient of :func:`objective` by full summation."""
    if not target.finite:
        raise PretrainError("exact gradient needs a finite target")
    pts = ansatz.space.points
    psi = ansatz.value(theta, pts)
    grad = ansatz.grad_theta(theta, pts)
    w = target.rho.weights
    z = _positive_norm(psi, target.rho)
    phi_grad = (w * target.phi) @ grad
    psi_grad = (w * psi) @ grad
    overlap = float(np.dot(w, target.phi * psi))
    return -phi_grad / z + overlap * psi_grad / z ** 3


def coefficients(psi, phi) -> np.ndarray:
    """``a_j = -||psi||_n^2 phi_j + <phi, psi>_n psi_j`` over a batch."""
    psi = np.asarray(psi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return -np.mean(psi * psi) * phi + np.mean(phi * psi) * psi


def directional_gradient(psi, phi, grad_psi, z_tilde: float) -> np.ndarray:
    n = len(psi)
    if n < 2:
        raise PretrainError("the estimator needs n >= 2 samples")
    if not z_tilde > 0:
        raise PretrainError("norm estimate must be positive")
    return (coefficients(psi, phi) @ grad_psi) / ((n - 1) * z_tilde ** 3)


def directional_estimator(ansatz: Ansatz, theta, points, target: Target, z_tilde: float) -> GradientEstimate:
    """Directionally unbiased gradient estimate on a batch from ``rho``."""
    psi, grad = ansatz.value_and_grad(theta, points)
    g = directional_gradient(psi, target.values(points), grad, z_tilde)
    return GradientEstimate(g, len(psi), "directional")


def plugin_gradient(psi1, phi1, grad1, psi2, phi2, z_tilde: float) -> np.ndarray:
    """Two-sample plug-in estimate whose norm estimate enters with unequal powers."""
    if not z_tilde > 0:
        raise PretrainError("norm estimate must be positive")
    return -phi1 * grad1 / z_tilde + phi2 * psi2 * psi1 * grad1 / z_tilde ** 3


def plugin_biased_estimator(ansatz: Ansatz, theta, x1, x2, target: Target, z_tilde: float) -> GradientEstimate:
    """Naive plug-in gradient; biased in direction unless ``z_tilde`` is the exact norm."""
    pts = np.concatenate([np.atleast_1d(x1), np.atleast_1d(x2)], axis=0)
    psi, grad = ansatz.value_and_grad(theta, pts)
    phi = target.values(pts)
    return GradientEstimate(plugin_gradient(psi[0], phi[0], grad[0], psi[1], phi[1], z_tilde), 2, "plugin")


def directional_estimator_fn(ansatz: Ansatz, theta, target: Target, z_tilde: float) -> Callable:
    """Closure over index tuples for exact enumeration on finite spaces."""
    pts = ansatz.space.points
    psi = ansatz.value(theta, pts)
    grad = ansatz.grad_theta(theta, pts)
    phi = target.phi

    def estimator(idx):
        idx = np.asarray(idx)
        return directional_gradient(psi[idx], phi[idx], grad[idx], z_tilde)

    return estimator


def plugin_estimator_fn(ansatz: Ansatz, theta, target: Target, z_tilde: float) -> Callable:
    pts = ansatz.space.points
    psi = ansatz.value(theta, pts)
    grad = ansatz.grad_theta(theta, pts)
    phi = target.phi

    def estimator(idx):
        i, j = idx
        return plugin_gradient(psi[i], phi[i], grad[i], psi[j], phi[j], z_tilde)

    return estimator


@dataclass(frozen=True)
class NormEstimate:
    z_tilde: float
    strategy: str
    refreshed: bool = True


class NormEstimator:
    """Norm estimate ``Z~`` for ``||psi_theta||_rho``.

    ``same``: root-mean-square of ``psi`` on the training batch.
    ``independent``: the same on a fresh batch of ``n`` samples.
    ``periodic``: the same on ``K`` fresh samples, refreshed when
    ``m % K == 0`` and reused otherwise.
    """

    def __init__(self, strategy: str = "same", n: Optional[int] = None, period: int = 100):
        if strategy not in ("same", "independent", "periodic"):
            raise PretrainError(f"unknown norm strategy {strategy!r}")
        if strategy == "independent" and (n is None or n < 1):
            raise PretrainError("independent strategy needs n >= 1")
        if strategy == "periodic" and period < 1:
            raise PretrainError("periodic strategy needs K >= 1")
        self.strategy = strategy
        self.n = n
        self.period = period
        self._last: Optional[float] = None

    @staticmethod
    def _rms(psi) -> float:
        z = float(np.sqrt(np.mean(np.square(psi))))
        if z == 0:
            raise PretrainError("psi vanishes on the norm-estimation batch")
        return z

    def estimate(self, m: int, ansatz: Ansatz, theta, batch_psi, draw: Callable[[int], np.ndarray]) -> NormEstimate:
        """``draw(k)`` returns ``k`` fresh points from ``rho``."""
        if self.strategy == "same":
            return NormEstimate(self._rms(batch_psi), "same")
        if self.strategy == "independent":
            return NormEstimate(self._rms(ansatz.value(theta, draw(self.n))), "independent")
        if m % self.period == 0 or self._last is None:
            self._last = self._rms(ansatz.value(theta, draw(self.period)))
            return NormEstimate(self._last, "periodic", True)
        return NormEstimate(self._last, "periodic", False)


def norm_estimate(strategy: str, ansatz: Ansatz, theta, rho, rng, m: int = 0, n: int = 16,
                  period: int = 100, batch_psi=None) -> NormEstimate:
    """Stateless convenience wrapper around :class:`NormEstimator` for a single step."""
    sampler = RhoSampler(rho, period if strategy == "periodic" else n, rng)
    est = NormEstimator(strategy, n, period)
    if batch_psi is None:
        batch_psi = ansatz.value(theta, sampler.draw().points)
    return est.estimate(m, ansatz, theta, batch_psi, lambda k: sampler.draw(k).points)


@dataclass
class PretrainProblem:
    ansatz: Ansatz
    target: Target
    theta0: np.ndarray
    n: int
    schedule: Schedule
    steps: int
    seed: int = 0
    strategy: str = "same"
    period: int = 100
    burn_in: int = 500
    thinning: int = 10

    def __post_init__(self):
        if self.n < 2:
            raise PretrainError("batch size n must be >= 2")
        if self.steps < 1:
            raise PretrainError("need at least one step")


def pretrain_train(problem: PretrainProblem, callback: Optional[Callable] = None):
    """SGD on ``-<phi, psi>/||psi||`` with the directional estimator.

    Returns ``(state, rows)``.  Finite targets record exact loss, gradient
    norm and the ratio ``||psi||_rho / Z~``; continuous targets report the
    angle on ``target.eval_points`` when given.
    """
    ansatz, target = problem.ansatz, problem.target
    theta = ansatz.check_theta(problem.theta0).copy()
    sampler = RhoSampler(target.rho, problem.n, make_rng(problem.seed, STREAM_RHO),
                         problem.burn_in, problem.thinning)
    side = None
    if problem.strategy != "same":
        side_n = problem.n if problem.strategy == "independent" else problem.period
        side = RhoSampler(target.rho, side_n, make_rng(problem.seed, STREAM_NORM),
                          problem.burn_in, problem.thinning)

    def draw_side(k):
        return side.draw(k).points

    estimator = NormEstimator(problem.strategy, problem.n, problem.period)
    rows, runmin, prev = [], math.inf, None
    state = TrainState(theta, 0)
    for m in range(problem.steps):
        eta = problem.schedule(m)
        try:
            batch = sampler.draw()
            psi, grad = ansatz.value_and_grad(theta, batch.points)
            phi = target.values(batch.points)
            ne = estimator.estimate(m, ansatz, theta, psi, draw_side)
            g = directional_gradient(psi, phi, grad, ne.z_tilde)
        except (PretrainError, AnsatzError, ValueError) as exc:
            rows.append(TraceRow(m, eta, loss_est=math.nan))
            return TrainState(theta, m, "diverged", str(exc)), rows
        gnorm = float(np.linalg.norm(g))
        runmin = min(runmin, gnorm)
        rms = math.sqrt(float(np.mean(psi * psi)))
        row = TraceRow(m, eta, loss_est=-float(np.mean(phi * psi)) / rms if rms > 0 else math.nan,
                       grad_norm=gnorm, runmin_grad_norm=runmin, z_tilde=ne.z_tilde)
        if target.finite:
            psi_all = ansatz.value(theta, ansatz.space.points)
            row.loss_exact = objective(ansatz, theta, target)
            row.grad_norm_exact = float(np.linalg.norm(exact_grad_supervised(ansatz, theta, target)))
            row.si_loss = si_loss(psi_all, target.phi, target.rho)
            row.angle = wavefunction_angle(psi_all, target.phi, target.rho)
            row.norm_ratio = _positive_norm(psi_all, target.rho) / ne.z_tilde
        elif target.eval_points is not None:
            psi_e = ansatz.value(theta, target.eval_points)
            phi_e = target.values(target.eval_points)
            w = FiniteWeights(target.eval_weights) if target.eval_weights is not None else None
            row.si_loss = si_loss(psi_e, phi_e, w)
            row.angle = wavefunction_angle(psi_e, phi_e, w)
        row.acceptance_rate = sampler.acceptance_rate
        if prev is not None:
            dtheta = np.linalg.norm(theta - prev[0])
            if dtheta > 0:
                row.lipschitz_est = float(np.linalg.norm(g - prev[1]) / dtheta)
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


# ---------------------------------------------------------------------------
# Orbital-matrix losses.  Shapes: y (B, N, N, K) with y[b, i, j, k] orbital j
# of determinant k at electron i of sample b; Phi (B, N, N) with
# Phi[b, i, j] = phi_j(x_{b, i}).  A "column" (j, k) is the vector over all
# (b, i) pairs.
# ---------------------------------------------------------------------------

def _check_orbital_shapes(y, phi):
    y = np.asarray(y, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if y.ndim != 4 or phi.ndim != 3 or y.shape[:3] != phi.shape:
        raise PretrainError(f"shape mismatch: y {y.shape} vs Phi {phi.shape}")
    if y.shape[0] < 1:
        raise PretrainError("empty batch")
    return y, phi


def columnwise_si_loss(y, phi, normalize_target: bool = True, return_grad: bool = False):
    """Sum over columns of ``1 - (y.phi)^2 / (|y|^2 |phi|^2)``.

    With ``normalize_target=False`` the ``|phi|^2`` factor is dropped and
    each term reads ``1 - (y.phi)^2 / |y|^2``.  Either way the loss is
    invariant to rescaling any column of ``y``.
    """
    y, phi = _check_orbital_shapes(y, phi)
    p = phi[..., None]
    dot = np.sum(y * p, axis=(0, 1))              # (N, K)
    yy = np.sum(y * y, axis=(0, 1))
    if np.any(yy == 0):
        raise PretrainError("an output column is identically zero")
    pp = np.sum(p * p, axis=(0, 1)) if normalize_target else np.ones_like(yy)
    if np.any(pp == 0):
        raise PretrainError("a target column is identically zero")
    loss = float(np.sum(1.0 - dot ** 2 / (yy * pp)))
    if not return_grad:
        return loss
    coef = -2.0 * dot / (yy * pp)
    grad = coef * (p - (dot / yy) * y)
    return loss, grad


def mse_orbital_loss(y, phi, return_grad: bool = False):
    """``sum_{k,b,i,j} (y - Phi)^2``; not scale-invariant."""
    y, phi = _check_orbital_shapes(y, phi)
    r = y - phi[..., None]
    loss = float(np.sum(r * r))
    if not return_grad:
        return loss
    return loss, 2.0 * r


def hermite_orbitals(n: int) -> Callable[[np.ndarray], np.ndarray]:
    """First ``n`` harmonic-oscillator eigenfunctions; ``f(x)[..., j] = h_j(x)``."""
    def orbitals(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (n,))
        g = np.pi ** -0.25 * np.exp(-0.5 * x * x)
        h_prev, h = np.zeros_like(x), g
        for j in range(n):
            out[..., j] = h
            h_prev, h = h, math.sqrt(2 / (j + 1)) * x * h - math.sqrt(j / (j + 1)) * h_prev
        return out

    return orbitals


def slater_value(orbitals: Callable, x) -> np.ndarray:
    """``det[phi_j(x_i)]`` for ``x`` of shape ``(B, N)``."""
    return np.linalg.det(orbitals(x))


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad, lr: Optional[float] = None):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return theta - (self.lr if lr is None else lr) * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class OrbitalProblem:
    """Fit per-electron orbital outputs of a :class:`MatrixMlpAnsatz` to target orbitals.

    ``loss`` is ``"si"`` (column-wise scale-invariant) or ``"mse"``.  The
    reported angle compares ``sum_k det y^(k)`` with ``det Phi`` under
    ``|det Phi|^2`` on a fixed evaluation sample.
    """

    ansatz: MatrixMlpAnsatz
    target_orbitals: Callable
    box: BoxSpace
    theta0: np.ndarray
    batch: int
    schedule: Schedule
    steps: int
    loss: str = "si"
    optimizer: str = "adam"
    rho: str = "target"
    seed: int = 0
    eval_size: int = 2048
    burn_in: int = 500
    thinning: int = 10

    def __post_init__(self):
        if self.loss not in ("si", "mse"):
            raise PretrainError(f"unknown orbital loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise PretrainError(f"unknown optimizer {self.optimizer!r}")
        if self.rho not in ("target", "lebesgue"):
            raise PretrainError(f"unknown rho {self.rho!r}")

    def target_measure(self):
        return TargetInduced(lambda x: slater_value(self.target_orbitals, x), self.box)


def orbital_eval_set(problem: OrbitalProblem) -> np.ndarray:
    """Fixed sample from ``|det Phi|^2``; depends only on the seed."""
    s = RhoSampler(problem.target_measure(), problem.eval_size, make_rng(problem.seed, STREAM_EVAL),
                   problem.burn_in, problem.thinning)
    return s.draw().points


def orbital_pretrain(problem: OrbitalProblem, eval_points: Optional[np.ndarray] = None):
    """Run orbital pre-training; returns ``(state, rows)``."""
    ansatz = problem.ansatz
    theta = np.array(problem.theta0, dtype=float)
    measure = problem.target_measure() if problem.rho == "target" else Lebesgue(problem.box)
    sampler = RhoSampler(measure, problem.batch, make_rng(problem.seed, STREAM_RHO),
                         problem.burn_in, problem.thinning)
    if eval_points is None:
        eval_points = orbital_eval_set(problem)
    phi_eval = slater_value(problem.target_orbitals, eval_points)
    opt = Adam(problem.schedule.eta0) if problem.optimizer == "adam" else None
    rows, runmin = [], math.inf
    for m in range(problem.steps):
        eta = problem.schedule(m)
        x = sampler.draw().points
        y, cache = ansatz.orbitals(theta, x)
        phi = problem.target_orbitals(x)
        if problem.loss == "si":
            loss, dy = columnwise_si_loss(y, phi, return_grad=True)
        else:
            loss, dy = mse_orbital_loss(y, phi, return_grad=True)
            loss, dy = loss / x.shape[0], dy / x.shape[0]
        g = ansatz.loss_grad(theta, cache, dy)
        gnorm = float(np.linalg.norm(g))
        runmin = min(runmin, gnorm)
        psi_eval = ansatz.value(theta, eval_points)
        angle = wavefunction_angle(psi_eval, phi_eval) if np.any(psi_eval != 0) else 1.0
        rows.append(TraceRow(m, eta, loss_est=loss, grad_norm=gnorm, runmin_grad_norm=runmin, angle=angle))
        new_theta = opt.step(theta, g, eta) if opt is not None else theta - eta * g
        if not rows[-1].is_finite() or not np.all(np.isfinite(new_theta)) \
                or np.linalg.norm(new_theta) > DIVERGENCE_LIMIT:
            return TrainState(theta, m, "diverged", "non-finite value or |theta| above limit"), rows
        theta = new_theta
    return TrainState(theta, problem.steps), rows
