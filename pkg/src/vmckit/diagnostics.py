"""Convergence diagnostics over training traces.

Theorem-style bounds are checked as ledgers: the constants in the bounds
are only known to exist, so they are fitted on part of a run and the
inequality is verified on the rest.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import FiniteSpace, FiniteWeights, MatrixHamiltonian, apply_hamiltonian
from .sampler import BornDensity, _categorical

DEFAULT_BURN_IN = 200


class DiagnosticsError(ValueError):
    pass


def running_min(series) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise DiagnosticsError("empty series")
    return np.minimum.accumulate(x)


@dataclass(frozen=True)
class ConvergenceFit:
    slope: float
    intercept: float
    burn_in_step: int
    n_points: int


def loglog_slope(values, burn_in: int = DEFAULT_BURN_IN, steps=None) -> ConvergenceFit:
    """Least-squares slope of ``log(value)`` against ``log(step)`` for ``step >= burn_in``.

    ``steps`` defaults to ``0, 1, 2, ...``; step 0 is never used.
    """
    v = np.asarray(values, dtype=float)
    s = np.arange(v.size, dtype=float) if steps is None else np.asarray(steps, dtype=float)
    keep = (s >= max(burn_in, 1))
    v, s = v[keep], s[keep]
    if v.size < 10:
        raise DiagnosticsError(f"need at least 10 points after burn-in, got {v.size}")
    if np.any(~(v > 0)):
        raise DiagnosticsError("log-log fit needs strictly positive values")
    slope, intercept = np.polyfit(np.log(s), np.log(v), 1)
    return ConvergenceFit(float(slope), float(intercept), int(burn_in), int(v.size))


def lipschitz_estimate(g_prev, g_curr, theta_prev, theta_curr) -> float:
    """``|G(theta') - G(theta)| / |theta' - theta|``."""
    d = np.linalg.norm(np.asarray(theta_curr, float) - np.asarray(theta_prev, float))
    if d == 0:
        raise DiagnosticsError("zero parameter displacement")
    return float(np.linalg.norm(np.asarray(g_curr, float) - np.asarray(g_prev, float)) / d)


@dataclass
class AssumptionMoments:
    """Moments whose uniform bound is the constant ``C_psi``.

    Energy minimization: ``e4``, ``de2``, ``dpsi4``, ``hess2``.
    Supervised fitting: ``v``, ``g``, ``h``.
    Unavailable entries (no parameter Hessian) are ``None``.
    """

    values: dict
    stderr: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def max(self) -> float:
        return max(v for v in self.values.values() if v is not None)


def _mc_root(q, k):
    """``mean(q)^(1/k)`` with a delta-method standard error."""
    mean = float(np.mean(q))
    val = mean ** (1.0 / k)
    if q.size < 2 or mean == 0:
        return val, 0.0
    se_mean = float(np.std(q, ddof=1) / math.sqrt(q.size))
    return val, se_mean * val / (k * mean)


def assumption_moments_vmc(h, ansatz, theta, points=None, fd_step: float = 1e-5) -> AssumptionMoments:
    """Energy-minimization moments under ``p_theta``.

    Exact on finite spaces (``points=None``); otherwise Monte Carlo over
    ``points`` drawn from ``p_theta``.  The gradient of ``H psi`` is taken
    analytically for matrix Hamiltonians and by central differences in
    ``theta`` otherwise.
    """
    theta = ansatz.check_theta(theta)
    if points is None:
        if not (isinstance(ansatz.space, FiniteSpace) and isinstance(h, MatrixHamiltonian)):
            raise DiagnosticsError("exact moments need a finite space")
        pts = ansatz.space.points
        psi_all = ansatz.value(theta, pts)
        p = BornDensity.from_values(psi_all).weights
        support = np.flatnonzero(p > 0)
        w = p[support]
        psi = psi_all[support]
        grad_all = ansatz.grad_theta(theta, pts)
        e_loc = (h.matrix @ psi_all)[support] / psi
        h_grad = (h.matrix @ grad_all)[support] / psi[:, None]
        glog = grad_all[support] / psi[:, None]
        x = support
    else:
        x = points
        psi = ansatz.value(theta, x)
        if np.any(psi == 0):
            raise DiagnosticsError("psi vanishes at a probed point")
        w = None
        e_loc = apply_hamiltonian(h, ansatz, theta, x) / psi
        cols = []
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = fd_step
            cols.append((apply_hamiltonian(h, ansatz, theta + e, x)
                         - apply_hamiltonian(h, ansatz, theta - e, x)) / (2 * fd_step))
        h_grad = np.stack(cols, axis=-1) / psi[:, None]
        glog = ansatz.grad_log_abs(theta, x)
    terms = {
        "e4": (e_loc ** 4, 4),
        "de2": (np.sum(h_grad ** 2, axis=1), 2),
        "dpsi4": (np.sum(glog ** 2, axis=1) ** 2, 4),
    }
    if ansatz.has_hessian:
        hess = ansatz.hessian_theta(theta, x) / psi[:, None, None]
        terms["hess2"] = (np.linalg.norm(hess, ord=2, axis=(1, 2)) ** 2, 2)
    values, stderr = {"hess2": None}, {}
    for name, (q, k) in terms.items():
        if w is not None:
            values[name] = float(np.dot(w, q)) ** (1.0 / k)
        else:
            values[name], stderr[name] = _mc_root(q, k)
    return AssumptionMoments(values, stderr)


def assumption_moments_pretrain(ansatz, theta, rho=None, points=None) -> AssumptionMoments:
    """Supervised-fitting moments, each divided by ``||psi||_rho``.

    Exact for ``FiniteWeights`` with ``points=None``; Monte Carlo otherwise.
    """
    theta = ansatz.check_theta(theta)
    if points is None:
        if not isinstance(rho, FiniteWeights):
            raise DiagnosticsError("exact moments need finite weights")
        x = ansatz.space.points
        w = rho.weights
    else:
        x, w = points, None
    psi, grad = ansatz.value_and_grad(theta, x)
    mean = (lambda q: float(np.dot(w, q))) if w is not None else (lambda q: float(np.mean(q)))
    z = math.sqrt(mean(psi ** 2))
    if z == 0:
        raise DiagnosticsError("psi has zero norm")
    values = {
        "v": mean(psi ** 4) ** 0.25 / z,
        "g": mean(np.sum(grad ** 2, axis=1) ** 2) ** 0.25 / z,
        "h": None,
    }
    if ansatz.has_hessian:
        hn = np.linalg.norm(ansatz.hessian_theta(theta, x), ord=2, axis=(1, 2))
        values["h"] = mean(hn ** 4) ** 0.25 / z
    return AssumptionMoments(values)


class RunningMax:
    """Empirical ``C_psi``: running maximum of all observed moments."""

    def __init__(self):
        self.value = 0.0
        self.history = []

    def update(self, moments: AssumptionMoments) -> float:
        self.value = max(self.value, moments.max())
        self.history.append(self.value)
        return self.value


# ---------------------------------------------------------------------------
# Variance scaling
# ---------------------------------------------------------------------------

def vmc_batch_sampler(h, ansatz, theta) -> Callable:
    """Vectorized draws of the energy-gradient estimator on a finite space.

    Returns ``draw(n, reps, rng) -> (reps, d)``.
    """
    pts = ansatz.space.points
    psi = ansatz.value(theta, pts)
    p = BornDensity.from_values(psi).weights
    nz = psi != 0
    e_loc = np.zeros(pts.size)
    e_loc[nz] = (h.matrix @ psi)[nz] / psi[nz]
    glog = np.zeros((pts.size, ansatz.num_params))
    glog[nz] = ansatz.grad_log_abs(theta, pts[nz])

    def draw(n, reps, rng):
        idx = _categorical(p, n * reps, rng).reshape(reps, n)
        e = e_loc[idx]
        dev = e - e.mean(axis=1, keepdims=True)
        return (2.0 / (n - 1)) * np.einsum("rn,rnd->rd", dev, glog[idx])

    return draw


def directional_batch_sampler(ansatz, theta, target, strategy: str = "same",
                              z_tilde: Optional[float] = None) -> Callable:
    """Vectorized draws of the directional estimator on a finite space.

    ``strategy`` is ``"same"``, ``"independent"`` or ``"fixed"`` (use ``z_tilde``).
    """
    pts = ansatz.space.points
    psi = ansatz.value(theta, pts)
    grad = ansatz.grad_theta(theta, pts)
    phi = target.phi
    w = target.rho.weights

    def draw(n, reps, rng):
        idx = _categorical(w, n * reps, rng).reshape(reps, n)
        ps, ph = psi[idx], phi[idx]
        a = -np.mean(ps * ps, axis=1, keepdims=True) * ph + np.mean(ph * ps, axis=1, keepdims=True) * ps
        if strategy == "fixed":
            z = np.full(reps, float(z_tilde))
        elif strategy == "same":
            z = np.sqrt(np.mean(ps * ps, axis=1))
        elif strategy == "independent":
            idx2 = _categorical(w, n * reps, rng).reshape(reps, n)
            z = np.sqrt(np.mean(psi[idx2] ** 2, axis=1))
        else:
            raise DiagnosticsError(f"unknown strategy {strategy!r}")
        return np.einsum("rn,rnd->rd", a, grad[idx]) / ((n - 1) * z ** 3)[:, None]

    return draw


@dataclass
class VarianceTable:
    n: np.ndarray
    variance: np.ndarray
    mean: np.ndarray  # (len(n), d) mean estimate per batch size
    reps: int

    def slope(self) -> float:
        return float(np.polyfit(np.log(self.n), np.log(self.variance), 1)[0])


def variance_vs_n(draw: Callable, n_list: Sequence[int], reps: int, rng) -> VarianceTable:
    """Empirical total variance ``E|G - E G|^2`` of an estimator for each batch size."""
    if reps < 100:
        raise DiagnosticsError("need reps >= 100")
    var, means = [], []
    for n in n_list:
        g = draw(int(n), reps, rng)
        mu = g.mean(axis=0)
        var.append(float(np.sum((g - mu) ** 2) / (reps - 1)))
        means.append(mu)
    return VarianceTable(np.asarray(n_list, dtype=float), np.array(var), np.array(means), reps)


# ---------------------------------------------------------------------------
# Theorem ledgers
# ---------------------------------------------------------------------------

@dataclass
class LedgerReport:
    lhs: np.ndarray               # cumulative sum eta_m |grad L(theta_m)|^2
    noise_sum: np.ndarray         # cumulative sum eta_m^2 / n
    base: float                   # 2 C_r^2 (L(theta_0) - loss floor)
    fitted_constant: float
    max_ratio_second_half: float
    lhs_growth_ratio: float
    passed: bool

    def text(self) -> str:
        return "\n".join([
            f"base term             {self.base:.6g}",
            f"fitted constant C     {self.fitted_constant:.6g}",
            f"final LHS             {self.lhs[-1]:.6g}",
            f"final sum eta^2/n     {self.noise_sum[-1]:.6g}",
            f"max LHS/RHS (2nd half) {self.max_ratio_second_half:.6g}",
            f"LHS growth M/2 -> M   {self.lhs_growth_ratio:.6g}",
            f"status                {'PASS' if self.passed else 'FAIL'}",
        ])


def theorem_ledger(grad_norms, etas, n: int, loss0: float, loss_floor: float = 0.0,
                   c_r: float = 1.0) -> LedgerReport:
    """Split-sample check of ``sum eta |grad L|^2 <= 2 C_r^2 (L0 - floor) + C sum eta^2 / n``.

    ``C`` is the smallest constant making the inequality hold on the first
    half of the run; the ledger passes when it still holds on the second
    half.  ``loss_floor`` is a lower bound of the loss (the bound is
    stated for nonnegative losses).
    """
    g = np.asarray(grad_norms, dtype=float)
    eta = np.asarray(etas, dtype=float)
    if g.shape != eta.shape or g.size < 2:
        raise DiagnosticsError("need matching gradient and step-size series of length >= 2")
    lhs = np.cumsum(eta * g * g)
    noise = np.cumsum(eta * eta / n)
    base = 2.0 * c_r ** 2 * (loss0 - loss_floor)
    half = g.size // 2
    c_hat = max(0.0, float(np.max((lhs[:half] - base) / noise[:half])))
    rhs = base + c_hat * noise[half:]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs[half:] / rhs, np.where(lhs[half:] > 0, np.inf, 0.0))
    max_ratio = float(np.max(ratio))
    growth = float(lhs[-1] / lhs[half - 1]) if lhs[half - 1] > 0 else 1.0
    return LedgerReport(lhs, noise, base, c_hat, max_ratio, growth, max_ratio <= 1.0 + 1e-12)


def lipschitz_bound_check(lipschitz, c_psi, fit_fraction: float = 0.5) -> dict:
    """Fit ``C'`` in ``Lip <= C' (C_psi^4 + 1)`` on the leading part of a run, test the rest."""
    lip = np.asarray(lipschitz, dtype=float)
    c = np.broadcast_to(np.asarray(c_psi, dtype=float), lip.shape)
    ok = np.isfinite(lip)
    lip, c = lip[ok], c[ok]
    if lip.size < 4:
        raise DiagnosticsError("too few Lipschitz estimates")
    k = max(1, int(fit_fraction * lip.size))
    scale = c ** 4 + 1
    c_prime = float(np.max(lip[:k] / scale[:k]))
    bound = c_prime * scale[k:]
    frac = float(np.mean(lip[k:] <= bound))
    return {"c_prime": c_prime, "fraction_below": frac, "max_estimate": float(np.max(lip))}
