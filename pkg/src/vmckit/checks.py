"""Self-check suite run by ``vmckit verify``.

Each check compares an implementation against an independent oracle on
small random fixtures and reports the worst error against a tolerance.
``inject`` swaps in a broken ingredient so the suite can demonstrate that
the relevant check notices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .ansatz import (ExpFamilyAnsatz, MlpAnsatz, ScaledAnsatz, TableAnsatz, finite_diff_gradient,
                     gaussian_feature, laplacian_fallback, radial_feature)
from .diagnostics import assumption_moments_pretrain, assumption_moments_vmc
from .model import (BoxSpace, FiniteSpace, FiniteWeights, MatrixHamiltonian, SchrodingerHamiltonian,
                    coulomb_potential, ground_truth_spectrum, inner_product, random_symmetric_hamiltonian)
from .oracle import enumerate_expectation, exact_norm, fd_gradient, vector_angle
from .pretrain import (Target, columnwise_si_loss, directional_estimator_fn, exact_grad_supervised,
                       mse_orbital_loss, objective, plugin_estimator_fn, si_loss, wavefunction_angle)
from .sampler import BornDensity, make_rng
from .vmc import (exact_energy, exact_grad_energy, grad_local_energy, local_energy,
                  vmc_estimator_fn)

INJECTIONS = ("asymmetric-hamiltonian", "plugin-estimator")
N_FIXTURES = 50
SCALES = (-3.0, 0.01, 7.0)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name:<34} error={self.error:.3e}  tol={self.tolerance:.0e}{extra}"


def _result(name, error, tol, detail="") -> CheckResult:
    return CheckResult(name, float(error), tol, bool(error <= tol), detail)


def finite_fixture(seed: int, size: Optional[int] = None, n: Optional[int] = None):
    """Random ``(space, ansatz, theta, H, n)`` with ``|theta_x| >= 0.2``."""
    rng = make_rng(seed, 99)
    s = size if size is not None else 2 + seed % 4
    space = FiniteSpace(s)
    theta = rng.uniform(0.2, 1.5, s) * rng.choice([-1.0, 1.0], s)
    h = random_symmetric_hamiltonian(s, rng)
    return space, TableAnsatz(space), theta, h, (n if n is not None else 2 + seed % 2), rng


def random_target(space: FiniteSpace, rng) -> Target:
    w = rng.dirichlet(np.ones(space.size))
    return Target(rng.standard_normal(space.size), FiniteWeights(w))


def check_vmc_unbiased() -> CheckResult:
    worst = 0.0
    for seed in range(N_FIXTURES):
        space, ans, theta, h, n, _ = finite_fixture(seed)
        p = BornDensity.from_ansatz(ans, theta).weights
        got = enumerate_expectation(vmc_estimator_fn(h, ans, theta), p, n)
        worst = max(worst, float(np.max(np.abs(got - exact_grad_energy(h, ans, theta)))))
    return _result("energy estimator unbiased", worst, 1e-10, f"{N_FIXTURES} fixtures")


def check_local_energy_gradient_mean(inject: Optional[str] = None) -> CheckResult:
    worst = 0.0
    for seed in range(N_FIXTURES):
        space, ans, theta, h, n, rng = finite_fixture(seed)
        if inject == "asymmetric-hamiltonian":
            h = MatrixHamiltonian(rng.standard_normal((space.size, space.size)), check=False)
        p = BornDensity.from_ansatz(ans, theta).weights
        grads = grad_local_energy(h, ans, theta, space.points)
        worst = max(worst, float(np.max(np.abs(p @ grads))))
    return _result("local-energy gradient has mean 0", worst, 1e-10)


def check_directional_unbiased(inject: Optional[str] = None) -> CheckResult:
    worst = 0.0
    for seed in range(N_FIXTURES):
        space, ans, theta, _, n, rng = finite_fixture(seed)
        target = random_target(space, rng)
        z = exact_norm(ans, theta, target.rho)
        grad = exact_grad_supervised(ans, theta, target)
        for factor in (0.5, 1.0, 2.0):
            zt = factor * z
            if inject == "plugin-estimator":
                fn, m = plugin_estimator_fn(ans, theta, target, zt), 2
            else:
                fn, m = directional_estimator_fn(ans, theta, target, zt), n
            got = enumerate_expectation(fn, target.rho.weights, m)
            worst = max(worst, float(np.max(np.abs(got - (z / zt) ** 3 * grad))))
    return _result("directional estimator E[G] ~ grad", worst, 1e-10, "Z~ in {0.5, 1, 2} x norm")


def check_plugin_counterexample() -> CheckResult:
    space = FiniteSpace(2)
    ans = TableAnsatz(space)
    target = Target(np.array([1.0, 0.0]), FiniteWeights.uniform(2))
    theta = np.array([1.0, 1.0])
    grad = exact_grad_supervised(ans, theta, target)
    plug = enumerate_expectation(plugin_estimator_fn(ans, theta, target, 2.0), [0.5, 0.5], 2)
    dirn = enumerate_expectation(directional_estimator_fn(ans, theta, target, 2.0), [0.5, 0.5], 2)
    a_plug, a_dir = vector_angle(plug, grad), vector_angle(dirn, grad)
    passed = a_plug > 1e-3 and a_dir <= 1e-10
    return CheckResult("plug-in estimator is biased", a_dir, 1e-10, passed,
                       f"plug-in angle {a_plug:.4f} rad must exceed 1e-3")


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_energy_gradient_fd() -> CheckResult:
    worst = 0.0
    for seed in range(20):
        _, ans, theta, h, _, _ = finite_fixture(seed)
        fd = fd_gradient(lambda t: exact_energy(h, ans, t), theta)
        worst = max(worst, _rel(exact_grad_energy(h, ans, theta), fd))
    return _result("energy gradient vs finite diff", worst, 1e-6, "relative")


def check_supervised_gradient_fd() -> CheckResult:
    worst = 0.0
    for seed in range(20):
        space, ans, theta, _, _, rng = finite_fixture(seed)
        target = random_target(space, rng)
        fd = fd_gradient(lambda t: objective(ans, t, target), theta)
        worst = max(worst, _rel(exact_grad_supervised(ans, theta, target), fd))
    return _result("supervised gradient vs finite diff", worst, 1e-6, "relative")


def check_scale_invariance() -> CheckResult:
    worst = 0.0
    for seed in range(10):
        space, ans, theta, h, _, rng = finite_fixture(seed)
        target = random_target(space, rng)
        psi = ans.value(theta, space.points)
        y = rng.standard_normal((8, 2, 2, 1))
        phi_cols = rng.standard_normal((8, 2, 2))
        base = {
            "energy": exact_energy(h, ans, theta),
            "si": si_loss(psi, target.phi, target.rho),
            "angle": wavefunction_angle(psi, target.phi, target.rho),
            "objective": objective(ans, theta, target),
            "columnwise": columnwise_si_loss(y, phi_cols),
        }
        base.update({f"vmc_{k}": v for k, v in assumption_moments_vmc(h, ans, theta).values.items()})
        base.update({f"pre_{k}": v for k, v in assumption_moments_pretrain(ans, theta, target.rho).values.items()})
        for lam in SCALES:
            sa = ScaledAnsatz(ans, lam)
            spsi = lam * psi
            got = {
                "energy": exact_energy(h, sa, theta),
                "si": si_loss(spsi, target.phi, target.rho),
                "angle": wavefunction_angle(spsi, target.phi, target.rho),
                "objective": objective(sa, theta, target) if lam > 0 else base["objective"],
                "columnwise": columnwise_si_loss(lam * y, phi_cols),
            }
            got.update({f"vmc_{k}": v for k, v in assumption_moments_vmc(h, sa, theta).values.items()})
            got.update({f"pre_{k}": v for k, v in
                        assumption_moments_pretrain(sa, theta, target.rho).values.items()})
            for k, v in base.items():
                worst = max(worst, abs(got[k] - v) / max(1.0, abs(v)))
    return _result("scale invariance of losses/moments", worst, 1e-12, "lambda in {-3, 0.01, 7}")


def check_mse_not_invariant() -> CheckResult:
    rng = make_rng(0, 98)
    phi = rng.standard_normal((8, 2, 2))
    y = phi[..., None].copy()
    gap = mse_orbital_loss(2 * y, phi) - mse_orbital_loss(y, phi)
    # passes when the gap is clearly nonzero; error reported as its inverse
    return _result("orbital MSE is not scale invariant", 1.0 / max(gap, 1e-300), 1e3,
                   f"error is 1/gap; loss gap {gap:.3g}")


def check_spectrum() -> CheckResult:
    worst = 0.0
    for seed in range(10):
        h = random_symmetric_hamiltonian(2 + seed, make_rng(seed, 97))
        e0, v0 = ground_truth_spectrum(h)
        worst = max(worst, float(np.max(np.abs(h.matrix @ v0 - e0 * v0))))
    return _result("ground-state eigenpair residual", worst, 1e-8)


def check_hamiltonian_symmetry() -> CheckResult:
    worst = 0.0
    for seed in range(10):
        space, _, _, h, _, rng = finite_fixture(seed)
        f, g = rng.standard_normal(space.size), rng.standard_normal(space.size)
        w = FiniteWeights.uniform(space.size)
        worst = max(worst, abs(inner_product(f, h.matrix @ g, w) - inner_product(h.matrix @ f, g, w)))
    return _result("<f, Hg> = <Hf, g>", worst, 1e-12)


def check_born_scale() -> CheckResult:
    worst = 0.0
    for seed in range(10):
        _, ans, theta, _, _, _ = finite_fixture(seed)
        p = BornDensity.from_ansatz(ans, theta).weights
        for lam in SCALES:
            worst = max(worst, float(np.max(np.abs(BornDensity.from_ansatz(ans, lam * theta).weights - p))))
    return _result("Born density scale invariance", worst, 1e-12)


def check_ansatz_derivatives() -> CheckResult:
    worst = 0.0
    rng = make_rng(0, 96)
    box1 = BoxSpace.cube(1, 5.0)
    box3 = BoxSpace.cube(3, 5.0)
    cases = [
        (ExpFamilyAnsatz(box1, [gaussian_feature()]), np.array([0.7]), box1),
        (ExpFamilyAnsatz(box3, [gaussian_feature(), radial_feature()]), np.array([0.3, 0.8]), box3),
    ]
    mlp = MlpAnsatz(box1)
    cases.append((mlp, mlp.init_params(rng), box1))
    for ans, theta, box in cases:
        x = rng.uniform(-2, 2, (5, box.dim))
        fd = np.stack([finite_diff_gradient(ans, theta, x[i:i + 1])[0] for i in range(5)])
        worst = max(worst, _rel(ans.grad_theta(theta, x), fd))
        psi = ans.value(theta, x)
        worst = max(worst, _rel(ans.grad_log_abs(theta, x), ans.grad_theta(theta, x) / psi[:, None]))
    return _result("ansatz derivatives vs finite diff", worst, 1e-5, "relative")


def check_laplacian() -> CheckResult:
    box = BoxSpace.cube(3, 5.0)
    ans = ExpFamilyAnsatz(box, [radial_feature()])
    x = make_rng(0, 95).uniform(-2, 2, (6, 3))
    lap = ans.laplacian_x(np.array([1.0]), x)
    fb = laplacian_fallback(ans, np.array([1.0]), x)
    err = float(np.max(np.abs(lap - fb)))
    return _result("Laplacian vs finite-difference", err, 1e-5)


def check_exact_eigenstates() -> CheckResult:
    box = BoxSpace.cube(3, 8.0)
    ans = ExpFamilyAnsatz(box, [radial_feature()])
    h = SchrodingerHamiltonian(coulomb_potential)
    x = make_rng(0, 94).uniform(-3, 3, (16, 3))
    err = float(np.max(np.abs(local_energy(h, ans, np.array([1.0]), x) + 0.5)))
    return _result("hydrogen local energy is constant", err, 1e-10)


def check_norm_estimate_unbiased() -> CheckResult:
    worst = 0.0
    for seed in range(N_FIXTURES):
        space, ans, theta, _, n, rng = finite_fixture(seed)
        target = random_target(space, rng)
        psi = ans.value(theta, space.points)
        got = enumerate_expectation(lambda idx: np.array([np.mean(psi[list(idx)] ** 2)]),
                                    target.rho.weights, n)
        worst = max(worst, abs(float(got[0]) - exact_norm(ans, theta, target.rho) ** 2))
    return _result("batch norm^2 unbiased", worst, 1e-10)


def run_checks(inject: Optional[str] = None) -> List[CheckResult]:
    if inject is not None and inject not in INJECTIONS:
        raise ValueError(f"unknown injection {inject!r}")
    checks: List[Callable[[], CheckResult]] = [
        check_vmc_unbiased,
        lambda: check_local_energy_gradient_mean(inject),
        lambda: check_directional_unbiased(inject),
        check_plugin_counterexample,
        check_energy_gradient_fd,
        check_supervised_gradient_fd,
        check_scale_invariance,
        check_mse_not_invariant,
        check_spectrum,
        check_hamiltonian_symmetry,
        check_born_scale,
        check_ansatz_derivatives,
        check_laplacian,
        check_exact_eigenstates,
        check_norm_estimate_unbiased,
    ]
    return [c() for c in checks]
