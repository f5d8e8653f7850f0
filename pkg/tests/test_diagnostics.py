import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmckit.ansatz import ExpFamilyAnsatz, ScaledAnsatz, TableAnsatz, gaussian_feature
from vmckit.diagnostics import (AssumptionMoments, DiagnosticsError, RunningMax, assumption_moments_pretrain,
                                assumption_moments_vmc, directional_batch_sampler, lipschitz_bound_check,
                                lipschitz_estimate, loglog_slope, running_min, theorem_ledger,
                                variance_vs_n, vmc_batch_sampler)
from vmckit.model import (BoxSpace, FiniteSpace, FiniteWeights, SchrodingerHamiltonian, ground_truth_spectrum,
                          harmonic_potential, norm, path_hamiltonian, random_symmetric_hamiltonian)
from vmckit.oracle import directional_pair_kernel, fd_gradient, pair_statistic_variance
from vmckit.pretrain import Target, exact_grad_supervised
from vmckit.sampler import MetropolisSampler, make_rng
from vmckit.vmc import exact_grad_energy


def test_running_min_examples():
    assert np.array_equal(running_min([3, 1, 2, 0.5]), [3, 1, 1, 0.5])
    dec = [5.0, 4.0, 1.0]
    assert np.array_equal(running_min(dec), dec)
    assert np.array_equal(running_min([2.0] * 4), [2.0] * 4)
    with pytest.raises(DiagnosticsError):
        running_min([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_running_min_properties(xs):
    r = running_min(xs)
    assert np.all(np.diff(r) <= 0) and np.all(r <= np.asarray(xs))
    assert r[-1] == min(xs)


def test_loglog_slope_power_law():
    m = np.arange(5000)
    v = np.where(m > 0, np.maximum(m, 1) ** -0.25, 1.0)
    fit = loglog_slope(v, burn_in=200)
    assert abs(fit.slope + 0.25) <= 1e-6
    assert fit.n_points == 4800
    assert abs(loglog_slope(np.full(1000, 3.0)).slope) <= 1e-12


def test_loglog_slope_with_explicit_steps():
    steps = np.arange(100, 2000, 7)
    fit = loglog_slope(2.0 * steps ** -0.5, burn_in=0, steps=steps)
    assert abs(fit.slope + 0.5) <= 1e-9 and abs(fit.intercept - math.log(2.0)) <= 1e-9


def test_loglog_slope_errors():
    with pytest.raises(DiagnosticsError):
        loglog_slope(np.ones(50), burn_in=45)
    v = np.ones(500)
    v[300] = 0.0
    with pytest.raises(DiagnosticsError):
        loglog_slope(v)


def test_lipschitz_linear_map():
    rng = make_rng(0, 90)
    a = rng.standard_normal((4, 4))
    u, s, vt = np.linalg.svd(a)
    t0 = rng.standard_normal(4)
    for _ in range(20):
        t1 = t0 + rng.standard_normal(4)
        assert lipschitz_estimate(a @ t0, a @ t1, t0, t1) <= s[0] + 1e-12
    t1 = t0 + 0.3 * vt[0]
    assert lipschitz_estimate(a @ t0, a @ t1, t0, t1) == pytest.approx(s[0], rel=1e-12)
    assert lipschitz_estimate(np.ones(4), np.ones(4), t0, t1) == 0.0
    with pytest.raises(DiagnosticsError):
        lipschitz_estimate(a @ t0, a @ t0, t0, t0)


def test_lipschitz_matches_hessian_near_optimum():
    h = path_hamiltonian([0.0, 0.1, 0.2, 0.3])
    ans = TableAnsatz(FiniteSpace(4))
    _, v0 = ground_truth_spectrum(h)
    theta = v0 + 0.01 * np.array([0.3, -0.2, 0.1, 0.4])
    grad = lambda t: exact_grad_energy(h, ans, t)
    d = np.array([1.0, -1.0, 0.5, 0.0])
    d /= np.linalg.norm(d)
    hd = (grad(theta + 1e-5 * d) - grad(theta - 1e-5 * d)) / 2e-5
    est = lipschitz_estimate(grad(theta), grad(theta + 1e-3 * d), theta, theta + 1e-3 * d)
    assert abs(est - np.linalg.norm(hd)) <= 0.2 * np.linalg.norm(hd)


def test_moments_examples(two_state):
    h, ans = two_state
    m = assumption_moments_vmc(h, ans, np.array([1.0, 1.0]))
    assert m.e4 == pytest.approx(1.0, abs=1e-14)
    m2 = assumption_moments_vmc(h, ans, np.array([2.0, 1.0]))
    assert m2.dpsi4 == pytest.approx(0.25 ** 0.25, abs=1e-14)
    assert m2.hess2 == 0.0
    assert m2.max() >= m2.e4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([-3.0, 0.01, 7.0]))
def test_vmc_moments_scale_invariant(seed, lam):
    rng = make_rng(seed, 91)
    s = int(rng.integers(2, 6))
    theta = rng.uniform(0.2, 1.5, s) * rng.choice([-1.0, 1.0], s)
    h = random_symmetric_hamiltonian(s, rng)
    ans = TableAnsatz(FiniteSpace(s))
    base = assumption_moments_vmc(h, ans, theta).values
    scaled = assumption_moments_vmc(h, ScaledAnsatz(ans, lam), theta).values
    for k in ("e4", "de2", "dpsi4", "hess2"):
        assert scaled[k] == pytest.approx(base[k], rel=1e-10, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([-3.0, 0.01, 7.0]))
def test_pretrain_moments_scale_invariant(seed, lam):
    rng = make_rng(seed, 92)
    s = int(rng.integers(2, 6))
    theta = rng.uniform(0.2, 1.5, s) * rng.choice([-1.0, 1.0], s)
    rho = FiniteWeights(rng.uniform(0.1, 1.0, s))
    ans = TableAnsatz(FiniteSpace(s))
    base = assumption_moments_pretrain(ans, theta, rho).values
    scaled = assumption_moments_pretrain(ScaledAnsatz(ans, lam), theta, rho).values
    for k in ("v", "g", "h"):
        assert scaled[k] == pytest.approx(base[k], rel=1e-10, abs=1e-12)


def test_vmc_moments_monte_carlo_matches_closed_form():
    # psi = exp(-x^2 / 2) is the ground state of V = x^2 / 2
    box = BoxSpace.cube(1, 10.0)
    ans = ExpFamilyAnsatz(box, [gaussian_feature()])
    h = SchrodingerHamiltonian(harmonic_potential)
    theta = np.array([1.0])
    pts = MetropolisSampler(box, 4000, make_rng(0, 2)).draw(lambda x: ans.value(theta, x)).points
    m = assumption_moments_vmc(h, ans, theta, points=pts)
    assert m.e4 == pytest.approx(0.5, abs=1e-8)          # eigenstate: E_loc == 1/2
    # d log psi / d a = -x^2/2 with x ~ N(0, 1/2): E[(x^2/2)^4] = 105/256
    assert m.dpsi4 == pytest.approx((105 / 256) ** 0.25, abs=5 * m.stderr["dpsi4"] + 1e-3)
    assert m.stderr["dpsi4"] > 0


def test_running_max():
    r = RunningMax()
    assert r.update(AssumptionMoments({"a": 1.0, "b": None})) == 1.0
    assert r.update(AssumptionMoments({"a": 0.5})) == 1.0
    assert r.update(AssumptionMoments({"a": 3.0})) == 3.0
    assert r.history == [1.0, 1.0, 3.0]
    with pytest.raises(AttributeError):
        AssumptionMoments({}).missing


def _toy():
    rng = make_rng(4, 93)
    theta = rng.uniform(0.2, 1.5, 4) * rng.choice([-1.0, 1.0], 4)
    return random_symmetric_hamiltonian(4, rng), TableAnsatz(FiniteSpace(4)), theta


def test_vmc_variance_scales_as_inverse_n():
    h, ans, theta = _toy()
    table = variance_vs_n(vmc_batch_sampler(h, ans, theta), [2, 4, 8, 16, 32, 64, 128, 256], 10_000,
                          make_rng(0, 94))
    assert abs(table.slope() + 1) <= 0.15
    exact = exact_grad_energy(h, ans, theta)
    stderr = np.sqrt(table.variance / table.reps)
    assert np.all(np.linalg.norm(table.mean - exact, axis=1) <= 4 * stderr)


def test_variance_at_minimizer_is_zero_and_mean_vanishes():
    h, ans, _ = _toy()
    _, v0 = ground_truth_spectrum(h)
    table = variance_vs_n(vmc_batch_sampler(h, ans, v0), [4, 16], 1000, make_rng(1, 94))
    assert np.all(table.variance <= 1e-24)
    assert np.all(np.linalg.norm(table.mean, axis=1) <= 1e-12)


def test_directional_variance_matches_pair_oracle():
    rng = make_rng(5, 95)
    ans = TableAnsatz(FiniteSpace(4))
    theta = rng.uniform(0.5, 1.5, 4)
    target = Target(rng.standard_normal(4), FiniteWeights.uniform(4))
    z = norm(theta, target.rho)
    ns = [2, 4, 8, 16, 32, 64, 128, 256]
    table = variance_vs_n(directional_batch_sampler(ans, theta, target, "fixed", z), ns, 10_000, make_rng(2, 95))
    exact = pair_statistic_variance(directional_pair_kernel(ans, theta, target.phi, z), target.rho.weights, ns)
    exact_slope = float(np.polyfit(np.log(ns), np.log(exact), 1)[0])
    assert abs(table.slope() - exact_slope) <= 0.03
    # small batches add a 1/n^2 term; the large-n tail decays like 1/n
    tail = float(np.polyfit(np.log(ns[3:]), np.log(exact[3:]), 1)[0])
    assert abs(tail + 1) <= 0.05


@pytest.mark.parametrize("strategy", ["same", "independent"])
def test_directional_variance_with_estimated_norm_decays_like_inverse_n(strategy):
    rng = make_rng(5, 95)
    ans = TableAnsatz(FiniteSpace(4))
    theta = rng.uniform(0.5, 1.5, 4)
    target = Target(rng.standard_normal(4), FiniteWeights.uniform(4))
    ns = [16, 32, 64, 128, 256]
    table = variance_vs_n(directional_batch_sampler(ans, theta, target, strategy), ns, 10_000, make_rng(2, 95))
    assert abs(table.slope() + 1) <= 0.1


def test_directional_sampler_fixed_norm_is_unbiased():
    rng = make_rng(6, 95)
    ans = TableAnsatz(FiniteSpace(3))
    theta = rng.uniform(0.5, 1.5, 3)
    target = Target(rng.standard_normal(3), FiniteWeights.uniform(3))
    z = norm(theta, target.rho)
    table = variance_vs_n(directional_batch_sampler(ans, theta, target, "fixed", z), [3], 200_000, make_rng(3))
    exact = exact_grad_supervised(ans, theta, target)
    assert np.linalg.norm(table.mean[0] - exact) <= 4 * math.sqrt(table.variance[0] / table.reps)


def test_variance_needs_reps():
    with pytest.raises(DiagnosticsError):
        variance_vs_n(lambda n, r, g: np.zeros((r, 1)), [2], 10, make_rng(0))


def test_theorem_ledger_synthetic():
    m = np.arange(4000)
    eta = 0.1 / np.sqrt(m + 1)
    g = 1.0 / (m + 1) ** 0.3
    rep = theorem_ledger(g, eta, 4, loss0=1.0, loss_floor=-1.0)
    assert rep.base == pytest.approx(4.0)
    assert rep.passed and rep.max_ratio_second_half <= 1.0
    assert "PASS" in rep.text()


def test_theorem_ledger_zero_gradient():
    rep = theorem_ledger(np.zeros(100), np.full(100, 0.1), 4, loss0=0.0)
    assert rep.passed and rep.lhs[-1] == 0.0 and rep.fitted_constant == 0.0


def test_theorem_ledger_detects_growth():
    # gradient norms that grow in the second half break any constant fitted on the first
    g = np.concatenate([np.full(500, 0.1), np.full(500, 10.0)])
    rep = theorem_ledger(g, np.full(1000, 0.1), 4, loss0=0.0)
    assert not rep.passed and "FAIL" in rep.text()
    with pytest.raises(DiagnosticsError):
        theorem_ledger([1.0], [0.1], 4, 0.0)


def test_lipschitz_bound_check():
    lip = np.array([1.0, 2.0, 1.5, 0.5, 1.0, 1.9, np.nan, 0.2])
    out = lipschitz_bound_check(lip, 1.0)
    assert out["c_prime"] == pytest.approx(1.0)
    assert out["fraction_below"] == 1.0 and out["max_estimate"] == 2.0
    with pytest.raises(DiagnosticsError):
        lipschitz_bound_check([1.0, 2.0], 1.0)
