import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmckit.ansatz import MatrixMlpAnsatz, MlpAnsatz, TableAnsatz
from vmckit.model import BoxSpace, FiniteSpace, FiniteWeights, Lebesgue, inner_product, norm
from vmckit.oracle import enumerate_expectation, fd_gradient, vector_angle
from vmckit.pretrain import (Adam, NormEstimator, OrbitalProblem, PretrainError, PretrainProblem,
                             Target, coefficients, columnwise_si_loss, directional_estimator,
                             directional_estimator_fn, directional_gradient, exact_grad_supervised,
                             hermite_orbitals, mse_orbital_loss, norm_estimate, objective,
                             orbital_pretrain, plugin_biased_estimator, plugin_estimator_fn,
                             pretrain_train, si_loss, slater_value, wavefunction_angle)
from vmckit.sampler import make_rng
from vmckit.vmc import Schedule

UNIFORM2 = FiniteWeights.uniform(2)


def random_problem(seed, size=None):
    rng = make_rng(seed, 60)
    s = size or int(rng.integers(2, 6))
    theta = rng.uniform(0.2, 1.5, s) * rng.choice([-1.0, 1.0], s)
    w = rng.uniform(0.1, 1.0, s)
    phi = rng.standard_normal(s)
    return TableAnsatz(FiniteSpace(s)), theta, Target(phi, FiniteWeights(w))


# --- losses -----------------------------------------------------------------

def test_si_loss_examples():
    phi = np.array([1.0, 0.0])
    assert si_loss(phi, phi, UNIFORM2) == pytest.approx(0.0, abs=1e-15)
    assert si_loss(np.array([1.0, 1.0]), phi, UNIFORM2) == pytest.approx(0.25, abs=1e-15)
    assert si_loss(np.array([0.0, 3.0]), phi, UNIFORM2) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(PretrainError):
        si_loss(np.zeros(2), phi, UNIFORM2)


def test_objective_examples(crafted_target):
    ans = TableAnsatz(FiniteSpace(2))
    assert objective(ans, np.array([1.0, 1.0]), crafted_target) == pytest.approx(-0.5, abs=1e-15)
    assert objective(ans, np.array([5.0, 0.0]), crafted_target) == pytest.approx(
        -norm(crafted_target.phi, crafted_target.rho), abs=1e-15)
    t = np.array([0.3, 0.8])
    assert objective(ans, 4 * t, crafted_target) == pytest.approx(objective(ans, t, crafted_target), abs=1e-15)
    assert objective(ans, -t, crafted_target) == pytest.approx(-objective(ans, t, crafted_target), abs=1e-15)


def test_exact_grad_supervised_examples(crafted_target):
    ans = TableAnsatz(FiniteSpace(2))
    assert np.allclose(exact_grad_supervised(ans, np.array([1.0, 1.0]), crafted_target), [-0.25, 0.25], atol=1e-15)
    assert np.allclose(exact_grad_supervised(ans, np.array([2.0, 0.0]), crafted_target), 0.0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_exact_grad_supervised_matches_fd_and_is_orthogonal(seed):
    ans, theta, target = random_problem(seed)
    g = exact_grad_supervised(ans, theta, target)
    fd = fd_gradient(lambda t: objective(ans, t, target), theta)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1e-8)
    assert abs(g @ theta) <= 1e-12 * (1 + np.linalg.norm(g) * np.linalg.norm(theta))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([-3.0, 0.01, 7.0]))
def test_scale_invariance_of_losses(seed, lam):
    ans, theta, target = random_problem(seed)
    psi = ans.value(theta, ans.space.points)
    assert si_loss(lam * psi, target.phi, target.rho) == pytest.approx(si_loss(psi, target.phi, target.rho), abs=1e-12)
    assert wavefunction_angle(lam * psi, target.phi, target.rho) == pytest.approx(
        wavefunction_angle(psi, target.phi, target.rho), abs=1e-12)
    if lam > 0:
        assert objective(ans, lam * theta, target) == pytest.approx(objective(ans, theta, target), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_closed_form_equals_min_over_scale(seed):
    ans, theta, target = random_problem(seed)
    psi = ans.value(theta, ans.space.points)
    phi, rho = target.phi, target.rho
    lam = inner_product(phi, psi, rho) / inner_product(psi, psi, rho)
    best = inner_product(phi - lam * psi, phi - lam * psi, rho)
    assert abs(best - si_loss(psi, phi, rho)) <= 1e-12
    # no other scale does better
    for dl in (-0.1, 0.1):
        r = phi - (lam + dl) * psi
        assert inner_product(r, r, rho) >= best - 1e-12


def test_wavefunction_angle_examples():
    phi = np.array([1.0, 0.0])
    assert wavefunction_angle(np.array([1.0, 1.0]), phi, UNIFORM2) == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert wavefunction_angle(np.array([-3.0, 0.0]), phi, UNIFORM2) <= 1e-15
    assert wavefunction_angle(np.array([0.0, 2.0]), phi, UNIFORM2) == pytest.approx(1.0, abs=1e-15)
    # tiny angles keep full relative precision
    eps = 1e-9
    assert wavefunction_angle(np.array([1.0, eps]), phi, UNIFORM2) == pytest.approx(eps, rel=1e-6)


# --- estimators -------------------------------------------------------------

def test_directional_estimator_hand_example(crafted_target):
    ans = TableAnsatz(FiniteSpace(2))
    theta = np.array([1.0, 1.0])
    assert np.allclose(coefficients([1.0, 1.0], [1.0, 0.0]), [-0.5, 0.5])
    est = directional_estimator(ans, theta, np.array([0, 1]), crafted_target, 1.0)
    assert np.allclose(est.g, [-0.5, 0.5]) and est.kind == "directional"
    prop = directional_estimator(ans, np.array([2.0, 1.0]), np.array([0, 0, 0]), crafted_target, 1.0)
    assert np.allclose(prop.g, 0.0)


def test_directional_estimator_errors():
    with pytest.raises(PretrainError):
        directional_gradient([1.0], [1.0], np.ones((1, 1)), 1.0)
    with pytest.raises(PretrainError):
        directional_gradient([1.0, 2.0], [1.0, 0.0], np.ones((2, 1)), 0.0)


def test_coefficients_vanish_when_proportional():
    psi = np.array([0.3, -1.2, 2.0])
    assert np.allclose(coefficients(psi, -2.5 * psi), 0.0, atol=1e-15)


def test_enumerated_expectation_example(crafted_target):
    ans = TableAnsatz(FiniteSpace(2))
    fn = directional_estimator_fn(ans, np.array([1.0, 1.0]), crafted_target, 1.0)
    assert np.allclose(enumerate_expectation(fn, [0.5, 0.5], 2), [-0.25, 0.25], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([2, 3]), st.floats(0.3, 3.0))
def test_directional_unbiasedness(seed, n, z_factor):
    ans, theta, target = random_problem(seed)
    z = norm(ans.value(theta, ans.space.points), target.rho)
    exact = exact_grad_supervised(ans, theta, target)
    got = enumerate_expectation(directional_estimator_fn(ans, theta, target, z_factor * z), target.rho.weights, n)
    assert np.max(np.abs(got - exact / z_factor ** 3)) <= 1e-10
    exact_z = enumerate_expectation(directional_estimator_fn(ans, theta, target, z), target.rho.weights, n)
    assert np.max(np.abs(exact_z - exact)) <= 1e-10


def test_plugin_counterexample(crafted_target):
    ans = TableAnsatz(FiniteSpace(2))
    theta = np.array([1.0, 1.0])
    exact = exact_grad_supervised(ans, theta, crafted_target)
    biased = enumerate_expectation(plugin_estimator_fn(ans, theta, crafted_target, 2.0), [0.5, 0.5], 2)
    assert np.allclose(biased, [-0.21875, 0.03125], atol=1e-15)
    assert vector_angle(biased, exact) > math.radians(10)
    good = enumerate_expectation(directional_estimator_fn(ans, theta, crafted_target, 2.0), [0.5, 0.5], 2)
    assert vector_angle(good, exact) <= 1e-10
    # at the exact norm the plug-in form is unbiased
    at_norm = enumerate_expectation(plugin_estimator_fn(ans, theta, crafted_target, 1.0), [0.5, 0.5], 2)
    assert np.allclose(at_norm, exact, atol=1e-15)
    single = plugin_biased_estimator(ans, theta, 0, 1, crafted_target, 2.0)
    assert single.n == 2 and single.kind == "plugin"


# --- norm estimates ---------------------------------------------------------

def test_norm_estimate_exhaustive_batch_is_exact():
    ans = TableAnsatz(FiniteSpace(3))
    theta = np.array([1.0, -2.0, 0.5])
    rho = FiniteWeights.uniform(3)
    est = NormEstimator("independent", 3)
    ne = est.estimate(0, ans, theta, None, lambda k: np.array([0, 1, 2]))
    assert ne.z_tilde == pytest.approx(norm(theta, rho), abs=1e-15)


@pytest.mark.parametrize("strategy", ["same", "independent", "periodic"])
def test_norm_estimate_squared_is_unbiased(strategy):
    ans = TableAnsatz(FiniteSpace(2))
    theta = np.array([1.0, 1.0])
    rho = FiniteWeights.uniform(2)
    rng = make_rng(0, 70)
    vals = [norm_estimate(strategy, ans, theta, rho, rng, n=4, period=4).z_tilde ** 2 for _ in range(50)]
    assert np.allclose(vals, 1.0)
    # a non-constant psi: squared estimate averages to the squared norm
    theta = np.array([1.0, 3.0])
    vals = [norm_estimate(strategy, ans, theta, rho, rng, n=4, period=4).z_tilde ** 2 for _ in range(4000)]
    assert np.mean(vals) == pytest.approx(5.0, abs=4 * np.std(vals) / np.sqrt(len(vals)))


def test_periodic_refresh_schedule():
    ans = TableAnsatz(FiniteSpace(2))
    theta = np.array([1.0, 3.0])
    rng = make_rng(1)
    est = NormEstimator("periodic", period=5)
    draw = lambda k: rng.integers(0, 2, k)
    refreshed = [est.estimate(m, ans, theta, None, draw).refreshed for m in range(17)]
    assert refreshed == [m % 5 == 0 for m in range(17)]
    values = []
    for m in range(10):
        values.append(est.estimate(m, ans, theta, None, draw).z_tilde)
    assert len(set(values[1:5])) == 1 and len(set(values[6:10])) == 1


def test_norm_estimator_errors():
    with pytest.raises(PretrainError):
        NormEstimator("bogus")
    with pytest.raises(PretrainError):
        NormEstimator("periodic", period=0)
    with pytest.raises(PretrainError):
        NormEstimator("same").estimate(0, None, None, np.zeros(3), None)


def test_target_validation():
    with pytest.raises(PretrainError):
        Target(np.zeros(2), UNIFORM2)
    with pytest.raises(PretrainError):
        Target(np.ones(3), UNIFORM2)
    with pytest.raises(PretrainError):
        Target(np.array([3.0, 1.0]), UNIFORM2, bound=2.0)


# --- training ---------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_train_finite_reaches_target(seed):
    rng = make_rng(seed, 77)
    phi = rng.standard_normal(8)
    phi /= np.linalg.norm(phi)
    theta0 = rng.standard_normal(8)
    theta0 = theta0 if theta0 @ phi > 0 else -theta0
    target = Target(phi, FiniteWeights.uniform(8))
    state, rows = pretrain_train(PretrainProblem(TableAnsatz(FiniteSpace(8)), target, theta0, 8,
                                                 Schedule("inverse_sqrt", 1.0, 8), 5000, seed=seed))
    assert state.status == "ok" and len(rows) == 5000
    assert rows[-1].si_loss <= 1e-4
    assert all(r.norm_ratio > 0 for r in rows)


def test_train_started_at_optimum_stays_there():
    target = Target(np.array([1.0, 2.0]), UNIFORM2)
    state, rows = pretrain_train(PretrainProblem(TableAnsatz(FiniteSpace(2)), target,
                                                 np.array([3.0, 6.0]), 4, Schedule("constant", 0.5), 100))
    assert state.status == "ok"
    assert max(r.si_loss for r in rows) <= 1e-14


def test_batch_where_psi_vanishes_stops_training(crafted_target):
    # psi = (3, 0): a batch drawn entirely from state 1 has no norm estimate
    state, rows = pretrain_train(PretrainProblem(TableAnsatz(FiniteSpace(2)), crafted_target,
                                                 np.array([3.0, 0.0]), 2, Schedule("constant", 0.5), 200))
    assert state.status == "diverged" and "vanishes" in state.message


@pytest.mark.parametrize("strategy", ["independent", "periodic"])
def test_train_alternative_strategies(strategy):
    rng = make_rng(3, 77)
    phi = rng.standard_normal(4)
    target = Target(phi, FiniteWeights.uniform(4))
    theta0 = phi + 0.5 * rng.standard_normal(4)
    state, rows = pretrain_train(PretrainProblem(TableAnsatz(FiniteSpace(4)), target, theta0, 8,
                                                 Schedule("inverse_sqrt", 0.5, 8), 1500, strategy=strategy, period=10))
    assert state.status == "ok" and rows[-1].si_loss < rows[0].si_loss * 1e-2


def test_train_mlp_fits_gaussian():
    box = BoxSpace.cube(1, 5.0)
    ans = MlpAnsatz(box, (16, 16))
    grid = np.linspace(-5, 5, 401)[:, None]
    phi = lambda x: np.exp(-0.5 * np.sum(x * x, axis=-1))
    target = Target(phi, Lebesgue(box), eval_points=grid)
    theta0 = ans.init_params(make_rng(0, 6))
    if ans.value(theta0, grid) @ phi(grid) < 0:
        theta0[ans.scale_index] *= -1
    state, rows = pretrain_train(PretrainProblem(ans, target, theta0, 256, Schedule("constant", 0.5), 2000))
    assert state.status == "ok"
    assert rows[-1].angle <= 0.05


def test_train_divergence_guard(crafted_target):
    state, rows = pretrain_train(PretrainProblem(TableAnsatz(FiniteSpace(2)), crafted_target,
                                                 np.array([1.0, 1.0]), 4, Schedule("constant", 1e12), 20))
    assert state.status == "diverged"


def test_train_deterministic(crafted_target):
    def run():
        return pretrain_train(PretrainProblem(TableAnsatz(FiniteSpace(2)), crafted_target,
                                              np.array([1.0, 1.0]), 4, Schedule("constant", 0.1), 40, seed=5))[1]
    a, b = run(), run()
    assert [r.loss_est for r in a] == [r.loss_est for r in b]


# --- orbital losses ---------------------------------------------------------

def orbital_batch(seed=0, b=5, n=2, k=1):
    rng = make_rng(seed, 80)
    x = rng.standard_normal((b, n))
    phi = hermite_orbitals(n)(x)
    y = rng.standard_normal((b, n, n, k))
    return phi, y


def test_columnwise_si_examples():
    phi, y = orbital_batch()
    aligned = np.repeat(phi[..., None], 2, axis=-1)
    assert columnwise_si_loss(aligned, phi) == pytest.approx(0.0, abs=1e-14)
    scaled = aligned * np.array([-3.0, 0.2])
    assert columnwise_si_loss(scaled, phi) == pytest.approx(0.0, abs=1e-14)
    # one column orthogonal to its target column: that term equals 1
    p = np.zeros((2, 1, 1))
    p[0, 0, 0] = 1.0
    yo = np.zeros((2, 1, 1, 1))
    yo[1, 0, 0, 0] = 2.0
    assert columnwise_si_loss(yo, p) == pytest.approx(1.0)


def test_columnwise_si_literal_form():
    phi, _ = orbital_batch()
    y = phi[..., None]
    col = np.sum(phi * phi, axis=(0, 1))
    assert columnwise_si_loss(y, phi, normalize_target=False) == pytest.approx(np.sum(1 - col))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 20.0))
def test_columnwise_si_invariant_mse_not(seed, lam):
    phi, y = orbital_batch(seed, k=2)
    assert columnwise_si_loss(lam * y, phi) == pytest.approx(columnwise_si_loss(y, phi), abs=1e-12)
    if abs(lam - 1) > 1e-3:
        assert mse_orbital_loss(lam * y, phi) != pytest.approx(mse_orbital_loss(y, phi), abs=1e-9)


def test_orbital_loss_gradients_match_fd():
    phi, y = orbital_batch(3, k=2)
    for fn in (columnwise_si_loss, mse_orbital_loss):
        _, g = fn(y, phi, return_grad=True)
        fd = fd_gradient(lambda v: fn(v.reshape(y.shape), phi), y.ravel()).reshape(y.shape)
        assert np.allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_mse_examples():
    phi, _ = orbital_batch()
    y = phi[..., None]
    total = np.sum(phi ** 2)
    assert mse_orbital_loss(y, phi) == 0.0
    assert mse_orbital_loss(np.zeros_like(y), phi) == pytest.approx(total)
    assert mse_orbital_loss(2 * y, phi) == pytest.approx(total)
    with pytest.raises(PretrainError):
        mse_orbital_loss(y[:, :1], phi)


def test_columnwise_zero_column_is_error():
    phi, y = orbital_batch()
    y[:, :, 0, :] = 0
    with pytest.raises(PretrainError):
        columnwise_si_loss(y, phi)


def test_hermite_orbitals_orthonormal():
    x = np.linspace(-12, 12, 20001)
    h = hermite_orbitals(4)(x)
    gram = np.trapezoid(h[:, :, None] * h[:, None, :], x, axis=0) if hasattr(np, "trapezoid") \
        else np.trapz(h[:, :, None] * h[:, None, :], x, axis=0)
    assert np.allclose(gram, np.eye(4), atol=1e-10)


def test_slater_value_antisymmetric():
    f = hermite_orbitals(2)
    x = np.array([[0.3, -1.1], [0.5, 0.5]])
    v = slater_value(f, x)
    assert v[1] == pytest.approx(0.0, abs=1e-15)
    assert slater_value(f, x[:, ::-1])[0] == pytest.approx(-v[0])


def test_adam_first_step_is_lr_sign():
    opt = Adam(0.1)
    out = opt.step(np.zeros(3), np.array([2.0, -1e-3, 5.0]))
    assert np.allclose(out, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_orbital_pretrain_short_run_improves():
    box = BoxSpace.cube(2, 5.0)
    ans = MatrixMlpAnsatz(2, 1, (16, 16))
    theta0 = ans.init_params(make_rng(0, 6))
    prob = OrbitalProblem(ans, hermite_orbitals(2), box, theta0, 64, Schedule("constant", 0.003), 200,
                          loss="si", eval_size=256, burn_in=100)
    state, rows = orbital_pretrain(prob)
    assert state.status == "ok" and len(rows) == 200
    assert rows[-1].angle < rows[0].angle
    with pytest.raises(PretrainError):
        OrbitalProblem(ans, hermite_orbitals(2), box, theta0, 64, Schedule("constant", 0.003), 10, loss="l1")
