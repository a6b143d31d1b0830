import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surrogate_hmc.models import GaussianTarget, LaplaceApprox
from surrogate_hmc.surrogate import (
    FORMAT_TAG, RandomBasis, RegularizedSurrogate, Surrogate, TrainerState, batch_solve,
    empirical_score_distance, sample_basis, softplus, trainer_update, transition_mu,
)

from helpers import fd_grad, rel_err


def _laplace(dim, seed=0):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(dim, dim))
    return LaplaceApprox.from_hessian(rng.normal(size=dim), M @ M.T + dim * np.eye(dim))


def _trained(s=20, dim=3, n=60, seed=0):
    rng = np.random.default_rng(seed)
    basis = sample_basis(s, dim, _laplace(dim, seed), seed=seed)
    points = [(rng.normal(size=dim), rng.normal(size=dim)) for _ in range(n)]
    return basis, points


# ---------------------------------------------------------------------------
# basis and surrogate
# ---------------------------------------------------------------------------


def test_softplus_stable():
    import mpmath as mp

    u = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    expected = [float(mp.log1p(mp.exp(x))) for x in u]
    np.testing.assert_allclose(softplus(u), expected, rtol=1e-14)


def test_basis_law_and_determinism():
    b1 = sample_basis(5000, 2, seed=3)
    b2 = sample_basis(5000, 2, seed=3)
    assert b1 == b2
    assert abs(b1.weights.mean()) < 0.05 and abs(b1.weights.std() - 1) < 0.05
    assert b1.biases.min() >= -2 and b1.biases.max() <= 2
    assert sample_basis(10, 2, seed=4) != sample_basis(10, 2, seed=5)


def test_basis_whitening_is_identity_covariance():
    lap = _laplace(4)
    basis = sample_basis(3, 4, lap, seed=0)
    rng = np.random.default_rng(0)
    theta = rng.multivariate_normal(lap.theta_map, lap.cov, size=200000)
    u = basis.whiten(theta)
    np.testing.assert_allclose(np.cov(u.T), np.eye(4), atol=0.02)


def test_surrogate_value_matches_naive_loop():
    lap = _laplace(3)
    basis = sample_basis(7, 3, lap, seed=1)
    v = np.random.default_rng(1).normal(size=7)
    sur = Surrogate(basis, v)
    theta = np.array([0.2, -0.4, 1.1])
    u = lap.chol.T @ (theta - lap.theta_map)
    naive = sum(v[i] * np.log1p(np.exp(basis.weights[i] @ u + basis.biases[i])) for i in range(7))
    assert sur.value(theta) == pytest.approx(naive, rel=1e-13)


def test_surrogate_gradient_matches_fd():
    basis, _ = _trained()
    sur = Surrogate(basis, np.random.default_rng(2).normal(size=basis.s))
    rng = np.random.default_rng(3)
    for theta in rng.normal(size=(20, basis.dim)):
        assert rel_err(sur.grad(theta), fd_grad(sur.value, theta)) < 1e-6
    pts = rng.normal(size=(5, basis.dim))
    np.testing.assert_allclose(sur.grad_batch(pts), [sur.grad(p) for p in pts], rtol=1e-13)


def test_jacobian_shape_and_link_to_gradient():
    basis, _ = _trained()
    v = np.arange(basis.s, dtype=float)
    theta = np.ones(basis.dim)
    A = basis.jacobian(theta)
    assert A.shape == (basis.dim, basis.s)
    np.testing.assert_allclose(A @ v, Surrogate(basis, v).grad(theta), rtol=1e-13)


def test_serialisation_round_trip(tmp_path):
    basis, _ = _trained()
    sur = Surrogate(basis, np.random.default_rng(4).normal(size=basis.s))
    path = tmp_path / "sur.json"
    sur.save(path, lam=0.1, t=12)
    record = json.loads(path.read_text())
    assert record["format"] == FORMAT_TAG and record["lambda"] == 0.1 and record["t"] == 12
    loaded = Surrogate.load(path)
    theta = np.random.default_rng(5).normal(size=(10, basis.dim))
    np.testing.assert_array_equal(loaded.value(theta), sur.value(theta))
    np.testing.assert_array_equal(loaded.grad_batch(theta), sur.grad_batch(theta))
    record["format"] = "other/v0"
    with pytest.raises(ValueError):
        Surrogate.from_dict(record)


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------


def test_trainer_rejects_bad_lambda():
    with pytest.raises(ValueError):
        TrainerState.init(4, 0.0)


def test_single_update_closed_form():
    # one point, s = 1, dim = 1: v = a g / (a^2 + lam)
    basis = RandomBasis([[1.0]], [0.0])
    st_ = TrainerState.init(1, 0.5)
    trainer_update(st_, basis, np.array([0.0]), np.array([2.0]))
    a = 0.5  # sigmoid(0) * w
    assert st_.v[0] == pytest.approx(a * 2.0 / (a * a + 0.5), rel=1e-14)
    assert st_.C[0, 0] == pytest.approx(1.0 / (a * a + 0.5), rel=1e-14)


@given(st.integers(1, 50), st.integers(1, 10), st.integers(1, 200), st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_online_equals_batch(s, dim, n, seed):
    rng = np.random.default_rng(seed)
    basis = sample_basis(s, dim, seed=seed)
    lam = 1e-4 * s
    state = TrainerState.init(s, lam)
    points = [(rng.normal(size=dim), rng.normal(size=dim)) for _ in range(n)]
    for theta, g in points:
        trainer_update(state, basis, theta, g)
    G = lam * np.eye(s) + sum(basis.jacobian(t).T @ basis.jacobian(t) for t, _ in points)
    assert np.max(np.abs(state.v - batch_solve(points, basis, lam))) <= 1e-8
    assert np.max(np.abs(state.C - np.linalg.inv(G))) <= 1e-8
    np.testing.assert_array_equal(state.C, state.C.T)


def test_order_invariance():
    basis, points = _trained(s=30, n=80)
    v_ref = batch_solve(points, basis, 0.01)
    rng = np.random.default_rng(9)
    perm = [points[i] for i in rng.permutation(len(points))]
    np.testing.assert_allclose(batch_solve(perm, basis, 0.01), v_ref, atol=1e-10)
    state = TrainerState.init(basis.s, 0.01)
    for theta, g in perm:
        trainer_update(state, basis, theta, g)
    np.testing.assert_allclose(state.v, v_ref, atol=1e-8)


def test_batch_solve_needs_points():
    basis, _ = _trained()
    with pytest.raises(ValueError):
        batch_solve([], basis, 1.0)


def test_realizable_target_recovers_gradients():
    # U* = z_{v*}: fit from samples of a broad Gaussian, check held-out gradients
    rng = np.random.default_rng(0)
    dim, s = 2, 30
    basis = sample_basis(s, dim, seed=1)
    v_star = rng.normal(size=s)
    truth = Surrogate(basis, v_star)
    pts = rng.normal(scale=1.5, size=(400, dim))
    v_hat = batch_solve([(p, truth.grad(p)) for p in pts], basis, 1e-10)
    held = rng.normal(scale=1.5, size=(200, dim))
    fitted = Surrogate(basis, v_hat)
    err = np.mean(np.linalg.norm(fitted.grad_batch(held) - truth.grad_batch(held), axis=1))
    assert err / np.mean(np.linalg.norm(truth.grad_batch(held), axis=1)) <= 1e-2


# ---------------------------------------------------------------------------
# regularized potential and schedule
# ---------------------------------------------------------------------------


def test_transition_mu():
    assert transition_mu(0, 200) == 0.0
    assert transition_mu(1e6, 200) == 1.0
    assert transition_mu(200, 200) == pytest.approx(1 - np.exp(-1))
    with pytest.raises(ValueError):
        transition_mu(1, 0)


def test_regularized_potential_limits():
    lap = _laplace(3)
    basis = sample_basis(10, 3, lap, seed=2)
    sur = Surrogate(basis, np.random.default_rng(6).normal(size=10))
    reg = RegularizedSurrogate(sur, lap, n_s=200, t=0)
    assert reg.value(lap.theta_map) == 0.0
    theta = lap.theta_map + 0.3
    d = theta - lap.theta_map
    assert reg.value(theta) == pytest.approx(0.5 * d @ lap.hessian @ d, rel=1e-14)
    reg.t = 10**6
    assert reg.value(theta) == pytest.approx(sur.value(theta), rel=1e-14)
    reg.t = 150
    rng = np.random.default_rng(7)
    for theta in lap.theta_map + rng.normal(size=(20, 3)):
        assert rel_err(reg.grad(theta), fd_grad(reg.value, theta)) < 1e-6


def test_regularized_mu_override():
    lap = _laplace(2)
    sur = Surrogate(sample_basis(4, 2, lap, seed=0), np.ones(4))
    assert RegularizedSurrogate(sur, lap, mu=1.0, t=0).mu_t == 1.0
    assert RegularizedSurrogate(sur, lap, mu=lambda t: 0.25, t=9).mu_t == 0.25
    assert RegularizedSurrogate(sur, lap, n_s=np.inf, t=10**9).mu_t == 0.0


def test_empirical_score_distance():
    model = GaussianTarget(dim=2)
    sur = Surrogate(sample_basis(5, 2, seed=0))
    rng = np.random.default_rng(0)
    samples = rng.normal(size=(50, 2))
    # v = 0 so grad z = 0 and the distance is the mean half squared norm
    expected = 0.5 * np.mean(np.sum(samples ** 2, axis=1))
    assert empirical_score_distance(sur, model, samples) == pytest.approx(expected, rel=1e-12)
    sur.v = rng.normal(size=5)
    naive = 0.0
    for th in samples:
        diff = sur.grad(th) - model.grad(th)
        naive += diff @ diff
    naive /= 2 * len(samples)
    assert empirical_score_distance(sur, model, samples) == pytest.approx(naive, rel=1e-12)
    with pytest.raises(ValueError):
        empirical_score_distance(sur, model, np.empty((0, 2)))


def test_score_distance_zero_for_exact_surrogate():
    basis = sample_basis(6, 2, seed=3)
    exact = Surrogate(basis, np.random.default_rng(1).normal(size=6))

    class Target:
        def grad(self, theta):
            return exact.grad(theta)

    pts = np.random.default_rng(2).normal(size=(20, 2))
    assert empirical_score_distance(exact, Target(), pts) < 1e-28


def test_score_distance_decays_with_width():
    # fixed smooth 2-d target; more nodes should not fit worse (median over seeds)
    from surrogate_hmc.diagnostics import Grid, grid_sm

    target = GaussianTarget([0.5, -0.5], [[1.0, 0.6], [0.6, 2.0]])
    lap = LaplaceApprox.from_hessian(target.mean, target.precision)
    grid = Grid.regular([(-8, 9), (-10, 9)], 121)
    log_p = -grid.evaluate(target.potential)
    rng = np.random.default_rng(0)
    pts = rng.multivariate_normal(target.mean, target.cov, size=400)
    medians = []
    for s in (8, 16, 32, 64):
        vals = []
        for seed in range(5):
            basis = sample_basis(s, 2, lap, seed=100 * s + seed)
            v = batch_solve([(p, target.grad(p)) for p in pts], basis, 1e-4 * s)
            log_q = -Surrogate(basis, v).value(grid.points()).reshape(grid.shape)
            vals.append(grid_sm(log_p, log_q, grid))
        medians.append(np.median(vals))
    assert all(b <= a for a, b in zip(medians, medians[1:])), medians
