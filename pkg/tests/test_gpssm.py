import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import joint_gaussian_posterior, se_kernel
from pciset.gpssm import (
    Dataset,
    GpssmModel,
    RankDeficientError,
    SquaredExpKernel,
    UncertaintyBounds,
    compute_phi,
    fit_kernels,
    fit_mean,
    posterior,
    sample_posterior_step,
    theta,
    uncertainty_bounds,
)

# linear part of the published 4-state quadrotor model and its fitted noise
A_PUB = np.array([
    [0.9999, 0.1009, -0.0001, -0.0005],
    [-0.0018, 1.0160, -0.0025, -0.0086],
    [0.0, 0.0008, 0.9999, 0.0996],
    [-0.0014, 0.0149, -0.0024, 0.9926],
])
B_PUB = np.array([[0.0028, 0.0603, -0.0017, -0.0309], [-0.0017, -0.0291, 0.0028, 0.0619]]).T
L_PUB = np.array([[-0.6162, -1.9897, -0.3997, -0.8999], [0.0297, -0.8025, -0.9550, -1.5374]])
Q_PUB = 1e-4 * np.array([2.6429, 2.5738, 2.3335, 2.5739])


def model_from(Z, y, s, ell, noise, A=None, B=None):
    """Single-output-per-state model with given inputs ``Z = [x, u]`` and residual targets."""
    Z = np.atleast_2d(Z)
    y = np.asarray(y, dtype=float).reshape(len(Z), -1)
    n = y.shape[1]
    X, U = Z[:, :n], Z[:, n:]
    A = np.zeros((n, n)) if A is None else A
    B = np.zeros((n, U.shape[1])) if B is None else B
    Xp = X @ A.T + U @ B.T + y
    kernels = [SquaredExpKernel(s, ell)] * n
    return GpssmModel(A, B, np.full(n, noise), kernels, Dataset(X, U, Xp))


class TestKernel:
    def test_matches_loop_oracle(self, rng):
        k = SquaredExpKernel(0.7, [0.5, 2.0, 1.5])
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
        K = k(a, b)
        expected = [[se_kernel(p, q, 0.7, k.lengthscales) for q in b] for p in a]
        np.testing.assert_allclose(K, expected, rtol=1e-13)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_stationary_diagonal(self, x):
        k = SquaredExpKernel(2.5, [0.1, 1.0, 10.0])
        assert k(np.array([x]))[0, 0] == 2.5

    def test_decays_away_from_diagonal(self):
        # the exponent is negative: far points are uncorrelated, not explosive
        k = SquaredExpKernel(1.0, [1.0])
        assert k([[0.0]], [[5.0]])[0, 0] < 1e-10

    @pytest.mark.parametrize("s, ell", [(0.0, [1.0]), (-1.0, [1.0]), (1.0, [0.0]), (1.0, [np.inf])])
    def test_invalid(self, s, ell):
        with pytest.raises(ValueError):
            SquaredExpKernel(s, ell)


class TestDataset:
    def test_from_trajectory(self):
        X = np.arange(8.0).reshape(4, 2)
        d = Dataset.from_trajectory(X, np.ones((4, 1)))
        assert d.N == 3
        np.testing.assert_array_equal(d.Xplus, X[1:])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            Dataset([[np.nan]], [[0.0]], [[0.0]])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros((2, 2)))


class TestFitMean:
    def test_noiseless_recovery(self, rng):
        n, m = 3, 2
        A0, B0 = rng.standard_normal((n, n)), rng.standard_normal((n, m))
        N = 2 * (n + m)
        X, U = rng.standard_normal((N, n)), rng.standard_normal((N, m))
        A, B, R = fit_mean(Dataset(X, U, X @ A0.T + U @ B0.T))
        np.testing.assert_allclose(A, A0, atol=1e-8)
        np.testing.assert_allclose(B, B0, atol=1e-8)
        assert np.abs(R).max() < 1e-8

    def test_zero_outputs(self, rng):
        X, U = rng.standard_normal((10, 2)), rng.standard_normal((10, 1))
        A, B, _ = fit_mean(Dataset(X, U, np.zeros((10, 2))))
        assert np.all(A == 0) and np.all(B == 0)

    def test_too_few_samples(self, rng):
        with pytest.raises(RankDeficientError, match="at least"):
            fit_mean(Dataset(rng.standard_normal((2, 2)), rng.standard_normal((2, 1)), np.zeros((2, 2))))

    def test_deficient_direction_reported(self, rng):
        X = rng.standard_normal((20, 2))
        U = (X[:, 0] - X[:, 1])[:, None]
        with pytest.raises(RankDeficientError, match="direction"):
            fit_mean(Dataset(X, U, X))

    def test_published_model_within_standard_errors(self):
        # regenerate closed-loop data from the published linear model and noise
        gen = np.random.default_rng(2024)
        N = 500
        X = np.empty((N + 1, 4))
        U = np.empty((N, 2))
        X[0] = gen.uniform(-1, 1, 4)
        for k in range(N):
            U[k] = L_PUB @ X[k] + gen.standard_normal(2)
            X[k + 1] = A_PUB @ X[k] + B_PUB @ U[k] + np.sqrt(Q_PUB) * gen.standard_normal(4)
        data = Dataset.from_trajectory(X, U)
        A, B, _ = fit_mean(data)
        Z = data.inputs
        G = np.linalg.inv(Z.T @ Z)
        se = np.sqrt(np.outer(Q_PUB, np.diag(G)))  # per (output, regressor)
        err = np.abs(np.hstack([A - A_PUB, B - B_PUB]))
        assert np.all(err <= 3 * se)


class TestFitKernels:
    def test_iid_noise_recovered(self):
        gen = np.random.default_rng(11)
        N = 300
        X, U = gen.uniform(-2, 2, (N, 1)), gen.uniform(-2, 2, (N, 1))
        R = 0.1 * gen.standard_normal((N, 1))
        fit = fit_kernels(Dataset(X, U, X), R, restarts=3, seed=0)
        assert 0.005 <= fit.noise[0] <= 0.02
        assert fit.kernels[0].signal_variance < 10 * fit.noise[0]

    def test_sine_heldout_rmse(self):
        gen = np.random.default_rng(5)
        N = 100
        X, U = gen.uniform(-1, 1, (N, 1)), np.zeros((N, 1))
        R = np.sin(3 * X) + 0.1 * gen.standard_normal((N, 1))
        fit = fit_kernels(Dataset(X, U, X), R, restarts=3, seed=0)
        model = GpssmModel(np.zeros((1, 1)), np.zeros((1, 1)), fit.noise, fit.kernels, Dataset(X, U, R))
        grid = np.linspace(-0.9, 0.9, 50)[:, None]
        mean, _ = model.posterior_batch(grid, np.zeros((50, 1)))
        assert np.sqrt(np.mean((mean[:, 0] - np.sin(3 * grid[:, 0])) ** 2)) < 0.05

    def test_zero_residuals_warn(self, rng):
        X, U = rng.standard_normal((15, 1)), rng.standard_normal((15, 1))
        with pytest.warns(UserWarning, match="identically zero"):
            fit = fit_kernels(Dataset(X, U, X), np.zeros((15, 1)), restarts=2, seed=0)
        assert fit.diagnostics["degenerate_outputs"] == [0]

    def test_deterministic_given_seed(self, rng):
        X, U = rng.standard_normal((30, 1)), rng.standard_normal((30, 1))
        R = np.sin(X) + 0.05 * rng.standard_normal((30, 1))
        a = fit_kernels(Dataset(X, U, X), R, restarts=3, seed=9)
        b = fit_kernels(Dataset(X, U, X), R, restarts=3, seed=9)
        assert a.noise[0] == b.noise[0]
        np.testing.assert_array_equal(a.kernels[0].lengthscales, b.kernels[0].lengthscales)

    def test_restarts_validated(self, rng):
        with pytest.raises(ValueError):
            fit_kernels(Dataset([[0.0]], [[0.0]], [[0.0]]), [[0.0]], restarts=0)


class TestPosterior:
    def test_zero_residual_collapse(self, rng):
        A, B = rng.standard_normal((2, 2)), rng.standard_normal((2, 1))
        X, U = rng.standard_normal((6, 2)), rng.standard_normal((6, 1))
        model = GpssmModel(A, B, [0.1, 0.1], [SquaredExpKernel(1.0, [1.0] * 3)] * 2,
                           Dataset(X, U, X @ A.T + U @ B.T))
        x, u = rng.standard_normal(2), rng.standard_normal(1)
        np.testing.assert_array_equal(posterior(model, x, u).mean, A @ x + B @ u)

    def test_single_point_closed_form(self):
        s, ell, q = 0.8, np.array([0.6, 1.3]), 0.05
        z1, y1 = np.array([0.3, -0.2]), 0.4
        model = model_from(z1[None], [y1], s, ell, q, A=np.array([[0.5]]), B=np.array([[2.0]]))
        zq = np.array([0.1, 0.25])
        k1 = s * np.exp(-np.sum((zq - z1) ** 2 / ell**2))
        mom = posterior(model, zq[:1], zq[1:])
        assert mom.mean[0] == pytest.approx(0.5 * 0.1 + 2.0 * 0.25 + k1 / (s + q) * y1, abs=1e-14)
        assert mom.variance[0] == pytest.approx(s - k1**2 / (s + q), abs=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_joint_gaussian_oracle(self, seed):
        gen = np.random.default_rng(seed)
        Z, y = gen.standard_normal((3, 2)), gen.standard_normal(3)
        s, ell, q = gen.uniform(0.5, 2), gen.uniform(0.3, 2, 2), gen.uniform(1e-3, 0.1)
        model = model_from(Z, y, s, ell, q)
        zq = gen.standard_normal(2)
        mom = posterior(model, zq[:1], zq[1:])
        mean, var = joint_gaussian_posterior(Z, y, zq, s, ell, q)
        assert abs(mom.mean[0] - mean) <= 1e-8
        assert abs(mom.variance[0] - var) <= 1e-8

    def test_dimension_mismatch(self, small_model):
        model, _ = small_model
        with pytest.raises(ValueError):
            posterior(model, [0.0], [0.0])

    def test_variance_dominance(self, small_model, rng):
        model, bounds = small_model
        Xq, Uq = rng.uniform(-3, 3, (1000, 2)), rng.uniform(-3, 3, (1000, 1))
        _, var = model.posterior_batch(Xq, Uq)
        assert np.all(var >= 0)
        assert np.all(bounds.sigma_hat - var >= -1e-10)

    def test_interpolation(self):
        Z = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
        y = np.array([0.3, -0.7, 1.1])
        model = model_from(Z, y, 1.0, [0.7, 0.7], 1e-12)
        mean, _ = model.posterior_batch(Z[:, :1], Z[:, 1:])
        np.testing.assert_allclose(mean[:, 0], y, atol=1e-4)

    def test_mean_decomposition(self, small_model, rng):
        model, _ = small_model
        Xq, Uq = rng.standard_normal((50, 2)), rng.standard_normal((50, 1))
        mean, _ = model.posterior_batch(Xq, Uq)
        np.testing.assert_allclose(Xq @ model.A.T + Uq @ model.B.T + model.mean_correction(Xq, Uq), mean,
                                   atol=1e-12)

    def test_cached_solves_match_direct(self, small_model):
        model, _ = small_model
        Z = model.data.inputs
        for i, k in enumerate(model.kernels):
            direct = np.linalg.solve(k(Z) + model.noise[i] * np.eye(len(Z)), model.residuals[:, i])
            np.testing.assert_allclose(model.weights[:, i], direct, rtol=1e-8, atol=1e-8 * np.abs(direct).max())


@pytest.fixture(scope="module")
def draws(small_model):
    """10^5 one-step samples at a fixed query point."""
    model, _ = small_model
    gen = np.random.default_rng(0)
    x, u = np.array([0.2, -0.4]), np.array([0.5])
    S = np.array([sample_posterior_step(model, x, u, gen) for _ in range(100_000)])
    return model, posterior(model, x, u), S


class TestSampling:
    def test_deterministic_limit(self):
        Z = np.array([[0.0, 0.0]])
        model = model_from(Z, [0.0], 1.0, [1.0, 1.0], 0.0)
        # at the single training point with zero noise the posterior variance vanishes
        assert sample_posterior_step(model, [0.0], [0.0], 3)[0] == pytest.approx(0.0, abs=1e-7)

    def test_reproducible(self, small_model):
        model, _ = small_model
        a = sample_posterior_step(model, [0.1, 0.1], [0.0], 42)
        b = sample_posterior_step(model, [0.1, 0.1], [0.0], 42)
        np.testing.assert_array_equal(a, b)

    def test_sample_mean(self, draws):
        _, mom, S = draws
        sd = np.sqrt(mom.variance + draws[0].noise)
        assert np.all(np.abs(S.mean(0) - mom.mean) <= 4 * sd / np.sqrt(len(S)))

    def test_sample_covariance(self, draws):
        model, mom, S = draws
        target = np.diag(mom.variance + model.noise)
        C = np.cov(S.T)
        assert np.all(np.abs(np.diag(C) - np.diag(target)) <= 0.05 * np.diag(target))
        assert abs(C[0, 1]) <= 0.05 * np.sqrt(target[0, 0] * target[1, 1])


class TestPhi:
    def test_zero_residuals(self, rng):
        X, U = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
        model = model_from(np.hstack([X, U]), np.zeros(5), 1.0, [1.0, 1.0], 0.1)
        for rule in ("rkhs", "bounded", "signed"):
            assert compute_phi(model, rule=rule) == 0.0

    @pytest.mark.parametrize("rule", ["rkhs", "bounded", "signed"])
    def test_single_point_closed_form(self, rule):
        s, q, r = 0.6, 0.2, -1.3
        model = model_from(np.array([[0.4, 0.1]]), [r], s, [1.0, 1.0], q)
        assert compute_phi(model, rule=rule) == pytest.approx((s / (s + q) * r) ** 2, rel=1e-12)

    @pytest.mark.parametrize("rule", ["rkhs", "bounded"])
    def test_sampling_bound(self, small_model, rule, rng):
        model, _ = small_model
        phi = compute_phi(model, rule=rule, check_samples=0)
        Xq, Uq = rng.uniform(-4, 4, (1000, 2)), rng.uniform(-4, 4, (1000, 1))
        mh = model.mean_correction(Xq, Uq)
        assert np.all((mh**2).sum(1) <= phi * (1 + 1e-9))

    def test_rkhs_not_looser_than_bounded(self, small_model):
        model, _ = small_model
        assert compute_phi(model, "rkhs") <= compute_phi(model, "bounded") * (1 + 1e-12)

    def test_signed_is_not_a_bound_in_general(self):
        # two opposite residuals: the weights cancel in the sum but the correction is not zero
        Z = np.array([[-1.0, 0.0], [1.0, 0.0]])
        model = model_from(Z, [1.0, -1.0], 1.0, [0.5, 0.5], 1e-6)
        assert compute_phi(model, "signed") < 1e-12
        assert (model.mean_correction(Z[:1, :1], Z[:1, 1:]) ** 2).sum() > 0.9
        assert compute_phi(model, "rkhs") > 0.9

    def test_unknown_rule(self, small_model):
        with pytest.raises(ValueError):
            compute_phi(small_model[0], rule="nope")

    def test_bounds_from_model(self, small_model):
        model, bounds = small_model
        np.testing.assert_array_equal(bounds.sigma_hat, [k.signal_variance for k in model.kernels])
        assert bounds.q_bar.shape == (4, 4)
        np.testing.assert_array_equal(np.diag(bounds.q_bar), np.r_[bounds.sigma_hat, model.noise])
        assert uncertainty_bounds(model).phi == bounds.phi


class TestTheta:
    def test_scalar_example(self):
        b = UncertaintyBounds(0.0, [1.0], [1.0])
        np.testing.assert_allclose(theta(b, 0.5, 1), [[8.0]])

    @pytest.mark.parametrize("p", [0.0, 0.3, 0.99])
    def test_noise_free(self, p):
        b = UncertaintyBounds(1.0, np.zeros(3), np.zeros(3))
        np.testing.assert_array_equal(theta(b, p), 2 * np.eye(3))

    def test_block_product(self, rng):
        n, p = 3, 0.8
        b = UncertaintyBounds(0.37, rng.uniform(0, 1, n), rng.uniform(0, 1, n))
        I = np.eye(n)
        left = np.hstack([I, I, I])
        mid = np.zeros((3 * n, 3 * n))
        mid[:n, :n] = 2 * b.phi * I
        mid[n:, n:] = 2 * n / (1 - p) * b.q_bar
        np.testing.assert_allclose(theta(b, p), left @ mid @ left.T, atol=1e-12)

    @settings(max_examples=50)
    @given(st.floats(0, 0.999), st.floats(0, 0.999), st.floats(0, 10))
    def test_monotone_in_p(self, p1, p2, phi):
        p1, p2 = sorted((p1, p2))
        b = UncertaintyBounds(phi, [0.1, 2.0], [0.3, 0.0])
        assert np.linalg.eigvalsh(theta(b, p2) - theta(b, p1)).min() >= 0

    @pytest.mark.parametrize("p", [1.0, -0.1])
    def test_invalid_level(self, p):
        with pytest.raises(ValueError):
            theta(UncertaintyBounds(0.0, [1.0], [1.0]), p)

    def test_negative_bounds_rejected(self):
        with pytest.raises(ValueError):
            UncertaintyBounds(-1.0, [1.0], [1.0])

