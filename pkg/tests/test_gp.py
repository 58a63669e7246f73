import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpattack.data import Dataset, generate_blobs, generate_two_moons, split
from gpattack.gp import (
    CLASSIFICATION,
    REJECT,
    FactorizationError,
    RejectionPolicy,
    accuracy,
    decision_grid,
    fit_classification_laplace,
    fit_regression,
    latent_gradient,
    latent_mean,
    load_gp,
    predict,
    predict_with_rejection,
    predict_with_zero_rejection,
    save_gp,
    select_variance,
    VARIANCE_GRID,
)
from gpattack.kernels import RBF, KernelSpec, kernel_eval, kernel_matrix


def dense_inverse_prediction(spec, X, y, jitter, query):
    """Brute-force oracle: mean and variance through an explicit inverse."""
    K = kernel_matrix(spec, X, X) + jitter * np.eye(len(X))
    K_inv = np.linalg.inv(K)
    k_star = kernel_matrix(spec, query[None, :], X)[0]
    mean = k_star @ K_inv @ y
    variance = kernel_eval(spec, query, query) - k_star @ K_inv @ k_star
    return mean, max(variance, 0.0)


def random_regression_case(seed, max_n=10, max_d=5):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_n + 1))
    d = int(rng.integers(1, max_d + 1))
    X = rng.uniform(-3, 3, size=(n, d))
    y = np.where(rng.random(n) > 0.5, 1.0, -1.0)
    spec = KernelSpec(RBF, lengthscale=float(rng.uniform(0.4, 2.5)), variance=float(rng.uniform(0.3, 3.0)))
    query = rng.uniform(-3, 3, size=d)
    return spec, X, y, query


class TestFitRegression:
    def test_interpolates_single_point(self):
        spec = KernelSpec(RBF)
        ds = Dataset(np.array([[0.5, -0.5]]), np.array([1.0]))
        gp = fit_regression(spec, ds, jitter=1e-9)
        assert predict(gp, np.array([0.5, -0.5])).mean == pytest.approx(1.0, abs=1e-6)

    def test_two_point_system_matches_hand_inverse(self):
        spec = KernelSpec(RBF, lengthscale=1.2, variance=0.8)
        X = np.array([[0.0, 0.0], [1.0, 0.5]])
        y = np.array([1.0, -1.0])
        jitter = 1e-8
        gp = fit_regression(spec, Dataset(X, y), jitter)
        query = np.array([0.3, -0.2])
        # explicit 2x2 inverse: [[a, b], [b, a]]^-1 = [[a, -b], [-b, a]] / (a^2 - b^2)
        a = kernel_eval(spec, X[0], X[0]) + jitter
        b = kernel_eval(spec, X[0], X[1])
        det = a * a - b * b
        k1 = kernel_eval(spec, query, X[0])
        k2 = kernel_eval(spec, query, X[1])
        expected = (k1 * (a * y[0] - b * y[1]) + k2 * (-b * y[0] + a * y[1])) / det
        assert predict(gp, query).mean == pytest.approx(expected, abs=1e-10)

    def test_conflicting_duplicate_labels_cancel(self):
        spec = KernelSpec(RBF)
        X = np.array([[1.0, 1.0], [1.0, 1.0]])
        gp = fit_regression(spec, Dataset(X, np.array([1.0, -1.0])), jitter=1e-6)
        assert abs(predict(gp, X[0]).mean) < 1e-9

    def test_alpha_solves_training_system(self):
        spec, X, y, _ = random_regression_case(3)
        jitter = 1e-6
        gp = fit_regression(spec, Dataset(X, y), jitter)
        K = kernel_matrix(spec, X, X) + jitter * np.eye(len(X))
        assert np.max(np.abs(K @ gp.alpha - y)) < 1e-8

    def test_factorization_error_reports_pivot(self):
        # exactly singular system: duplicated point and vanishing jitter
        spec = KernelSpec(RBF)
        X = np.array([[0.0], [0.0]])
        with pytest.raises(FactorizationError) as err:
            fit_regression(spec, Dataset(X, np.array([1.0, -1.0])), jitter=1e-300)
        assert err.value.pivot == 2

    def test_label_flip_flips_means(self):
        spec, X, y, query = random_regression_case(11)
        gp = fit_regression(spec, Dataset(X, y), 1e-8)
        flipped = fit_regression(spec, Dataset(X, -y), 1e-8)
        assert predict(gp, query).mean == pytest.approx(-predict(flipped, query).mean, abs=1e-10)


class TestFitClassification:
    def test_separated_blobs_train_accuracy(self):
        data = generate_blobs(40, 2, 10.0, 0)
        gp = fit_classification_laplace(KernelSpec(RBF, lengthscale=1.0), data)
        assert accuracy(gp, data)["accuracy"] == 1.0
        assert np.all(np.sign(gp.latent_mode) == data.labels)

    def test_symmetric_midpoint_probability(self):
        ds = Dataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1.0, -1.0]))
        gp = fit_classification_laplace(KernelSpec(RBF), ds)
        p = predict(gp, np.array([0.0, 0.0]))
        assert p.class_probability == pytest.approx(0.5, abs=1e-9)

    def test_zero_iterations_gives_prior(self):
        ds = Dataset(np.array([[1.0], [-1.0]]), np.array([1.0, -1.0]))
        gp = fit_classification_laplace(KernelSpec(RBF), ds, max_iter=0)
        assert np.array_equal(gp.latent_mode, [0.0, 0.0])
        assert predict(gp, np.array([0.4])).class_probability == 0.5

    def test_one_class_data_rejected(self):
        ds = Dataset(np.array([[0.0], [1.0]]), np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            fit_classification_laplace(KernelSpec(RBF), ds)

    def test_objective_never_decreases(self):
        data = generate_two_moons(60, 0.2, 1)
        history = []
        fit_classification_laplace(KernelSpec(RBF, lengthscale=0.4), data, objective_history=history)
        assert len(history) > 2
        diffs = np.diff(history)
        assert np.all(diffs >= -1e-9 * np.maximum(1.0, np.abs(history[:-1])))

    def test_mode_is_fixed_point(self):
        data = generate_two_moons(40, 0.1, 2)
        gp = fit_classification_laplace(KernelSpec(RBF, lengthscale=0.5), data, tol=1e-12)
        # latent mean at a training point reproduces the mode
        reproduced = np.array([latent_mean(gp, x) for x in data.features])
        assert np.max(np.abs(reproduced - gp.latent_mode)) < 1e-6


class TestPredict:
    def test_far_query_returns_to_prior(self):
        spec = KernelSpec(RBF, lengthscale=0.5, variance=1.7)
        ds = Dataset(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([1.0, -1.0]))
        gp = fit_regression(spec, ds, 1e-8)
        p = predict(gp, np.array([10.0, 0.0]))  # 20 lengthscales out
        assert abs(p.mean) < 1e-10
        assert p.variance == pytest.approx(1.7, abs=1e-6)

    def test_training_point_mean_near_label(self):
        spec = KernelSpec(RBF)
        ds = Dataset(np.array([[0.0], [3.0]]), np.array([1.0, -1.0]))
        gp = fit_regression(spec, ds, 1e-9)
        assert predict(gp, np.array([0.0])).mean == pytest.approx(1.0, abs=1e-6)

    def test_three_point_system_matches_dense_inverse(self):
        spec, X, y, query = random_regression_case(5, max_n=3)
        jitter = 1e-7
        gp = fit_regression(spec, Dataset(X, y), jitter)
        mean, variance = dense_inverse_prediction(spec, X, y, jitter, query)
        p = predict(gp, query)
        assert p.mean == pytest.approx(mean, abs=1e-9)
        assert p.variance == pytest.approx(variance, abs=1e-9)

    def test_oracle_equivalence_small_systems(self):
        for seed in range(40):
            spec, X, y, query = random_regression_case(seed)
            jitter = 1e-6
            gp = fit_regression(spec, Dataset(X, y), jitter)
            mean, variance = dense_inverse_prediction(spec, X, y, jitter, query)
            p = predict(gp, query)
            assert abs(p.mean - mean) < 1e-9
            assert abs(p.variance - variance) < 1e-9

    def test_variance_clamped_and_small_at_training_points(self):
        spec, X, y, _ = random_regression_case(21)
        jitter = 1e-6
        gp = fit_regression(spec, Dataset(X, y), jitter)
        rng = np.random.default_rng(0)
        for x in rng.uniform(-4, 4, size=(50, X.shape[1])):
            assert predict(gp, x).variance >= 0.0
        for x in X:
            assert predict(gp, x).variance <= 10 * jitter

    def test_dimension_mismatch(self):
        gp = fit_regression(KernelSpec(RBF), Dataset(np.array([[0.0, 1.0]]), np.array([1.0])), 1e-8)
        with pytest.raises(ValueError):
            predict(gp, np.array([1.0]))


class TestRejection:
    def test_policy_arithmetic(self):
        policy = RejectionPolicy(0.3, 0.3)
        assert policy.rejects(0.0)
        assert not policy.rejects(0.8)  # 0.8 > 0.7
        assert policy.rejects(0.65)  # 0.65 <= 0.7
        assert policy.rejects(0.7)  # boundary included
        assert not policy.rejects(-0.9)

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            RejectionPolicy(0.0, 0.3)
        with pytest.raises(ValueError):
            RejectionPolicy(0.3, 1.0)

    def test_through_model(self):
        # single +1 anchor: latent mean at distance r is k(r)/(1 + jitter)
        spec = KernelSpec(RBF)
        gp = fit_regression(spec, Dataset(np.zeros((1, 2)), np.array([1.0])), 1e-12)
        policy = RejectionPolicy(0.3, 0.3)
        x_high = np.array([np.sqrt(-2.0 * np.log(0.8)), 0.0])  # mean ~ 0.8
        x_mid = np.array([np.sqrt(-2.0 * np.log(0.65)), 0.0])  # mean ~ 0.65
        assert predict_with_rejection(gp, x_high, policy) == 1
        assert predict_with_rejection(gp, x_mid, policy) == REJECT
        assert predict_with_rejection(gp, np.array([50.0, 0.0]), policy) == REJECT

    @settings(max_examples=80, deadline=None)
    @given(
        mean=st.floats(min_value=-1.5, max_value=1.5),
        tau0=st.floats(min_value=0.01, max_value=0.99),
        tau1=st.floats(min_value=0.01, max_value=0.99),
        shrink0=st.floats(min_value=0.0, max_value=0.9),
        shrink1=st.floats(min_value=0.0, max_value=0.9),
    )
    def test_band_grows_as_thresholds_shrink(self, mean, tau0, tau1, shrink0, shrink1):
        # smaller taus (equivalently a larger rho) only ever widen the band
        wide = RejectionPolicy(tau0 * (1 - shrink0), tau1 * (1 - shrink1))
        if RejectionPolicy(tau0, tau1).rejects(mean):
            assert wide.rejects(mean)

    def test_zero_rejection(self):
        spec = KernelSpec(RBF)
        ds = Dataset(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([1.0, -1.0]))
        gp = fit_regression(spec, ds, 1e-8)
        assert predict_with_zero_rejection(gp, np.array([10.0, 0.0])) == REJECT
        assert predict_with_zero_rejection(gp, np.array([0.1, 0.0]), eps=1e-3) == 1

    def test_zero_eps_only_rejects_exact_zero(self):
        ds = Dataset(np.array([[1.0], [-1.0]]), np.array([1.0, -1.0]))
        gp = fit_regression(KernelSpec(RBF), ds, 1e-8)
        assert predict_with_zero_rejection(gp, np.array([0.9]), eps=0.0) == 1
        # a zero-iteration classifier has an exactly zero latent mean
        prior = fit_classification_laplace(KernelSpec(RBF), ds, max_iter=0)
        assert predict_with_zero_rejection(prior, np.array([0.9]), eps=0.0) == REJECT


class TestLatentGradient:
    def test_symmetric_pair_points_toward_positive(self):
        ds = Dataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1.0, -1.0]))
        gp = fit_regression(KernelSpec(RBF), ds, 1e-8)
        grad = latent_gradient(gp, np.array([0.0, 0.5]))
        assert grad[0] > 0  # toward the +1 anchor
        assert abs(grad[1]) < 1e-12

    def test_far_query_vanishes(self):
        ds = Dataset(np.array([[0.0, 0.0]]), np.array([1.0]))
        gp = fit_regression(KernelSpec(RBF, lengthscale=0.4), ds, 1e-8)
        assert np.linalg.norm(latent_gradient(gp, np.array([8.0, 0.0]))) < 1e-10

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        X = rng.uniform(-2, 2, size=(5, 3))
        y = np.where(rng.random(5) > 0.5, 1.0, -1.0)
        gp = fit_regression(KernelSpec(RBF, lengthscale=0.9), Dataset(X, y), 1e-8)
        for _ in range(10):
            x = rng.uniform(-2, 2, size=3)
            grad = latent_gradient(gp, x)
            fd = np.zeros(3)
            for j in range(3):
                up, down = x.copy(), x.copy()
                up[j] += 1e-5
                down[j] -= 1e-5
                fd[j] = (predict(gp, up).mean - predict(gp, down).mean) / 2e-5
            assert np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-10) < 1e-5


class TestDecisionGrid:
    def test_resolution_two_hits_corners(self):
        ds = Dataset(np.array([[0.2, 0.2]]), np.array([1.0]))
        gp = fit_regression(KernelSpec(RBF), ds, 1e-8)
        grid = decision_grid(gp, ((0.0, 1.0), (0.0, 1.0)), 2)
        assert grid.points.shape == (4, 2)
        assert {tuple(p) for p in grid.points} == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_antisymmetric_mean_field(self):
        ds = Dataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1.0, -1.0]))
        gp = fit_regression(KernelSpec(RBF), ds, 1e-10)
        grid = decision_grid(gp, ((-2.0, 2.0), (-1.0, 1.0)), 21)
        means = grid.means.reshape(21, 21)
        assert np.max(np.abs(means + means[::-1, :])) < 1e-9

    def test_two_moons_short_lengthscale_rejects_somewhere(self):
        data = generate_two_moons(80, 0.1, 0)
        gp = fit_classification_laplace(KernelSpec(RBF, lengthscale=0.15), data)
        grid = decision_grid(gp, ((-3.0, 4.0), (-3.0, 3.5)), 25, RejectionPolicy(0.5, 0.5))
        assert grid.reject_count() > 0

    def test_requires_2d(self):
        ds = Dataset(np.array([[0.0]]), np.array([1.0]))
        gp = fit_regression(KernelSpec(RBF), ds, 1e-8)
        with pytest.raises(ValueError):
            decision_grid(gp, ((0, 1), (0, 1)), 2)

    def test_csv_schema(self, tmp_path):
        ds = Dataset(np.array([[0.0, 0.0]]), np.array([1.0]))
        gp = fit_regression(KernelSpec(RBF), ds, 1e-8)
        path = tmp_path / "grid.csv"
        decision_grid(gp, ((0, 1), (0, 1)), 3).write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "x0,x1,label,mean,variance"
        assert len(lines) == 10


class TestAccuracy:
    def test_perfect_fit(self):
        data = generate_blobs(30, 2, 8.0, 1)
        gp = fit_classification_laplace(KernelSpec(RBF), data)
        result = accuracy(gp, data)
        assert result == {"accuracy": 1.0, "reject_rate": 0.0}

    def test_all_rejected(self):
        ds = Dataset(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([1.0, -1.0]))
        gp = fit_regression(KernelSpec(RBF, lengthscale=0.3), ds, 1e-8)
        far = Dataset(np.array([[30.0, 0.0], [40.0, 0.0]]), np.array([1.0, -1.0]))
        result = accuracy(gp, far, RejectionPolicy(0.1, 0.1))
        assert result == {"accuracy": 0.0, "reject_rate": 1.0}

    def test_two_moons_reference_quality(self):
        data = generate_two_moons(200, 0.1, 5)
        train, test = split(data, 0.5, 7)
        gp = fit_classification_laplace(KernelSpec(RBF, lengthscale=0.3), train)
        assert accuracy(gp, test)["accuracy"] >= 0.95

    def test_zero_rejection_accuracy(self):
        ds = Dataset(np.array([[0.0, 0.0], [3.0, 0.0]]), np.array([1.0, -1.0]))
        gp = fit_regression(KernelSpec(RBF, lengthscale=0.3), ds, 1e-8)
        mixed = Dataset(np.array([[0.0, 0.0], [30.0, 0.0]]), np.array([1.0, -1.0]))
        result = accuracy(gp, mixed, 1e-3)
        assert result["reject_rate"] == 0.5
        assert result["accuracy"] == 0.5


class TestSelectVariance:
    def test_returns_grid_member_deterministically(self):
        data = generate_two_moons(80, 0.2, 4)
        train, validation = split(data, 0.5, 4)
        spec = KernelSpec(RBF, lengthscale=0.3)
        chosen = select_variance(spec, train, validation)
        assert chosen in VARIANCE_GRID
        assert select_variance(spec, train, validation) == chosen

    def test_custom_grid(self):
        data = generate_blobs(40, 2, 8.0, 2)
        train, validation = split(data, 0.5, 2)
        chosen = select_variance(KernelSpec(RBF), train, validation, grid=(0.5, 2.0))
        assert chosen in (0.5, 2.0)


class TestSerialization:
    def test_round_trip_regression(self, tmp_path):
        spec, X, y, query = random_regression_case(17)
        gp = fit_regression(spec, Dataset(X, y), 1e-7)
        path = tmp_path / "model.json"
        save_gp(gp, path)
        loaded = load_gp(path)
        assert predict(loaded, query) == predict(gp, query)

    def test_round_trip_classification(self, tmp_path):
        data = generate_two_moons(40, 0.15, 3)
        gp = fit_classification_laplace(KernelSpec(RBF, lengthscale=0.4), data)
        path = tmp_path / "model.json"
        save_gp(gp, path)
        loaded = load_gp(path)
        q = np.array([0.5, 0.2])
        assert predict(loaded, q) == predict(gp, q)
        assert loaded.mode == CLASSIFICATION
