import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

import oracles
from elearn.coding import build_coding
from elearn.dataio import Dataset, Scenario, add_intercept, simulate
from elearn.errors import DataError, InvalidArgumentError
from elearn.forest import ForestParams, fit_forest
from elearn.nuisance import (
    P_FLOOR,
    SIGMA2_CAP,
    SIGMA2_FLOOR,
    cross_fit,
    estimate_nuisances,
    fit_propensity_forest,
    fit_propensity_logistic,
    fit_treatment_free,
    fit_treatment_free_forest,
    fit_variance,
    floor_simplex,
    make_folds,
    oracle_variance,
)


def logistic_data(n, seed, K=3, p=2):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    tau = np.zeros((p + 1, K))
    tau[:, 1:] = rng.uniform(-1, 1, (p + 1, K - 1))
    P = softmax(add_intercept(X) @ tau, axis=1)
    A = (rng.random(n)[:, None] >= np.cumsum(P, axis=1)[:, :-1]).sum(axis=1) + 1
    return Dataset(X=X, A=A, Y=np.zeros(n), K=K), P


def mle_oracle(data):
    """Unpenalized multinomial MLE by BFGS; arm 1 is the reference."""
    Xt = add_intercept(data.X)
    d, K = Xt.shape[1], data.K
    rows = np.arange(data.n)

    def nll(theta):
        eta = np.hstack([np.zeros((data.n, 1)), Xt @ theta.reshape(d, K - 1)])
        return -np.mean(eta[rows, data.A - 1] - logsumexp(eta, axis=1))

    theta = minimize(nll, np.zeros(d * (K - 1)), method="BFGS", options={"gtol": 1e-9}).x
    return softmax(np.hstack([np.zeros((data.n, 1)), Xt @ theta.reshape(d, K - 1)]), axis=1)


class TestFloorSimplex:
    @settings(max_examples=100, deadline=None)
    @given(K=st.integers(2, 8), data=st.data())
    def test_on_floored_simplex(self, K, data):
        P = data.draw(arrays(float, (5, K), elements=st.floats(0, 10)))
        out = floor_simplex(P)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out >= P_FLOOR - 1e-12)

    def test_keeps_interior_rows(self):
        P = np.array([[0.2, 0.3, 0.5]])
        np.testing.assert_allclose(floor_simplex(P), P)

    def test_raises_small_entries(self):
        out = floor_simplex([[0.0, 0.5, 0.5]])
        np.testing.assert_allclose(out, [[0.01, 0.495, 0.495]])

    def test_infeasible_floor(self):
        with pytest.raises(InvalidArgumentError):
            floor_simplex(np.ones((1, 3)) / 3, floor=0.4)


class TestCrossFit:
    def test_constant_fitter(self):
        d = Dataset(X=np.zeros((20, 2)), A=np.ones(20, dtype=int), Y=np.zeros(20), K=2)
        out = cross_fit(d, lambda train: (lambda X: np.full(X.shape[0], 7.0)), folds=4)
        np.testing.assert_array_equal(out, 7.0)

    def test_leave_one_out_excludes_own_row(self):
        Y = np.array([1.0, 10.0, 100.0, 1000.0, 10000.0])
        d = Dataset(X=np.zeros((5, 1)), A=np.ones(5, dtype=int), Y=Y, K=2)
        out = cross_fit(d, lambda train: (lambda X: np.full(X.shape[0], train.Y.sum())), folds=5)
        np.testing.assert_array_equal(out, Y.sum() - Y)

    def test_fold_map_deterministic(self):
        a = make_folds(103, 10, seed=4)
        np.testing.assert_array_equal(a, make_folds(103, 10, seed=4))
        assert not np.array_equal(a, make_folds(103, 10, seed=5))
        counts = np.bincount(a)
        assert counts.min() == 10 and counts.max() == 11

    def test_too_few_rows(self):
        d = Dataset(X=np.zeros((3, 1)), A=[1, 2, 1], Y=np.zeros(3), K=2)
        with pytest.raises(InvalidArgumentError):
            cross_fit(d, lambda train: (lambda X: np.zeros(X.shape[0])), folds=5)


class TestPropensityLogistic:
    def test_intercept_only_gives_frequencies(self):
        A = np.array([1] * 10 + [2] * 30 + [3] * 60)
        d = Dataset(X=np.zeros((100, 2)), A=A, Y=np.zeros(100), K=3)
        m = fit_propensity_logistic(d, lam=0.0)
        np.testing.assert_allclose(m.predict(np.zeros((4, 2))), [[0.1, 0.3, 0.6]] * 4, atol=1e-4)

    def test_huge_penalty_gives_frequencies(self):
        d, _ = logistic_data(800, 1)
        m = fit_propensity_logistic(d, lam=1e6)
        np.testing.assert_array_equal(m.tau[1:], 0.0)
        freq = np.bincount(d.A, minlength=4)[1:] / d.n
        np.testing.assert_allclose(m.predict(d.X[:5]), np.tile(freq, (5, 1)), atol=1e-4)

    def test_centered_and_normalized(self):
        d, _ = logistic_data(500, 2)
        m = fit_propensity_logistic(d, lam=0.01)
        np.testing.assert_allclose(m.tau.sum(axis=1), 0.0, atol=1e-10)
        P = m.predict(np.random.default_rng(0).standard_normal((50, 2)) * 5)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(P >= P_FLOOR - 1e-12)

    def test_unpenalized_matches_mle_oracle(self):
        d, _ = logistic_data(1500, 3)
        m = fit_propensity_logistic(d, lam=0.0)
        np.testing.assert_allclose(m.predict(d.X, floor=None), mle_oracle(d), atol=2e-3)

    def test_tuned_fit_close_to_truth(self):
        d, P = logistic_data(5000, 4)
        m = fit_propensity_logistic(d, folds=5, grid_size=20)
        assert np.mean(np.abs(m.predict(d.X) - P)) < 0.03
        assert m.cv_loglik.shape == (20,)

    def test_rare_arm_named(self):
        A = np.array([1] * 20 + [2] * 19 + [3])
        d = Dataset(X=np.zeros((40, 1)), A=A, Y=np.zeros(40), K=3)
        with pytest.raises(DataError, match="arm 3"):
            fit_propensity_logistic(d)


class TestPropensityForest:
    def test_randomized_assignment(self):
        rng = np.random.default_rng(0)
        n = 4000
        d = Dataset(X=rng.standard_normal((n, 4)), A=rng.integers(1, 4, n), Y=np.zeros(n), K=3)
        P = fit_propensity_forest(d, ForestParams(num_trees=50, min_leaf=50), folds=5)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        assert P.min() >= P_FLOOR - 1e-12
        assert np.mean(np.abs(P - 1 / 3)) < 0.05
        freq = np.bincount(d.A, minlength=4)[1:] / n
        np.testing.assert_allclose(P.mean(axis=0), freq, atol=0.01)

    def test_deterministic_arm_is_floored(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((300, 2))
        A = np.where(X[:, 0] > 0, 1, 2)
        d = Dataset(X=X, A=A, Y=np.zeros(300), K=2)
        P = fit_propensity_forest(d, ForestParams(num_trees=20), folds=3)
        assert P.min() >= P_FLOOR - 1e-12
        assert np.mean(P[np.arange(300), A - 1] > 0.8) > 0.8


class TestTreatmentFree:
    def linear_data(self, n, K, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, 3))
        A = rng.integers(1, K + 1, n)
        c = build_coding(K)
        eta = np.array([0.5, 1.0, -2.0, 0.3])
        B = rng.standard_normal((4, K - 1))
        Xt = add_intercept(X)
        Y = Xt @ eta + (1 - 1 / K) * np.einsum("nk,nk->n", c.W[A - 1], Xt @ B)
        Y += rng.standard_normal(n)
        return Dataset(X=X, A=A, Y=Y, K=K), eta, c

    def test_unpenalized_normal_equations(self):
        d, _, c = self.linear_data(500, 2, 0)
        prop = np.column_stack([np.full(500, 0.3), np.full(500, 0.7)])
        m = fit_treatment_free(d, prop, c, lam=0.0)
        Xt = add_intercept(d.X)
        D = np.hstack([Xt, oracles.angle_design(Xt, d.A, c.W)])
        w = 1 / prop[np.arange(500), d.A - 1]
        ref = np.linalg.solve((D * w[:, None]).T @ D, (D * w[:, None]).T @ d.Y)
        np.testing.assert_allclose(m.eta, ref[:4], atol=1e-6)
        np.testing.assert_allclose(m.B[:, 0], ref[4:], atol=1e-6)

    def test_recovers_linear_truth(self):
        d, eta, c = self.linear_data(10000, 3, 1)
        m = fit_treatment_free(d, np.full((d.n, 3), 1 / 3), c, lam=0.0)
        np.testing.assert_allclose(m.eta, eta, atol=0.05)

    @pytest.mark.parametrize("lam", [0.0, 0.5, None])
    def test_zero_outcome(self, lam):
        d, _, c = self.linear_data(200, 3, 2)
        d = Dataset(X=d.X, A=d.A, Y=np.zeros(200), K=3)
        m = fit_treatment_free(d, np.full((200, 3), 1 / 3), c, lam=lam, folds=5, grid_size=5)
        np.testing.assert_allclose(m.eta, 0.0, atol=1e-12)

    def test_huge_penalty_keeps_only_intercepts(self):
        d, _, c = self.linear_data(400, 3, 3)
        prop = np.full((400, 3), 1 / 3)
        m = fit_treatment_free(d, prop, c, lam=1e6)
        np.testing.assert_array_equal(m.eta[1:], 0.0)
        np.testing.assert_array_equal(m.B[1:], 0.0)
        # intercepts: weighted least squares on the arm-coded intercept design
        D = np.hstack([np.ones((400, 1)), (1 - 1 / 3) * c.W[d.A - 1]])
        ref = np.linalg.lstsq(D, d.Y, rcond=None)[0]
        assert m.eta[0] == pytest.approx(ref[0], abs=1e-6)

    def test_tuned_penalty_is_on_grid(self):
        d, _, c = self.linear_data(300, 3, 4)
        m = fit_treatment_free(d, np.full((300, 3), 1 / 3), c, folds=5, grid_size=8)
        assert m.lam in m.lambdas and np.all(np.isfinite(m.eta))


class TestTreatmentFreeForest:
    def test_constant_outcome(self):
        rng = np.random.default_rng(0)
        d = Dataset(X=rng.standard_normal((200, 2)), A=rng.integers(1, 3, 200),
                    Y=np.full(200, -1.5), K=2)
        out = fit_treatment_free_forest(d, ForestParams(num_trees=10), folds=4)
        np.testing.assert_allclose(out, -1.5)

    def test_matches_pooled_when_arms_agree(self):
        rng = np.random.default_rng(1)
        n = 3000
        X = rng.uniform(-1, 1, (n, 2))
        truth = np.sin(3 * X[:, 0])
        d = Dataset(X=X, A=rng.integers(1, 3, n), Y=truth + 0.3 * rng.standard_normal(n), K=2)
        params = ForestParams(num_trees=50)
        avg = fit_treatment_free_forest(d, params, folds=5, seed=0)
        pooled = cross_fit(d, lambda train: fit_forest(train.X, train.Y, params).predict_many,
                           folds=5, seed=0)
        assert np.mean((avg - pooled) ** 2) < 0.1 * truth.var()
        assert np.mean((avg - truth) ** 2) < 0.05
        assert np.all(np.isfinite(avg)) and avg.min() >= d.Y.min() and avg.max() <= d.Y.max()


class TestVariance:
    def test_homoscedastic_truth(self):
        sc = Scenario(n=2000, p=5, K=3, seed=1)
        d = simulate(sc)
        S = fit_variance(d, sc.mu0(d.X), sc.effects(d.X), build_coding(3),
                         ForestParams(num_trees=100, min_leaf=25))
        assert np.mean(np.abs(S - 1) < 0.3) > 0.9

    def test_zero_residuals_hit_floor(self):
        sc = Scenario(n=300, p=5, K=3, seed=2)
        d = simulate(sc)
        gamma = sc.effects(d.X)
        Y = sc.mu0(d.X) + gamma[np.arange(300), d.A - 1]
        d = Dataset(X=d.X, A=d.A, Y=Y, K=3)
        S = fit_variance(d, sc.mu0(d.X), gamma, build_coding(3), ForestParams(num_trees=10))
        np.testing.assert_array_equal(S, SIGMA2_FLOOR)

    def test_clamped_above(self):
        rng = np.random.default_rng(0)
        d = Dataset(X=rng.standard_normal((100, 2)), A=rng.integers(1, 3, 100),
                    Y=np.full(100, 1e5), K=2)
        S = fit_variance(d, np.zeros(100), np.zeros((100, 2)), build_coding(2),
                         ForestParams(num_trees=5))
        np.testing.assert_array_equal(S, SIGMA2_CAP)

    def test_oracle_formula(self):
        sc = Scenario(n=10, p=5, K=3, heteroscedastic=True, tf_misspec=True)
        X = np.random.default_rng(0).standard_normal((50, 5))
        mu_hat = np.zeros(50)
        expected = sc.mu0(X)[:, None] ** 2 + sc.sigma2(X)
        np.testing.assert_allclose(oracle_variance(sc, X, mu_hat),
                                   np.clip(expected, SIGMA2_FLOOR, SIGMA2_CAP))
        np.testing.assert_allclose(oracle_variance(sc, X, sc.mu0(X)),
                                   np.clip(sc.sigma2(X), SIGMA2_FLOOR, SIGMA2_CAP))


class TestEstimateNuisances:
    def test_invariants(self):
        sc = Scenario(n=400, p=5, K=3, prop_misspec=True, seed=3)
        d = simulate(sc)
        nf = estimate_nuisances(d, build_coding(3), folds=5, seed=1)
        np.testing.assert_allclose(nf.prop.sum(axis=1), 1.0, atol=1e-12)
        assert nf.prop.min() >= P_FLOOR - 1e-12
        np.testing.assert_array_equal(nf.sigma2, 1.0)
        assert nf.folds.shape == (400,) and np.unique(nf.folds).size == 5
        assert np.all(np.isfinite(nf.mu0))

    def test_known_and_file(self):
        sc = Scenario(n=200, p=5, K=3, seed=4)
        d = simulate(sc)
        c = build_coding(3)
        known = estimate_nuisances(d, c, propensity="known", tf="zero", scenario=sc, folds=4)
        np.testing.assert_allclose(known.prop, floor_simplex(sc.propensity(d.X)))
        np.testing.assert_array_equal(known.mu0, 0.0)
        filed = estimate_nuisances(d, c, propensity="file", tf="zero",
                                   propensity_matrix=sc.propensity(d.X), folds=4)
        np.testing.assert_allclose(filed.prop, known.prop)
        with pytest.raises(DataError):
            estimate_nuisances(d, c, propensity="file", tf="zero",
                               propensity_matrix=np.ones((3, 3)) / 3, folds=4)
        with pytest.raises(InvalidArgumentError):
            estimate_nuisances(d, c, propensity="known", folds=4)

    def test_deterministic(self):
        sc = Scenario(n=300, p=5, K=3, seed=5)
        d = simulate(sc)
        c = build_coding(3)
        kw = dict(propensity="forest", tf="forest", folds=3, seed=2,
                  forest=ForestParams(num_trees=10))
        a, b = estimate_nuisances(d, c, **kw), estimate_nuisances(d, c, **kw)
        np.testing.assert_array_equal(a.prop, b.prop)
        np.testing.assert_array_equal(a.mu0, b.mu0)
