import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from strat_tte.errors import FitError, SeparationError
from strat_tte.logistic import (default_lambda_grid, fit_lasso_linear, fit_lasso_logistic,
                                irls_logistic, kkt_violation, lasso_logistic_path)


def newton_oracle(x, y, tol=1e-12):
    """Independent ML fit: BFGS on the negative log-likelihood with exact
    gradient, refined by explicit Newton steps."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)

    def nll(b):
        eta = x @ b
        return float(np.sum(np.logaddexp(0.0, eta) - y * eta))

    def grad(b):
        return x.T @ (expit(x @ b) - y)

    res = minimize(nll, np.zeros(x.shape[1]), jac=grad, method="BFGS",
                   options={"gtol": 1e-10, "maxiter": 500})
    b = res.x
    for _ in range(50):
        p = expit(x @ b)
        g = x.T @ (y - p)
        if np.max(np.abs(g)) < tol:
            break
        h = x.T @ (x * (p * (1 - p))[:, None])
        b = b + np.linalg.solve(h, g)
    return b


def _toy_design(seed, n=20, p=3):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    eta = x @ rng.normal(scale=0.8, size=p)
    y = (rng.random(n) < expit(eta)).astype(float)
    if y.min() == y.max():  # keep the response non-degenerate
        y[0] = 1 - y[0]
    return x, y


class TestIrls:
    def test_intercept_only_gives_logit_of_mean(self):
        y = np.array([1, 0, 0, 1, 0, 0, 0, 1, 0, 0], dtype=float)
        x = np.ones((10, 1))
        beta = irls_logistic(x, y)
        assert beta[0] == pytest.approx(np.log(0.3 / 0.7), abs=1e-10)

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_matches_independent_newton(self, seed):
        x, y = _toy_design(seed)
        beta = irls_logistic(x, y)
        oracle = newton_oracle(x, y)
        np.testing.assert_allclose(beta, oracle, atol=1e-8)

    def test_score_at_optimum_is_small(self):
        x, y = _toy_design(4, n=200, p=4)
        beta = irls_logistic(x, y)
        score = x.T @ (y - expit(x @ beta))
        assert np.max(np.abs(score)) < 1e-6 * len(y)

    def test_all_zero_response_is_separation_error(self):
        x = np.column_stack([np.ones(15), np.arange(15.0)])
        with pytest.raises(SeparationError):
            irls_logistic(x, np.zeros(15))

    def test_perfectly_separated_covariate_raises(self):
        x = np.column_stack([np.ones(20), np.r_[np.full(10, -2.0), np.full(10, 2.0)]])
        y = np.r_[np.zeros(10), np.ones(10)]
        with pytest.raises(SeparationError):
            irls_logistic(x, y)

    def test_rank_deficient_design_names_columns(self):
        rng = np.random.default_rng(0)
        x = np.column_stack([np.ones(30), rng.normal(size=30)])
        x = np.column_stack([x, x[:, 1]])  # duplicate column
        y = (rng.random(30) < 0.5).astype(float)
        with pytest.raises(FitError, match="rank"):
            irls_logistic(x, y)

    def test_offset_is_respected(self):
        rng = np.random.default_rng(17)
        n = 200
        x = np.column_stack([np.ones(n), rng.normal(size=n)])
        off = np.linspace(-1, 1, n)
        y = (rng.random(n) < expit(0.3 * x[:, 1] + off)).astype(float)
        beta = irls_logistic(x, y, offset=off)
        score = x.T @ (y - expit(x @ beta + off))
        assert np.max(np.abs(score)) < 1e-7
        # the no-offset solution does not solve the offset score equations
        beta_no_off = irls_logistic(x, y)
        score_wrong = x.T @ (y - expit(x @ beta_no_off + off))
        assert np.max(np.abs(score_wrong)) > 1e-3


class TestLassoLogistic:
    def test_huge_lambda_zeroes_penalized_coefficients(self):
        x, y = _toy_design(6, n=60, p=4)
        mask = np.array([False, True, True, True])
        path = lasso_logistic_path(x, y, mask, np.array([1e6]))
        assert np.all(path[0][1:] == 0.0)
        assert path[0][0] == pytest.approx(np.log(y.mean() / (1 - y.mean())), abs=1e-6)

    def test_lambda_zero_matches_irls(self):
        x, y = _toy_design(7, n=80, p=4)
        mask = np.array([False, True, True, True])
        path = lasso_logistic_path(x, y, mask, np.array([0.0]), tol=1e-10, max_irls_iter=200)
        beta_mle = irls_logistic(x, y)
        np.testing.assert_allclose(path[0], beta_mle, atol=1e-5)

    @pytest.mark.parametrize("seed", [8, 9])
    def test_kkt_on_selected_fit(self, seed):
        rng = np.random.default_rng(seed)
        n, p = 150, 8
        x = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
        beta_true = np.zeros(p)
        beta_true[[1, 3]] = [1.0, -1.5]
        y = (rng.random(n) < expit(x @ beta_true)).astype(float)
        mask = np.array([False] + [True] * (p - 1))
        folds = np.arange(n) % 4
        res = fit_lasso_logistic(x, y, mask, fold_index=folds)
        assert kkt_violation(x, y, res.beta, mask, res.lambda_selected) < 1e-6

    def test_empty_grid_rejected(self):
        x, y = _toy_design(10)
        with pytest.raises(ValueError):
            lasso_logistic_path(x, y, np.array([False, True, True]), np.array([]))
        with pytest.raises(ValueError):
            fit_lasso_logistic(x, y, np.array([False, True, True]), lambda_grid=[])

    def test_default_grid_kills_everything_at_top(self):
        x, y = _toy_design(11, n=100, p=5)
        mask = np.array([False] + [True] * 4)
        grid = default_lambda_grid(x, y, mask)
        path = lasso_logistic_path(x, y, mask, grid)
        top = int(np.argmax(grid))
        assert np.all(path[top][mask] == 0.0)

    def test_deterministic(self):
        x, y = _toy_design(12, n=90, p=5)
        mask = np.array([False] + [True] * 4)
        folds = np.arange(90) % 5
        a = fit_lasso_logistic(x, y, mask, fold_index=folds)
        b = fit_lasso_logistic(x, y, mask, fold_index=folds)
        assert np.array_equal(a.beta, b.beta)
        assert a.lambda_selected == b.lambda_selected


class TestLassoLinear:
    def test_matches_ols_at_zero(self):
        rng = np.random.default_rng(13)
        x = np.column_stack([np.ones(50), rng.normal(size=(50, 3))])
        y = x @ np.array([0.5, 1.0, 0.0, -2.0]) + rng.normal(size=50)
        mask = np.array([False, True, True, True])
        res = fit_lasso_linear(x, y, mask, lambda_grid=[0.0])
        ols, *_ = np.linalg.lstsq(x, y, rcond=None)
        np.testing.assert_allclose(res.beta, ols, atol=1e-7)

    def test_kkt_and_shrinkage(self):
        rng = np.random.default_rng(14)
        n = 120
        x = np.column_stack([np.ones(n), rng.normal(size=(n, 6))])
        y = x[:, 1] * 2.0 + rng.normal(size=n)
        mask = np.array([False] + [True] * 6)
        res = fit_lasso_linear(x, y, mask, fold_index=np.arange(n) % 5)
        lam = res.lambda_selected
        grad = x.T @ (y - x @ res.beta) / n
        zero = mask & (res.beta == 0.0)
        if zero.any():
            assert np.max(np.abs(grad[zero])) <= lam + 1e-6
        assert res.beta[1] != 0.0  # the real signal survives
