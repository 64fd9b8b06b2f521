"""Binomial regression workhorses: IRLS maximum likelihood and an L1-penalized
coordinate-descent path with cross-validated penalty selection.

Both operate on a dense design matrix with an explicit intercept column and
support fractional responses in [0, 1] (needed by the targeting step, which
fluctuates continuous pseudo-outcomes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import FitError, SeparationError

_W_FLOOR = 1e-5           # IRLS weight floor, keeps working response finite
_MAX_COEF = 1e4           # divergence guard


def log_likelihood(y, eta):
    """Binomial log-likelihood at linear predictor eta (fractional y ok)."""
    # log(1 + e^eta) computed stably
    softplus = np.where(eta > 30, eta, np.log1p(np.exp(np.minimum(eta, 30))))
    return float(np.sum(y * eta - softplus))


def irls_logistic(x, y, offset=None, tol=1e-8, max_iter=100, check=True):
    """Maximum-likelihood logistic regression via iteratively reweighted
    least squares.

    Converged when max_j |sum_i x_ij (y_i - p_i)| < tol. Raises
    SeparationError for degenerate responses or diverging coefficients and
    FitError for rank-deficient designs (naming the offending columns) or
    non-convergence (reporting the last gradient norm).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if check:
        if np.all(y == y[0]):
            raise SeparationError(f"response is constant ({y[0]:g}); likelihood is unbounded")
        _check_rank(x)

    beta = np.zeros(p)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    eta = x @ beta + off
    ll = log_likelihood(y, eta)
    grad_norm = np.inf
    for _ in range(max_iter):
        prob = expit(eta)
        grad = x.T @ (y - prob)
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm < tol:
            return beta
        if check and np.all(np.abs(y - prob) < 1e-6):
            raise SeparationError("all fitted probabilities saturated; data are separated")
        w = np.maximum(prob * (1.0 - prob), _W_FLOOR)
        z = (eta - off) + (y - prob) / w
        wx = x * w[:, None]
        try:
            step_beta = np.linalg.solve(x.T @ wx, x.T @ (w * z))
        except np.linalg.LinAlgError:
            step_beta = np.linalg.lstsq(np.sqrt(w)[:, None] * x, np.sqrt(w) * z, rcond=None)[0]
        # step-halving guards against overshoot; the tolerance is relative so
        # sub-resolution likelihood noise near the optimum cannot stall it
        direction = step_beta - beta
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * direction
            eta_c = x @ cand + off
            ll_c = log_likelihood(y, eta_c)
            if ll_c >= ll - 1e-8 * (abs(ll) + 1.0):
                break
            scale *= 0.5
        beta = beta + scale * direction
        eta = x @ beta + off
        ll = log_likelihood(y, eta)
        if np.max(np.abs(beta)) > _MAX_COEF:
            raise SeparationError(
                f"coefficients diverged (max |beta| > {_MAX_COEF:g}); data are likely separated"
            )
    raise FitError(f"IRLS did not converge in {max_iter} iterations; last max|score| = {grad_norm:.3e}")


def _check_rank(x):
    n, p = x.shape
    if p == 0:
        raise FitError("empty design matrix")
    # QR with column pivoting exposes (near-)dependent columns by name
    norms = np.linalg.norm(x, axis=0)
    dead = np.flatnonzero(norms == 0)
    if dead.size:
        raise FitError(f"design columns with all zeros: {dead.tolist()}")
    r = np.linalg.matrix_rank(x)
    if r < min(n, p):
        _, rdiag = np.linalg.qr(x)
        small = np.flatnonzero(np.abs(np.diag(rdiag)) < 1e-8 * np.abs(rdiag[0, 0]))
        raise FitError(f"rank-deficient design (rank {r} < {p}); dependent columns near indices {small.tolist()}")


@dataclass
class LassoPathResult:
    beta: np.ndarray            # (p,) coefficients at the selected lambda, original scale
    lambda_grid: np.ndarray
    lambda_selected: float
    cv_deviance: np.ndarray | None   # per-lambda CV deviance (None when grid has one point)
    path: np.ndarray            # (n_lambda, p) full path, original scale


def default_lambda_grid(x, y, penalty_mask, n_points=25, min_ratio=1e-2):
    """glmnet-style log-spaced grid from the smallest lambda that zeroes all
    penalized coefficients down to min_ratio times it."""
    n = x.shape[0]
    resid = y - y.mean()
    grad = np.abs(x.T @ resid) / n
    lam_max = float(np.max(grad[penalty_mask])) if penalty_mask.any() else 1.0
    lam_max = max(lam_max, 1e-10)
    return np.geomspace(lam_max, lam_max * min_ratio, n_points)


def lasso_logistic_path(x, y, penalty_mask, lambda_grid, offset=None,
                        tol=1e-7, max_cd_iter=1000, max_irls_iter=50):
    """Penalized logistic path over a decreasing lambda grid with warm starts.

    Objective at each lambda: -(1/n) loglik + lambda * sum_{j in mask} |beta_j|.
    Columns outside ``penalty_mask`` (intercept, time terms) are unpenalized.
    Returns the (n_lambda, p) coefficient path.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if lambda_grid.size == 0:
        raise ValueError("lambda_grid must be non-empty")
    order = np.argsort(-lambda_grid)  # fit from strongest penalty down
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)

    xt = np.ascontiguousarray(x.T)
    beta = np.zeros(p)
    path = np.zeros((lambda_grid.size, p))
    for idx in order:
        lam_vec = np.where(penalty_mask, lambda_grid[idx], 0.0).astype(float)
        for _ in range(max_irls_iter):
            eta = x @ beta + off
            prob = expit(eta)
            w = np.maximum(prob * (1.0 - prob), _W_FLOOR)
            z = (eta - off) + (y - prob) / w
            r = z - (eta - off)
            cj = (xt * xt) @ w / n
            beta_before = beta.copy()
            kernels.cd_solve(xt, w, r, beta, lam_vec, cj, tol, max_cd_iter)
            if np.max(np.abs(beta - beta_before)) < tol:
                break
        path[idx] = beta
    return path


def cv_deviance_for_path(x, y, penalty_mask, lambda_grid, fold_index, offset=None):
    """Held-out binomial deviance per lambda, summed across folds.

    ``fold_index`` assigns each ROW to a fold; callers group rows by subject
    upstream so a subject's person-time rows never straddle train/test.
    """
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    folds = np.unique(fold_index)
    dev = np.zeros(lambda_grid.size)
    off = np.zeros(x.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    for f in folds:
        test = fold_index == f
        train = ~test
        path = lasso_logistic_path(x[train], y[train], penalty_mask, lambda_grid, offset=off[train])
        eta_test = x[test] @ path.T + off[test, None]      # (n_test, n_lambda)
        p_test = np.clip(expit(eta_test), 1e-12, 1 - 1e-12)
        yt = y[test][:, None]
        dev += -2.0 * np.sum(yt * np.log(p_test) + (1 - yt) * np.log(1 - p_test), axis=0)
    return dev


def fit_lasso_logistic(x, y, penalty_mask, lambda_grid=None, fold_index=None, offset=None):
    """Full lasso-logistic fit: path, CV selection, refit on all rows.

    Lambda is chosen to minimize cross-validated deviance; ties go to the
    larger (sparser) lambda. With a single grid point or no folds, that
    point is used directly.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    penalty_mask = np.asarray(penalty_mask, dtype=bool)
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(x, y, penalty_mask)
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if lambda_grid.size == 0:
        raise ValueError("lambda_grid must be non-empty")

    cv_dev = None
    if lambda_grid.size == 1 or fold_index is None:
        lam_sel = float(lambda_grid[0])
    else:
        cv_dev = cv_deviance_for_path(x, y, penalty_mask, lambda_grid, fold_index, offset=offset)
        best = np.flatnonzero(cv_dev <= cv_dev.min() + 1e-12)
        lam_sel = float(lambda_grid[best].max())

    path = lasso_logistic_path(x, y, penalty_mask, lambda_grid, offset=offset)
    sel_idx = int(np.argmin(np.abs(lambda_grid - lam_sel)))
    return LassoPathResult(
        beta=path[sel_idx].copy(),
        lambda_grid=lambda_grid,
        lambda_selected=lam_sel,
        cv_deviance=cv_dev,
        path=path,
    )


def lasso_linear_path(x, y, penalty_mask, lambda_grid, tol=1e-7, max_cd_iter=1000):
    """Squared-error analogue of ``lasso_logistic_path`` (unit weights, no
    IRLS loop); shares the coordinate-descent kernel."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if lambda_grid.size == 0:
        raise ValueError("lambda_grid must be non-empty")
    order = np.argsort(-lambda_grid)
    xt = np.ascontiguousarray(x.T)
    w = np.ones(n)
    cj = (xt * xt) @ w / n
    beta = np.zeros(p)
    r = y.copy()
    path = np.zeros((lambda_grid.size, p))
    for idx in order:
        lam_vec = np.where(penalty_mask, lambda_grid[idx], 0.0).astype(float)
        kernels.cd_solve(xt, w, r, beta, lam_vec, cj, tol, max_cd_iter)
        path[idx] = beta
    return path


def fit_lasso_linear(x, y, penalty_mask, lambda_grid=None, fold_index=None):
    """Linear lasso with CV-selected penalty (held-out MSE, ties to sparser)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    penalty_mask = np.asarray(penalty_mask, dtype=bool)
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(x, y, penalty_mask)
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if lambda_grid.size == 0:
        raise ValueError("lambda_grid must be non-empty")
    cv_mse = None
    if lambda_grid.size == 1 or fold_index is None:
        lam_sel = float(lambda_grid[0])
    else:
        cv_mse = np.zeros(lambda_grid.size)
        for f in np.unique(fold_index):
            test = fold_index == f
            path = lasso_linear_path(x[~test], y[~test], penalty_mask, lambda_grid)
            resid = y[test][:, None] - x[test] @ path.T
            cv_mse += np.sum(resid**2, axis=0)
        best = np.flatnonzero(cv_mse <= cv_mse.min() + 1e-12)
        lam_sel = float(lambda_grid[best].max())
    path = lasso_linear_path(x, y, penalty_mask, lambda_grid)
    sel_idx = int(np.argmin(np.abs(lambda_grid - lam_sel)))
    return LassoPathResult(
        beta=path[sel_idx].copy(),
        lambda_grid=lambda_grid,
        lambda_selected=lam_sel,
        cv_deviance=cv_mse,
        path=path,
    )


def kkt_violation(x, y, beta, penalty_mask, lam, offset=None):
    """Max KKT slack for zero penalized coefficients: |(1/n) x_j'(y-p)| - lam."""
    n = x.shape[0]
    off = 0.0 if offset is None else offset
    prob = expit(x @ beta + off)
    grad = np.abs(x.T @ (y - prob)) / n
    zero = penalty_mask & (beta == 0.0)
    if not zero.any():
        return -np.inf
    return float(np.max(grad[zero]) - lam)
