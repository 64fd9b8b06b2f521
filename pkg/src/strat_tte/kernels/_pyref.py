"""NumPy reference implementations of the hot kernels.

Semantically identical to the compiled versions in ``_core.pyx``; used as the
import-time fallback and as the comparison baseline in the benchmark suite.
"""

import numpy as np

BACKEND = "python"


def cd_solve(xt, w, r, beta, lam, cj, tol, max_iter):
    """Cyclic coordinate descent for a weighted, partially L1-penalized
    least-squares problem.

    Minimizes (1/2n) sum_i w_i (z_i - x_i . beta)^2 + sum_j lam_j |beta_j|
    where ``r`` holds the current residual z - X beta and is updated in
    place alongside ``beta``.

    Parameters
    ----------
    xt : (p, n) float64, C-contiguous design transpose
    w : (n,) observation weights
    r : (n,) residual, modified in place
    beta : (p,) coefficients, modified in place
    lam : (p,) per-coefficient penalty (0 marks unpenalized columns)
    cj : (p,) precomputed (1/n) sum_i w_i x_ij^2
    tol : convergence threshold on the max absolute coefficient change
    max_iter : cap on full cyclic passes

    Returns
    -------
    number of passes performed
    """
    p, n = xt.shape
    n_inv = 1.0 / n
    for it in range(max_iter):
        max_delta = 0.0
        for j in range(p):
            if cj[j] <= 0.0:
                continue
            xj = xt[j]
            b_old = beta[j]
            # rho = (1/n) sum w x_j r + c_j * b_old   (gradient at current beta)
            rho = n_inv * float(np.dot(w * xj, r)) + cj[j] * b_old
            if lam[j] > 0.0:
                if rho > lam[j]:
                    b_new = (rho - lam[j]) / cj[j]
                elif rho < -lam[j]:
                    b_new = (rho + lam[j]) / cj[j]
                else:
                    b_new = 0.0
            else:
                b_new = rho / cj[j]
            delta = b_new - b_old
            if delta != 0.0:
                r -= delta * xj
                beta[j] = b_new
                ad = abs(delta)
                if ad > max_delta:
                    max_delta = ad
        if max_delta < tol:
            return it + 1
    return max_iter


def _scan_feature(x, y, min_leaf):
    """Best SSE split for one feature. Returns (score, threshold, valid).

    Rows are sorted by x; candidate cuts lie between distinct consecutive
    values with at least ``min_leaf`` rows on each side. For 0/1 labels the
    SSE criterion coincides with the Gini impurity criterion.
    """
    n = x.shape[0]
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ys = y[order]
    s = np.cumsum(ys)
    q = np.cumsum(ys * ys)
    total_s = s[-1]
    total_q = q[-1]

    best_score = np.inf
    best_thresh = 0.0
    valid = False
    for k in range(min_leaf, n - min_leaf + 1):
        if xs[k - 1] >= xs[k]:
            continue
        sl = s[k - 1]
        ql = q[k - 1]
        sse_l = ql - sl * sl / k
        sr = total_s - sl
        qr = total_q - ql
        sse_r = qr - sr * sr / (n - k)
        score = sse_l + sse_r
        if score < best_score:
            best_score = score
            best_thresh = 0.5 * (xs[k - 1] + xs[k])
            valid = True
    return best_score, best_thresh, valid


def best_split_node(xsub, y, min_leaf):
    """Exhaustive best split over the candidate feature columns of a node.

    Parameters
    ----------
    xsub : (n, m) float64 candidate feature values for the node's rows
    y : (n,) float64 responses
    min_leaf : minimum rows per child

    Returns
    -------
    (j, threshold, score): column index into xsub (-1 if no valid split),
    midpoint threshold, and the summed child SSE of the winning split.
    Ties break toward the lower column index, then the lower threshold.
    """
    n, m = xsub.shape
    best_j = -1
    best_thresh = 0.0
    best_score = np.inf
    if n < 2 * min_leaf:
        return best_j, best_thresh, best_score
    for j in range(m):
        score, thresh, valid = _scan_feature(np.ascontiguousarray(xsub[:, j]), y, min_leaf)
        if valid and score < best_score:
            best_score = score
            best_thresh = thresh
            best_j = j
    return best_j, best_thresh, best_score
