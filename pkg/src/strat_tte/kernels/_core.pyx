# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: coordinate descent and tree split search.

Mirrors ``_pyref`` exactly; keep the two in sync.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


def cd_solve(double[:, ::1] xt, double[::1] w, double[::1] r,
             double[::1] beta, double[::1] lam, double[::1] cj,
             double tol, int max_iter):
    cdef Py_ssize_t p = xt.shape[0]
    cdef Py_ssize_t n = xt.shape[1]
    cdef double n_inv = 1.0 / n
    cdef Py_ssize_t it, j, i
    cdef double rho, b_old, b_new, delta, max_delta, acc, lj, ad

    for it in range(max_iter):
        max_delta = 0.0
        for j in range(p):
            if cj[j] <= 0.0:
                continue
            b_old = beta[j]
            acc = 0.0
            for i in range(n):
                acc += w[i] * xt[j, i] * r[i]
            rho = n_inv * acc + cj[j] * b_old
            lj = lam[j]
            if lj > 0.0:
                if rho > lj:
                    b_new = (rho - lj) / cj[j]
                elif rho < -lj:
                    b_new = (rho + lj) / cj[j]
                else:
                    b_new = 0.0
            else:
                b_new = rho / cj[j]
            delta = b_new - b_old
            if delta != 0.0:
                for i in range(n):
                    r[i] -= delta * xt[j, i]
                beta[j] = b_new
                ad = delta if delta > 0.0 else -delta
                if ad > max_delta:
                    max_delta = ad
        if max_delta < tol:
            return it + 1
    return max_iter


cdef void _scan_feature(double[::1] xs, double[::1] ys, int min_leaf,
                        double* out_score, double* out_thresh, int* out_valid):
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t k, i
    cdef double total_s = 0.0, total_q = 0.0
    cdef double sl = 0.0, ql = 0.0, sr, qr, sse_l, sse_r, score
    cdef double best_score = np.inf
    cdef double best_thresh = 0.0
    cdef int valid = 0

    for i in range(n):
        total_s += ys[i]
        total_q += ys[i] * ys[i]

    for k in range(1, n - min_leaf + 1):
        sl += ys[k - 1]
        ql += ys[k - 1] * ys[k - 1]
        if k < min_leaf:
            continue
        if xs[k - 1] >= xs[k]:
            continue
        sse_l = ql - sl * sl / k
        sr = total_s - sl
        qr = total_q - ql
        sse_r = qr - sr * sr / (n - k)
        score = sse_l + sse_r
        if score < best_score:
            best_score = score
            best_thresh = 0.5 * (xs[k - 1] + xs[k])
            valid = 1

    out_score[0] = best_score
    out_thresh[0] = best_thresh
    out_valid[0] = valid


def best_split_node(double[:, ::1] xsub, double[::1] y, int min_leaf):
    cdef Py_ssize_t n = xsub.shape[0]
    cdef Py_ssize_t m = xsub.shape[1]
    cdef Py_ssize_t j, i
    cdef int best_j = -1
    cdef double best_thresh = 0.0
    cdef double best_score = np.inf
    cdef double score, thresh
    cdef int valid

    if n < 2 * min_leaf:
        return best_j, best_thresh, best_score

    xs_arr = np.empty(n, dtype=np.float64)
    ys_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] xs = xs_arr
    cdef double[::1] ys = ys_arr
    cdef cnp.ndarray[cnp.intp_t, ndim=1] order

    col_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] col = col_arr

    for j in range(m):
        for i in range(n):
            col[i] = xsub[i, j]
        order = np.argsort(col_arr, kind="stable")
        for i in range(n):
            xs[i] = col[order[i]]
            ys[i] = y[order[i]]
        _scan_feature(xs, ys, min_leaf, &score, &thresh, &valid)
        if valid and score < best_score:
            best_score = score
            best_thresh = thresh
            best_j = <int>j
    return best_j, best_thresh, best_score
