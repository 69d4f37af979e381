# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: penalised IRLS/coordinate descent and batched low-dimensional refits.

Mirrors ``covreg._fallback`` step for step.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, sqrt, log, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double EXP_CLAMP = 700.0
cdef int OK = 0, MAX_ITER = 1, OVERFLOW = 2, STALLED = 3, SINGULAR = 4


cdef double _loss(const double* eta, const double[::1] t, const double[::1] z, Py_ssize_t n) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        if fabs(eta[i]) > EXP_CLAMP:
            return INFINITY
        acc += t[i] * eta[i] + z[i] * exp(-eta[i])
    return 0.5 * acc


cdef inline double _sign(double v) noexcept nogil:
    if v > 0:
        return 1.0
    if v < 0:
        return -1.0
    return 0.0


cdef double _kkt(const double* grad, const double* beta, const double[::1] pen, Py_ssize_t q) noexcept nogil:
    cdef double r, worst = 0.0
    cdef Py_ssize_t j
    for j in range(q):
        if beta[j] != 0.0:
            r = fabs(grad[j] + pen[j] * _sign(beta[j]))
        else:
            r = fabs(grad[j]) - pen[j]
            if r < 0.0:
                r = 0.0
        if r > worst:
            worst = r
    return worst


cdef void _gradient(const double[::1, :] X, const double* eta, const double[::1] t, const double[::1] z,
                    double* g, double* h, double* grad, Py_ssize_t n, Py_ssize_t q) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double e, acc
    for i in range(n):
        e = exp(-eta[i])
        g[i] = 0.5 * (t[i] - z[i] * e)
        h[i] = 0.5 * z[i] * e
    for j in range(q):
        acc = 0.0
        for i in range(n):
            acc += X[i, j] * g[i]
        grad[j] = acc


def lasso_irls(const double[::1, :] X, const double[::1] t, const double[::1] z, beta_init, const double[::1] pen,
               double tol, int max_newton=100, int max_sweeps=2000):
    """Penalised Newton/IRLS with coordinate-descent inner solves.

    Returns ``(beta, n_iter, kkt_residual, status)``; see ``_fallback.lasso_irls``.
    """
    cdef Py_ssize_t n = X.shape[0], q = X.shape[1]
    beta_arr = np.array(beta_init, dtype=np.float64, copy=True)
    cdef double[::1] beta = beta_arr
    cdef double* eta = <double*> malloc(n * sizeof(double))
    cdef double* g = <double*> malloc(n * sizeof(double))
    cdef double* h = <double*> malloc(n * sizeof(double))
    cdef double* r = <double*> malloc(n * sizeof(double))
    cdef double* dx = <double*> malloc(n * sizeof(double))
    cdef double* trial = <double*> malloc(n * sizeof(double))
    cdef double* grad = <double*> malloc(q * sizeof(double))
    cdef double* hjj = <double*> malloc(q * sizeof(double))
    cdef double* b = <double*> malloc(q * sizeof(double))
    cdef double* d = <double*> malloc(q * sizeof(double))
    cdef Py_ssize_t* active = <Py_ssize_t*> malloc(q * sizeof(Py_ssize_t))
    cdef Py_ssize_t i, j, k, n_active
    cdef int it, sweep, status = MAX_ITER, full_pass, n_iter = max_newton, moved
    cdef double f, f_new, kkt = INFINITY, acc, u, bj, delta, max_delta, inner_tol = 0.05 * tol
    cdef double decrease, step, pen_now, pen_new, noise
    try:
        with nogil:
            for i in range(n):
                acc = 0.0
                for j in range(q):
                    acc += X[i, j] * beta[j]
                eta[i] = acc
            f = _loss(eta, t, z, n)
            for j in range(q):
                f += pen[j] * fabs(beta[j])
            if f == INFINITY:
                status = OVERFLOW
                n_iter = 0
            else:
                for it in range(max_newton):
                    _gradient(X, eta, t, z, g, h, grad, n, q)
                    kkt = _kkt(grad, &beta[0], pen, q)
                    if kkt <= tol:
                        status = OK
                        n_iter = it
                        break
                    # inexact Newton: solve the quadratic model only as tightly as the current KKT gap warrants
                    inner_tol = 0.01 * kkt
                    if inner_tol < 0.05 * tol:
                        inner_tol = 0.05 * tol
                    for j in range(q):
                        acc = 0.0
                        for i in range(n):
                            acc += X[i, j] * X[i, j] * h[i]
                        hjj[j] = acc
                        b[j] = beta[j]
                        active[j] = j
                    for i in range(n):
                        r[i] = 0.0
                    n_active = q
                    full_pass = 1
                    for sweep in range(max_sweeps):
                        max_delta = 0.0
                        for k in range(n_active):
                            j = active[k]
                            if hjj[j] <= 0.0:
                                continue
                            acc = 0.0
                            for i in range(n):
                                acc += X[i, j] * (g[i] + h[i] * r[i])
                            u = b[j] * hjj[j] - acc
                            bj = fabs(u) - pen[j]
                            if bj > 0.0:
                                bj = _sign(u) * bj / hjj[j]
                            else:
                                bj = 0.0
                            delta = bj - b[j]
                            if delta != 0.0:
                                for i in range(n):
                                    r[i] += delta * X[i, j]
                                b[j] = bj
                                if fabs(delta) * hjj[j] > max_delta:
                                    max_delta = fabs(delta) * hjj[j]
                        if max_delta <= inner_tol:
                            if full_pass:
                                break
                            n_active = q
                            for j in range(q):
                                active[j] = j
                            full_pass = 1
                        elif full_pass:
                            n_active = 0
                            for j in range(q):
                                if b[j] != 0.0:
                                    active[n_active] = j
                                    n_active += 1
                            full_pass = 0
                    decrease = 0.0
                    pen_now = 0.0
                    pen_new = 0.0
                    for j in range(q):
                        d[j] = b[j] - beta[j]
                        decrease += grad[j] * d[j]
                        pen_now += pen[j] * fabs(beta[j])
                        pen_new += pen[j] * fabs(b[j])
                    decrease += pen_new - pen_now
                    noise = 1e-13 * (fabs(f) if fabs(f) > 1.0 else 1.0)
                    # below the noise floor the sign of the predicted decrease is meaningless
                    moved = 0
                    for j in range(q):
                        if d[j] != 0.0:
                            moved = 1
                            break
                    if decrease > noise or (decrease >= 0.0 and not moved):
                        status = STALLED
                        n_iter = it
                        break
                    for i in range(n):
                        acc = 0.0
                        for j in range(q):
                            acc += X[i, j] * d[j]
                        dx[i] = acc
                    step = 1.0
                    while True:
                        for i in range(n):
                            trial[i] = eta[i] + step * dx[i]
                        f_new = _loss(trial, t, z, n)
                        for j in range(q):
                            f_new += pen[j] * fabs(beta[j] + step * d[j])
                        if f_new <= f + 1e-4 * step * decrease:
                            break
                        if step == 1.0 and -decrease <= noise and f_new <= f + noise:
                            break
                        step *= 0.5
                        if step < 1e-12:
                            status = STALLED
                            break
                    if status == STALLED:
                        n_iter = it
                        break
                    for j in range(q):
                        beta[j] = beta[j] + step * d[j]
                    for i in range(n):
                        eta[i] = trial[i]
                    f = f_new
                else:
                    _gradient(X, eta, t, z, g, h, grad, n, q)
                    kkt = _kkt(grad, &beta[0], pen, q)
                    status = OK if kkt <= tol else MAX_ITER
                    n_iter = max_newton
    finally:
        free(eta); free(g); free(h); free(r); free(dx); free(trial)
        free(grad); free(hjj); free(b); free(d); free(active)
    return beta_arr, n_iter, kkt, status


cdef int _cholesky_solve(double* a, double* rhs, Py_ssize_t m) noexcept nogil:
    """In-place Cholesky of the m x m row-major ``a``; overwrites ``rhs`` with the solution."""
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(m):
        s = a[j * m + j]
        for k in range(j):
            s -= a[j * m + k] * a[j * m + k]
        if not (s > 1e-14 * (fabs(a[j * m + j]) + 1e-300)):
            return SINGULAR
        a[j * m + j] = sqrt(s)
        for i in range(j + 1, m):
            s = a[i * m + j]
            for k in range(j):
                s -= a[i * m + k] * a[j * m + k]
            a[i * m + j] = s / a[j * m + j]
    for i in range(m):
        s = rhs[i]
        for k in range(i):
            s -= a[i * m + k] * rhs[k]
        rhs[i] = s / a[i * m + i]
    for i in range(m - 1, -1, -1):
        s = rhs[i]
        for k in range(i + 1, m):
            s -= a[k * m + i] * rhs[k]
        rhs[i] = s / a[i * m + i]
    return OK


cdef int _newton(const double[::1, :] X, const double[::1] t, const double[::1] z, const Py_ssize_t* cols,
                 Py_ssize_t m, double tol, int max_newton, double* beta,
                 double* eta, double* w, double* trial, double* grad, double* hess) noexcept nogil:
    cdef Py_ssize_t n = X.shape[0], i, a, c
    cdef double st = 0.0, sz = 0.0, f, f_new, e, acc, decrease, step, gmax, noise
    cdef int it
    for i in range(n):
        st += t[i]
        sz += z[i]
    for a in range(m):
        beta[a] = 0.0
    beta[0] = log(sz / st)
    for i in range(n):
        eta[i] = beta[0] * X[i, cols[0]]
    f = _loss(eta, t, z, n)
    if f == INFINITY:
        return OVERFLOW
    for it in range(max_newton):
        for i in range(n):
            e = exp(-eta[i])
            trial[i] = 0.5 * (t[i] - z[i] * e)
            w[i] = 0.5 * z[i] * e
        gmax = 0.0
        for a in range(m):
            acc = 0.0
            for i in range(n):
                acc += X[i, cols[a]] * trial[i]
            grad[a] = acc
            if fabs(acc) > gmax:
                gmax = fabs(acc)
        if gmax <= tol:
            return OK
        for a in range(m):
            for c in range(a + 1):
                acc = 0.0
                for i in range(n):
                    acc += X[i, cols[a]] * X[i, cols[c]] * w[i]
                hess[a * m + c] = acc
                hess[c * m + a] = acc
        # solve H d = -grad; grad is overwritten with d
        for a in range(m):
            grad[a] = -grad[a]
        decrease = 0.0
        for a in range(m):
            decrease -= grad[a] * grad[a]
        for a in range(m):
            w[a] = grad[a]
        if _cholesky_solve(hess, grad, m) != OK:
            return SINGULAR
        decrease = 0.0
        for a in range(m):
            decrease -= w[a] * grad[a]
        for i in range(n):
            acc = 0.0
            for a in range(m):
                acc += X[i, cols[a]] * grad[a]
            w[i] = acc
        step = 1.0
        noise = 1e-13 * (fabs(f) if fabs(f) > 1.0 else 1.0)
        while True:
            for i in range(n):
                trial[i] = eta[i] + step * w[i]
            f_new = _loss(trial, t, z, n)
            if f_new <= f + 1e-4 * step * decrease:
                break
            if step == 1.0 and -decrease <= noise and f_new <= f + noise:
                break
            step *= 0.5
            if step < 1e-12:
                return STALLED
        for a in range(m):
            beta[a] += step * grad[a]
        for i in range(n):
            eta[i] = trial[i]
        f = f_new
    return MAX_ITER


def glm_newton(const double[::1, :] X, const double[::1] t, const double[::1] z, double tol, int max_newton=100):
    """Unpenalised fit on all columns of a small dense design. Returns ``(beta, status)``."""
    cdef Py_ssize_t n = X.shape[0], m = X.shape[1], a
    cdef Py_ssize_t* cols = <Py_ssize_t*> malloc(m * sizeof(Py_ssize_t))
    cdef double* eta = <double*> malloc(n * sizeof(double))
    cdef double* w = <double*> malloc((n if n > m else m) * sizeof(double))
    cdef double* trial = <double*> malloc(n * sizeof(double))
    cdef double* grad = <double*> malloc(m * sizeof(double))
    cdef double* hess = <double*> malloc(m * m * sizeof(double))
    out = np.empty(m)
    cdef double[::1] ov = out
    cdef int status
    try:
        for a in range(m):
            cols[a] = a
        with nogil:
            status = _newton(X, t, z, cols, m, tol, max_newton, &ov[0], eta, w, trial, grad, hess)
    finally:
        free(cols); free(eta); free(w); free(trial); free(grad); free(hess)
    return out, status


def refit_targets(const double[::1, :] X, const double[::1] t, const double[::1] z, support, targets,
                  double tol, int max_newton=100):
    """Refit on ``support + {j}`` for each target ``j``; see ``_fallback.refit_targets``."""
    sup = np.ascontiguousarray(support, dtype=np.intp)
    tgt = np.ascontiguousarray(targets, dtype=np.intp)
    cdef Py_ssize_t[::1] sv = sup
    cdef Py_ssize_t[::1] tv = tgt
    cdef Py_ssize_t n = X.shape[0], m0 = sv.shape[0], nt = tv.shape[0], m = m0 + 1
    cdef Py_ssize_t k, a, pos
    out = np.full(nt, np.nan)
    status = np.zeros(nt, dtype=np.intc)
    cdef double[::1] ov = out
    cdef int[::1] stv = status
    cdef Py_ssize_t* cols = <Py_ssize_t*> malloc(m * sizeof(Py_ssize_t))
    cdef double* beta = <double*> malloc(m * sizeof(double))
    cdef double* base = <double*> malloc(m * sizeof(double))
    cdef double* eta = <double*> malloc(n * sizeof(double))
    cdef double* w = <double*> malloc((n if n > m else m) * sizeof(double))
    cdef double* trial = <double*> malloc(n * sizeof(double))
    cdef double* grad = <double*> malloc(m * sizeof(double))
    cdef double* hess = <double*> malloc(m * m * sizeof(double))
    cdef int base_status = -1, st
    try:
        with nogil:
            for a in range(m0):
                cols[a] = sv[a]
            for k in range(nt):
                pos = -1
                for a in range(m0):
                    if sv[a] == tv[k]:
                        pos = a
                        break
                if pos >= 0:
                    if base_status < 0:
                        base_status = _newton(X, t, z, cols, m0, tol, max_newton, base, eta, w, trial, grad, hess)
                    ov[k] = base[pos]
                    stv[k] = base_status
                else:
                    cols[m0] = tv[k]
                    st = _newton(X, t, z, cols, m, tol, max_newton, beta, eta, w, trial, grad, hess)
                    ov[k] = beta[m0]
                    stv[k] = st
    finally:
        free(cols); free(beta); free(base); free(eta); free(w); free(trial); free(grad); free(hess)
    return out, status
