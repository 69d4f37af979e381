"""Pure numpy implementations of the hot kernels.

Same signatures and status codes as the compiled ``_kernels`` module; used
when the extension is not built or ``COVREG_PURE_PYTHON=1``.
"""

import numpy as np

EXP_CLAMP = 700.0

OK, MAX_ITER, OVERFLOW, STALLED, SINGULAR = 0, 1, 2, 3, 4


def _loss(eta, t, z):
    if np.any(np.abs(eta) > EXP_CLAMP):
        return np.inf
    return 0.5 * float(np.sum(t * eta + z * np.exp(-eta)))


def _kkt(grad, beta, pen):
    nz = beta != 0
    r = np.where(nz, np.abs(grad + pen * np.sign(beta)), np.maximum(np.abs(grad) - pen, 0.0))
    return float(r.max()) if r.size else 0.0


def lasso_irls(X, t, z, beta, pen, tol, max_newton=100, max_sweeps=2000):
    """Minimise ``0.5 * sum(t*eta + z*exp(-eta)) + sum(pen*|beta|)``, ``eta = X @ beta``.

    Newton/IRLS outer loop, cyclic coordinate descent with soft-thresholding on
    the quadratic model, backtracking line search on the true objective.
    ``tol`` is an absolute bound on the KKT residual.

    Returns ``(beta, n_iter, kkt_residual, status)``.
    """
    X = np.asarray(X, dtype=float)
    n, q = X.shape
    beta = np.array(beta, dtype=float)
    pen = np.asarray(pen, dtype=float)
    eta = X @ beta
    f = _loss(eta, t, z) + float(pen @ np.abs(beta))
    if not np.isfinite(f):
        return beta, 0, np.inf, OVERFLOW
    cols = [X[:, j] for j in range(q)]
    kkt = np.inf
    for it in range(max_newton):
        e = np.exp(-eta)
        g = 0.5 * (t - z * e)
        h = 0.5 * z * e
        grad = X.T @ g
        kkt = _kkt(grad, beta, pen)
        if kkt <= tol:
            return beta, it, kkt, OK
        hjj = (X * X).T @ h
        b = beta.copy()
        r = np.zeros(n)
        # inexact Newton: solve the quadratic model only as tightly as the current KKT gap warrants
        inner_tol = max(0.05 * tol, 0.01 * kkt)
        active = np.arange(q)
        full_pass = True
        for _ in range(max_sweeps):
            max_delta = 0.0
            for j in active:
                if hjj[j] <= 0.0:
                    continue
                xj = cols[j]
                gj = float(xj @ (g + h * r))
                u = b[j] * hjj[j] - gj
                bj = np.sign(u) * max(abs(u) - pen[j], 0.0) / hjj[j]
                d = bj - b[j]
                if d != 0.0:
                    r += d * xj
                    b[j] = bj
                    max_delta = max(max_delta, abs(d) * hjj[j])
            if max_delta <= inner_tol:
                if full_pass:
                    break
                active = np.arange(q)
                full_pass = True
            else:
                active = np.flatnonzero(b != 0) if full_pass else active
                full_pass = False
        d = b - beta
        pen_now = float(pen @ np.abs(beta))
        decrease = float(grad @ d) + float(pen @ np.abs(b)) - pen_now
        noise = 1e-13 * max(1.0, abs(f))
        # below the noise floor the sign of the predicted decrease is meaningless
        if decrease > noise or (decrease >= 0.0 and not np.any(d)):
            return beta, it, kkt, STALLED
        step = 1.0
        dx = X @ d
        while True:
            cand = beta + step * d
            f_new = _loss(eta + step * dx, t, z) + float(pen @ np.abs(cand))
            if f_new <= f + 1e-4 * step * decrease or (step == 1.0 and -decrease <= noise and f_new <= f + noise):
                break
            step *= 0.5
            if step < 1e-12:
                return beta, it, kkt, STALLED
        beta = cand
        eta = eta + step * dx
        f = f_new
    e = np.exp(-eta)
    kkt = _kkt(X.T @ (0.5 * (t - z * e)), beta, pen)
    return beta, max_newton, kkt, OK if kkt <= tol else MAX_ITER


def glm_newton(X, t, z, tol, max_newton=100):
    """Unpenalised fit on a small dense design. Returns ``(beta, status)``."""
    X = np.asarray(X, dtype=float)
    beta = np.zeros(X.shape[1])
    beta[0] = np.log(z.sum() / t.sum())
    eta = X @ beta
    f = _loss(eta, t, z)
    for _ in range(max_newton):
        e = np.exp(-eta)
        grad = X.T @ (0.5 * (t - z * e))
        if np.max(np.abs(grad)) <= tol:
            return beta, OK
        hess = X.T @ (X * (0.5 * z * e)[:, None])
        try:
            c = np.linalg.cholesky(hess)
        except np.linalg.LinAlgError:
            return beta, SINGULAR
        d = -np.linalg.solve(c.T, np.linalg.solve(c, grad))
        if not np.all(np.isfinite(d)):
            return beta, SINGULAR
        dx = X @ d
        decrease = float(grad @ d)
        step = 1.0
        noise = 1e-13 * max(1.0, abs(f))
        while True:
            f_new = _loss(eta + step * dx, t, z)
            if f_new <= f + 1e-4 * step * decrease or (step == 1.0 and -decrease <= noise and f_new <= f + noise):
                break
            step *= 0.5
            if step < 1e-12:
                return beta, STALLED
        beta = beta + step * d
        eta = eta + step * dx
        f = f_new
    return beta, MAX_ITER


def refit_targets(X, t, z, support, targets, tol, max_newton=100):
    """Low-dimensional refits on ``support + {j}`` for each target column ``j``.

    The first entry of ``support`` must be the intercept column. Returns
    ``(estimates, status)`` arrays aligned with ``targets``.
    """
    X = np.asarray(X, dtype=float)
    support = [int(s) for s in support]
    targets = np.asarray(targets, dtype=np.intp)
    out = np.full(targets.shape[0], np.nan)
    status = np.zeros(targets.shape[0], dtype=np.intc)
    base = None
    for k, j in enumerate(targets):
        if j in support:
            if base is None:
                base = glm_newton(X[:, support], t, z, tol, max_newton)
            b, st = base
            out[k], status[k] = b[support.index(j)], st
        else:
            b, st = glm_newton(X[:, support + [int(j)]], t, z, tol, max_newton)
            out[k], status[k] = b[-1], st
    return out, status
