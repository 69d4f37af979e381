"""Independent reference implementations used by the tests."""

import itertools
import math

import numpy as np


def literal_objective(ys, xs, beta, gamma, lam, penalize_intercept=False):
    """The criterion written out term by term with Python loops."""
    total = 0.0
    for y, x in zip(ys, xs):
        t = len(y)
        s = [[sum(y[r][a] * y[r][b] for r in range(t)) / t for b in range(len(gamma))]
             for a in range(len(gamma))]
        quad = sum(gamma[a] * s[a][b] * gamma[b] for a in range(len(gamma)) for b in range(len(gamma)))
        eta = sum(xv * bv for xv, bv in zip(x, beta))
        total += t * (eta + quad * math.exp(-eta))
    pen = sum(abs(b) for k, b in enumerate(beta) if k > 0 or penalize_intercept)
    return 0.5 * total + lam * pen


def _criterion_grid(X, t, z, w, points):
    """Penalized criterion at each row of ``points`` (vectorised)."""
    eta = points @ X.T
    return 0.5 * np.sum(t * eta + z * np.exp(-eta), axis=1) + np.abs(points) @ w


def grid_search_beta(X, t, z, w, center, half_width=1.0, step=1e-3, coarse=41):
    """Two-stage grid search: a coarse grid over the box, then step ``step`` around its best point.

    The fine stage is repeated twice, recentring each time. Exact zeros are
    added to every grid so a thresholded optimum is representable.
    """
    q = X.shape[1]
    center = np.asarray(center, dtype=float)

    def search(c, hw, k):
        axes = [np.union1d(np.linspace(ci - hw, ci + hw, k), [0.0]) for ci in c]
        pts = np.array(list(itertools.product(*axes)))
        vals = _criterion_grid(X, t, z, w, pts)
        return pts[int(np.argmin(vals))]

    best = search(center, half_width, coarse)
    span = 2 * half_width / (coarse - 1)
    for _ in range(2):
        k = int(round(2 * span / step)) + 1
        best = search(best, span, k)
        span = max(step * 5, span / 10)
    assert best.size == q
    return best


def random_direction_min(a, h, count, rng):
    """Minimum of ``g'Ag`` over ``count`` random directions scaled to ``g'Hg = 1``."""
    g = rng.standard_normal((count, a.shape[0]))
    num = np.einsum("ij,jk,ik->i", g, a, g)
    den = np.einsum("ij,jk,ik->i", g, h, g)
    return float(np.min(num / den))


def literal_dfd(covs, t_counts, gammas):
    """Product form of the deviation from diagonality, with explicit determinants."""
    g = np.column_stack(gammas)
    total = float(np.sum(t_counts))
    out = 1.0
    for s, t in zip(covs, t_counts):
        m = g.T @ s @ g
        ratio = float(np.prod(np.diag(m))) / float(np.linalg.det(m))
        out *= ratio ** (t / total)
    return out


def double_loop_ij(beta_tilde, membership, n, n1):
    """IJ variance written with explicit loops over splits, subjects and coordinates."""
    b_count, q = len(beta_tilde), len(beta_tilde[0])
    out = []
    for j in range(q):
        mean_j = sum(beta_tilde[b][j] for b in range(b_count)) / b_count
        first = 0.0
        for i in range(n):
            n_bar = sum(membership[b][i] for b in range(b_count)) / b_count
            cov = 0.0
            for b in range(b_count):
                cov += (membership[b][i] - n_bar) * (beta_tilde[b][j] - mean_j)
            cov /= b_count
            first += cov * cov
        first *= (n - 1) / n * (n / (n - n1)) ** 2
        second = 0.0
        for b in range(b_count):
            second += (beta_tilde[b][j] - mean_j) ** 2
        second *= n / b_count ** 2 * n1 / (n - n1)
        out.append(first - second)
    return out
