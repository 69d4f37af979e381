"""Time the compiled kernels against the numpy fallback on one shared problem.

Usage: python benchmarks/bench_kernels.py [--n 100] [--q 200] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from covreg import _fallback

try:
    from covreg import _kernels
except ImportError:
    _kernels = None


def make_problem(n, q, seed):
    rng = np.random.default_rng(seed)
    X = np.asfortranarray(np.column_stack([np.ones(n), rng.standard_normal((n, q - 1))]))
    beta = np.zeros(q)
    beta[0], beta[1:4] = 0.5, [1.0, -0.8, 0.6]
    t = np.full(n, 100.0)
    z = t * np.exp(X @ beta) * rng.chisquare(100, n) / 100
    return X, t, np.ascontiguousarray(z), beta


def cases(X, t, z, beta):
    q = X.shape[1]
    pen = np.full(q, 0.1 * np.sqrt(t.sum() * np.log(q)))
    pen[0] = 0.0
    init = np.zeros(q)
    init[0] = np.log(z.sum() / t.sum())
    tol = 1e-8 * t.sum()
    small = np.asfortranarray(X[:, :6])
    support = np.arange(1, 4, dtype=np.intp)
    targets = np.arange(4, 24, dtype=np.intp)
    return {
        "lasso_irls": lambda m: m.lasso_irls(X, t, z, init, pen, tol),
        "glm_newton": lambda m: m.glm_newton(small, t, z, tol),
        "refit_targets": lambda m: m.refit_targets(X, t, z, support, targets, tol),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--q", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    X, t, z, beta = make_problem(args.n, args.q, args.seed)
    print(f"n={args.n} q={args.q}, best of {args.repeat} (ms)")
    print(f"{'kernel':<15}{'python':>10}{'cython':>10}{'speedup':>9}{'max|diff|':>12}")
    for name, call in cases(X, t, z, beta).items():
        py = min(timeit.repeat(lambda: call(_fallback), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{name:<15}{py:>10.2f}{'n/a':>10}")
            continue
        cy = min(timeit.repeat(lambda: call(_kernels), number=1, repeat=args.repeat)) * 1e3
        diff = np.max(np.abs(np.asarray(call(_fallback)[0]) - np.asarray(call(_kernels)[0])))
        print(f"{name:<15}{py:>10.2f}{cy:>10.2f}{py / cy:>8.1f}x{diff:>12.1e}")


if __name__ == "__main__":
    main()
