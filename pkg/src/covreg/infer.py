"""Split-and-smooth inference on the log-linear coefficients for a fixed projection.

Each of ``B`` rounds splits the subjects in two: a lasso on the first part
selects a support, and unpenalized refits on the second part over
``support + {j}`` give the round's estimate of coefficient ``j``. Estimates
are averaged over rounds and their variance is estimated by the
infinitesimal jackknife on the split-membership indicators.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import ndtr, ndtri

from . import kernels
from ._parallel import ordered_map
from .data import Dataset, projected_responses
from .estimate import CVConfig, PenaltySpec, SolverError, cv_lambda_arrays, solve_beta

SUPPORT_ZERO_TOL = 1e-8


class SplitFailedError(SolverError):
    def __init__(self, round_index: int, cause: str):
        self.round_index = round_index
        super().__init__(f"split round {round_index} failed twice: {cause}")


class RankDeficientError(SolverError):
    def __init__(self, columns: list[int]):
        self.columns = columns
        super().__init__(f"rank-deficient restricted design; collinear columns {columns}")


class VarianceTruncationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SplitPlan:
    n1: int
    n2: int
    b_splits: int = 200
    rng_seed: int = 0

    @classmethod
    def halves(cls, n: int, b_splits: int = 200, rng_seed: int = 0, n1: int | None = None) -> "SplitPlan":
        n1 = n // 2 if n1 is None else n1
        return cls(n1, n - n1, b_splits, rng_seed)

    def validate(self, n: int) -> None:
        if self.n1 < 1 or self.n2 < 2 or self.n1 + self.n2 != n:
            raise ValueError(f"invalid split plan n1={self.n1}, n2={self.n2} for n={n}")
        if self.b_splits < 1:
            raise ValueError("b_splits must be positive")


@dataclass
class SplitResult:
    support: np.ndarray
    beta_tilde: np.ndarray
    membership: np.ndarray


@dataclass
class IJVariance:
    v_hat: np.ndarray
    truncated: np.ndarray
    raw: np.ndarray
    unsquared: np.ndarray


@dataclass
class SmoothedInference:
    beta_hat: np.ndarray
    v_hat: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    p_values: np.ndarray
    alpha: float
    truncated: np.ndarray | None = None

    def rows(self, coords: Sequence[int] | None = None) -> list[dict]:
        coords = range(self.beta_hat.size) if coords is None else coords
        trunc = self.truncated if self.truncated is not None else np.zeros(self.beta_hat.size, bool)
        return [{"j": int(j), "beta_hat": float(self.beta_hat[j]), "v_hat": float(self.v_hat[j]),
                 "ci_lower": float(self.ci_lower[j]), "ci_upper": float(self.ci_upper[j]),
                 "p_value": float(self.p_values[j]), "truncated_variance": bool(trunc[j])}
                for j in coords]

    def to_csv(self, coords: Sequence[int] | None = None) -> str:
        buf = io.StringIO()
        fields = ["j", "beta_hat", "v_hat", "ci_lower", "ci_upper", "p_value", "truncated_variance"]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n")
        writer.writeheader()
        for row in self.rows(coords):
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def split_sample(n: int, plan: SplitPlan, b: int, attempt: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random partition of ``range(n)`` into sets of size ``n1`` and ``n2``, determined by ``(seed, b)``."""
    rng = np.random.default_rng([plan.rng_seed, b, attempt])
    perm = rng.permutation(n)
    return np.sort(perm[:plan.n1]), np.sort(perm[plan.n1:])


def _support_from_beta(beta: np.ndarray, cap: int | None) -> np.ndarray:
    chosen = np.flatnonzero(np.abs(beta) > SUPPORT_ZERO_TOL)
    chosen = chosen[chosen != 0]
    if cap is not None and chosen.size > cap - 1:
        keep = np.argsort(-np.abs(beta[chosen]), kind="stable")[:max(cap - 1, 0)]
        chosen = np.sort(chosen[keep])
    return np.concatenate([[0], chosen]).astype(np.intp)


def select_support(subset: Dataset, gamma: np.ndarray, penalty: PenaltySpec, tol: float = 1e-8,
                   max_size: int | None = None) -> np.ndarray:
    """Indices with ``|beta_j| > 1e-8`` from a penalized fit on ``subset``; always includes 0."""
    z = projected_responses(subset, gamma)
    beta = solve_beta(subset.design, subset.t_counts, z, penalty, None, tol)
    return _support_from_beta(beta, max_size)


def _collinear_columns(x: np.ndarray, cols: Sequence[int]) -> list[int]:
    _, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > diag[0] * max(x.shape) * np.finfo(float).eps)) if diag.size else 0
    return sorted(int(cols[i]) for i in piv[rank:])


def low_dim_refit(subset: Dataset, gamma: np.ndarray, support_plus_j: Sequence[int],
                  tol: float = 1e-8) -> np.ndarray:
    """Unpenalized maximum-likelihood coefficients on the listed columns (same order)."""
    cols = [int(c) for c in support_plus_j]
    if len(cols) >= subset.n:
        raise ValueError(f"|support| = {len(cols)} must be below the subset size {subset.n}")
    x = np.asfortranarray(subset.design[:, cols])
    bad = _collinear_columns(x, cols)
    if bad:
        raise RankDeficientError(bad)
    if cols[0] != 0:
        raise ValueError("the intercept column 0 must come first")
    t = np.ascontiguousarray(subset.t_counts)
    z = projected_responses(subset, gamma)
    beta, status = kernels.glm_newton(x, t, z, tol * max(1.0, float(t.sum())))
    if status != kernels.OK:
        raise SolverError(f"low-dimensional refit failed: {kernels.STATUS_NAMES[status]}")
    return np.asarray(beta)


def _one_round(X, t, z, penalty, plan, b, targets, tol, rescale, recv, m_total, attempt):
    n = X.shape[0]
    c1, c2 = split_sample(n, plan, b, attempt)
    pen = penalty
    if recv is not None:
        lam, _, _ = cv_lambda_arrays(np.asfortranarray(X[c1]), t[c1], z[c1], penalty, recv,
                                     plan.rng_seed + b, tol)
        pen = penalty.with_lambda(lam)
    elif rescale:
        pen = penalty.with_lambda(penalty.lam * math.sqrt(t[c1].sum() / m_total))
    beta1 = solve_beta(X[c1], t[c1], z[c1], pen, None, tol)
    # keep |support + {j}| < n2 so every refit is overdetermined
    support = _support_from_beta(beta1, max(plan.n2 - 2, 1))
    x2 = np.asfortranarray(X[c2])
    t2 = np.ascontiguousarray(t[c2])
    est, status = kernels.refit_targets(x2, t2, np.ascontiguousarray(z[c2]), support, targets,
                                        tol * max(1.0, float(t2.sum())))
    if np.any(status != kernels.OK) or not np.all(np.isfinite(est)):
        worst = int(np.max(status))
        raise SolverError(f"refit failed ({kernels.STATUS_NAMES.get(worst, worst)})")
    beta_tilde = np.full(X.shape[1], np.nan)
    beta_tilde[targets] = est
    membership = np.zeros(n, dtype=bool)
    membership[c2] = True
    return SplitResult(support, beta_tilde, membership)


def multi_split(dataset: Dataset, gamma: np.ndarray, penalty: PenaltySpec, plan: SplitPlan,
                targets: Sequence[int] | None = None, threads: int = 1, tol: float = 1e-8,
                rescale_lambda: bool = True, recv: CVConfig | None = None):
    """Run ``plan.b_splits`` split/select/refit rounds and average them.

    Returns ``(results, beta_hat)``. Coordinates not listed in ``targets`` are
    left as NaN. The selection lambda is scaled by ``sqrt(M_1 / M)`` unless
    ``rescale_lambda`` is false, or re-chosen by cross-validation per split
    when ``recv`` is given.
    """
    plan.validate(dataset.n)
    X = np.asfortranarray(dataset.design)
    t = np.ascontiguousarray(dataset.t_counts)
    z = projected_responses(dataset, gamma)
    targets = np.arange(dataset.q) if targets is None else np.asarray(sorted(set(int(j) for j in targets)))
    m_total = float(t.sum())

    def run(b):
        try:
            return _one_round(X, t, z, penalty, plan, b, targets, tol, rescale_lambda, recv, m_total, 0)
        except (SolverError, np.linalg.LinAlgError) as first:
            try:
                return _one_round(X, t, z, penalty, plan, b, targets, tol, rescale_lambda, recv, m_total, 1)
            except (SolverError, np.linalg.LinAlgError):
                raise SplitFailedError(b, str(first)) from None

    results = ordered_map(run, range(plan.b_splits), threads)
    beta_hat = np.mean(np.stack([r.beta_tilde for r in results]), axis=0)
    return results, beta_hat


def ij_variance(results: Sequence[SplitResult], beta_hat: np.ndarray, n: int, plan: SplitPlan) -> IJVariance:
    """Bias-corrected infinitesimal-jackknife variance of the smoothed estimates.

    Negative values are truncated to zero and flagged. ``unsquared`` holds the
    alternative reading that sums the covariances without squaring them.
    """
    b_count = len(results)
    if b_count < 2:
        raise ValueError("ij_variance needs at least 2 split rounds")
    member = np.stack([r.membership for r in results]).astype(float)
    dev = np.stack([r.beta_tilde for r in results]) - np.asarray(beta_hat)[None, :]
    cov = (member - member.mean(axis=0)).T @ dev / b_count
    n1 = plan.n1
    scale = (n - 1) / n * (n / (n - n1)) ** 2
    correction = n / b_count ** 2 * n1 / (n - n1) * np.sum(dev ** 2, axis=0)
    raw = scale * np.sum(cov ** 2, axis=0) - correction
    unsquared = scale * np.sum(cov, axis=0) - correction
    truncated = raw < 0
    if np.any(truncated):
        warnings.warn(f"negative variance truncated to 0 for coordinates {np.flatnonzero(truncated).tolist()}",
                      VarianceTruncationWarning, stacklevel=2)
    return IJVariance(np.where(truncated, 0.0, raw), truncated, raw, unsquared)


def intervals_and_pvalues(beta_hat: np.ndarray, v_hat: np.ndarray, alpha: float = 0.05,
                          truncated: np.ndarray | None = None) -> SmoothedInference:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    beta_hat = np.asarray(beta_hat, dtype=float)
    v_hat = np.asarray(v_hat, dtype=float)
    if np.any(v_hat < 0):
        raise ValueError("variances must be nonnegative")
    sd = np.sqrt(v_hat)
    half = ndtri(1 - alpha / 2) * sd
    with np.errstate(divide="ignore", invalid="ignore"):
        p = 2 * ndtr(-np.abs(beta_hat) / sd)
    p = np.where(sd == 0, np.where(beta_hat == 0, 1.0, 0.0), p)
    p = np.where(np.isnan(beta_hat), np.nan, p)
    return SmoothedInference(beta_hat, v_hat, beta_hat - half, beta_hat + half, p, alpha, truncated)


def infer(dataset: Dataset, gamma: np.ndarray, penalty: PenaltySpec, plan: SplitPlan,
          alpha: float = 0.05, targets: Sequence[int] | None = None, threads: int = 1,
          **kwargs) -> tuple[SmoothedInference, list[SplitResult], IJVariance]:
    """Multi-split estimates, IJ variances and intervals in one call."""
    results, beta_hat = multi_split(dataset, gamma, penalty, plan, targets, threads, **kwargs)
    if len(results) < 2:
        raise ValueError("inference needs b_splits >= 2")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", VarianceTruncationWarning)
        var = ij_variance(results, beta_hat, dataset.n, plan)
    v = np.where(np.isnan(beta_hat), np.nan, var.v_hat)
    return intervals_and_pvalues(beta_hat, np.nan_to_num(v, nan=0.0), alpha, var.truncated), results, var
