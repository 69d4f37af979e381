"""Penalized joint estimation of the projection and log-linear coefficients.

The fitted model is ``log(gamma' Sigma_i gamma) = x_i' beta`` and the criterion is

    0.5 * sum_i T_i * (x_i' beta + gamma' S_i gamma * exp(-x_i' beta)) + lam * P(beta)

subject to ``gamma' H gamma = 1``, minimised by alternating a penalized GLM step
in ``beta`` and a generalized eigenvector step in ``gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from . import kernels
from ._parallel import ordered_map
from .data import Dataset, PooledMatrix, canonical_sign, pooled_matrix

EXP_CLAMP = 700.0


class SolverError(RuntimeError):
    """Base class for numerical failures in the estimation routines."""


class ObjectiveOverflowError(SolverError):
    def __init__(self, subject: int, eta: float):
        self.subject = subject
        self.eta = eta
        super().__init__(f"exp overflow: x'beta = {eta:.4g} for subject {subject} (diverging beta)")


class BetaStepConvergenceError(SolverError):
    def __init__(self, beta: np.ndarray, kkt_residual: float, reason: str):
        self.beta = beta
        self.kkt_residual = kkt_residual
        super().__init__(f"beta step did not converge ({reason}); KKT residual {kkt_residual:.3g}")


class SingularPooledMatrixError(SolverError):
    pass


class AllRestartsFailedError(SolverError):
    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("all restarts failed: " + "; ".join(diagnostics))


@dataclass(frozen=True)
class PenaltySpec:
    """``kind`` is ``"lasso"`` (``lam * ||beta||_1``) or ``"generalized"`` (``lam * ||D beta||_1``)."""

    kind: str = "lasso"
    lam: float = 0.0
    d: np.ndarray | None = None
    penalize_intercept: bool = False

    def __post_init__(self):
        if self.kind not in ("lasso", "generalized"):
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.kind == "generalized":
            if self.d is None:
                raise ValueError("generalized penalty needs a D matrix")
            d = np.atleast_2d(np.asarray(self.d, dtype=float))
            object.__setattr__(self, "d", d)

    def with_lambda(self, lam: float) -> "PenaltySpec":
        return replace(self, lam=float(lam))

    def weights(self, q: int) -> np.ndarray:
        """Per-coordinate l1 weights for the lasso kind."""
        w = np.full(q, self.lam)
        if not self.penalize_intercept:
            w[0] = 0.0
        return w

    def d_matrix(self, q: int) -> np.ndarray:
        if self.d.shape[1] != q:
            raise ValueError(f"D has {self.d.shape[1]} columns, expected q={q}")
        d = np.array(self.d)
        if not self.penalize_intercept:
            d[:, 0] = 0.0
        return d

    def value(self, beta: np.ndarray) -> float:
        if self.lam == 0:
            return 0.0
        if self.kind == "lasso":
            return float(self.weights(beta.size) @ np.abs(beta))
        return self.lam * float(np.abs(self.d_matrix(beta.size) @ beta).sum())


@dataclass(frozen=True)
class FitConfig:
    restarts: int = 5
    max_outer_iters: int = 100
    beta_solver_tol: float = 1e-8
    outer_tol: float = 1e-6
    rng_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.restarts < 1 or self.max_outer_iters < 1:
            raise ValueError("restarts and max_outer_iters must be positive")
        if not (self.beta_solver_tol > 0 and self.outer_tol > 0):
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class CVConfig:
    """K-fold cross-validation over ``n_lambdas`` log-spaced values down to ``ratio * lambda_max``.

    ``ratio=None`` means 0.01 when ``q >= n`` and 1e-4 otherwise.
    """

    folds: int = 5
    n_lambdas: int = 20
    ratio: float | None = None


@dataclass
class ModelFit:
    gamma: np.ndarray
    beta: np.ndarray
    objective_trace: list[float]
    converged: bool
    restart_index: int
    lam: float
    cv: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "objective_trace": list(self.objective_trace),
            "converged": bool(self.converged),
            "restart_index": int(self.restart_index),
            "lambda": float(self.lam),
        }
        if self.cv is not None:
            out["cv"] = self.cv
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelFit":
        return cls(np.asarray(d["gamma"], dtype=float), np.asarray(d["beta"], dtype=float),
                   list(d["objective_trace"]), bool(d["converged"]), int(d["restart_index"]),
                   float(d["lambda"]), d.get("cv"))


@dataclass
class ComponentSet:
    components: list[ModelFit]
    dfd_values: list[float]
    rejected_dfd: float | None = None

    @property
    def gammas(self) -> np.ndarray:
        return np.column_stack([c.gamma for c in self.components])

    def to_dict(self) -> dict:
        return {"components": [c.to_dict() for c in self.components],
                "dfd_values": list(self.dfd_values), "rejected_dfd": self.rejected_dfd}

    @classmethod
    def from_dict(cls, d: dict) -> "ComponentSet":
        return cls([ModelFit.from_dict(c) for c in d["components"]], list(d["dfd_values"]),
                   d.get("rejected_dfd"))


# ----------------------------------------------------------------------------
# array-level helpers


def _check_eta(eta: np.ndarray) -> None:
    bad = np.flatnonzero(np.abs(eta) > EXP_CLAMP)
    if bad.size:
        raise ObjectiveOverflowError(int(bad[0]), float(eta[bad[0]]))


def _smooth_loss(eta: np.ndarray, t: np.ndarray, z: np.ndarray) -> float:
    _check_eta(eta)
    return 0.5 * float(np.sum(t * eta + z * np.exp(-eta)))


def _quad_forms(covs: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    return np.einsum("j,ijk,k->i", gamma, covs, gamma)


def intercept_start(t: np.ndarray, z: np.ndarray, q: int) -> np.ndarray:
    beta = np.zeros(q)
    beta[0] = math.log(max(z.sum(), 1e-300) / t.sum())
    return beta


def solve_beta(X: np.ndarray, t: np.ndarray, z: np.ndarray, penalty: PenaltySpec,
               init: np.ndarray | None = None, tol: float = 1e-8) -> np.ndarray:
    """Minimise the penalized criterion in ``beta`` for projected responses ``z``.

    ``tol`` bounds the KKT residual of the gradient scaled by ``1 / sum(t)``.
    """
    X = np.asfortranarray(X, dtype=float)
    t = np.ascontiguousarray(t, dtype=float)
    z = np.ascontiguousarray(z, dtype=float)
    q = X.shape[1]
    if init is None:
        init = intercept_start(t, z, q)
    tol_abs = tol * max(1.0, float(t.sum()))
    if penalty.kind == "generalized" and penalty.lam > 0:
        return _prox_newton(X, t, z, penalty.lam, penalty.d_matrix(q), np.array(init, dtype=float), tol_abs)
    init = np.array(init, dtype=float)
    weights = penalty.weights(q)
    if penalty.lam > 0 and not np.any(init[1:]):
        # cold start: a short warm-started path from lambda_max keeps the active set small
        top = lambda_max(X, t, z, penalty.penalize_intercept)
        if top > penalty.lam:
            for lam in np.geomspace(top, penalty.lam, 5)[1:-1]:
                step, _, _, st = kernels.lasso_irls(X, t, z, init, weights * (lam / penalty.lam), 10 * tol_abs)
                if st in (kernels.OK, kernels.STALLED, kernels.MAX_ITER):
                    init = step
    beta, _, kkt, status = kernels.lasso_irls(X, t, z, init, weights, tol_abs)
    if status == kernels.OVERFLOW:
        eta = X @ init
        i = int(np.argmax(np.abs(eta)))
        raise ObjectiveOverflowError(i, float(eta[i]))
    if status != kernels.OK and not (status == kernels.STALLED and kkt <= 1e3 * tol_abs):
        raise BetaStepConvergenceError(beta, kkt, kernels.STATUS_NAMES[status])
    return beta


def _box_qp_cd(k: np.ndarray, w: np.ndarray, lam: float, u: np.ndarray, tol: float,
               max_sweeps: int = 20000) -> np.ndarray:
    """Minimise ``0.5 u'Ku + w'u`` over ``|u_i| <= lam`` by cyclic coordinate descent."""
    diag = np.diag(k).copy()
    live = np.flatnonzero(diag > 1e-14 * max(1.0, float(diag.max(initial=0.0))))
    ku = k @ u
    for _ in range(max_sweeps):
        worst = 0.0
        for i in live:
            g = ku[i] + w[i]
            new = min(max(u[i] - g / diag[i], -lam), lam)
            step = new - u[i]
            if step != 0.0:
                ku += step * k[:, i]
                u[i] = new
                worst = max(worst, abs(step) * diag[i])
        if worst <= tol:
            break
    return u


def _polish_step(hess, grad, d, beta, u, lam):
    """Newton step with rows of ``D`` whose dual is interior held exactly fused.

    Returns None when the dual's sign pattern is not reproduced by the step.
    """
    interior = np.abs(u) < lam * (1 - 1e-9)
    fused, bound = d[interior], d[~interior]
    rhs_top = -grad - lam * bound.T @ np.sign(u[~interior])
    k = fused.shape[0]
    q = hess.shape[0]
    kkt_mat = np.zeros((q + k, q + k))
    kkt_mat[:q, :q] = hess
    kkt_mat[:q, q:] = fused.T
    kkt_mat[q:, :q] = fused
    rhs = np.concatenate([rhs_top, -fused @ beta])
    sol = np.linalg.lstsq(kkt_mat, rhs, rcond=None)[0]
    step = sol[:q]
    moved = bound @ (beta + step)
    if not np.all(np.isfinite(step)) or np.any(moved * np.sign(u[~interior]) < 0):
        return None
    return step


def _prox_newton(X, t, z, lam, d, beta, tol_abs, max_newton=200):
    """Proximal Newton for ``lam * ||D beta||_1``.

    Each quadratic model is solved through its dual, a box-constrained QP in
    ``u`` (one entry per row of ``D``); the primal step is
    ``-H^{-1} (g + D'u)``. Returns at ``||g + D'u||_inf <= tol_abs``.
    """
    q = X.shape[1]
    eta = X @ beta
    _check_eta(eta)
    f = _smooth_loss(eta, t, z) + lam * float(np.abs(d @ beta).sum())
    u = np.zeros(d.shape[0])
    kkt = np.inf
    for _ in range(max_newton):
        e = np.exp(-eta)
        grad = X.T @ (0.5 * (t - z * e))
        kkt = float(np.max(np.abs(grad + d.T @ u)))
        if kkt <= tol_abs:
            return beta
        hess = X.T @ (X * (0.5 * z * e)[:, None])
        hess[np.diag_indices(q)] += 1e-8 * max(float(np.trace(hess)) / q, 1e-300)
        chol = scipy.linalg.cho_factor(hess)
        hinv_dt = scipy.linalg.cho_solve(chol, d.T)
        hinv_g = scipy.linalg.cho_solve(chol, grad)
        scale = max(1.0, float(np.abs(hess).max()))
        u = _box_qp_cd(d @ hinv_dt, d @ hinv_g - d @ beta, lam, u.copy(),
                       max(0.05 * tol_abs, 0.01 * kkt) / scale)
        step_dir = _polish_step(hess, grad, d, beta, u, lam)
        if step_dir is None:
            step_dir = -(hinv_g + hinv_dt @ u)
        pen_now = lam * float(np.abs(d @ beta).sum())
        decrease = float(grad @ step_dir) + lam * float(np.abs(d @ (beta + step_dir)).sum()) - pen_now
        if decrease >= 0.0 and kkt <= 1e3 * tol_abs:
            return beta
        dx = X @ step_dir
        noise = 1e-13 * max(1.0, abs(f))
        step = 1.0
        while True:
            cand = beta + step * step_dir
            eta_c = eta + step * dx
            f_c = np.inf if np.any(np.abs(eta_c) > EXP_CLAMP) else (
                _smooth_loss(eta_c, t, z) + lam * float(np.abs(d @ cand).sum()))
            if f_c <= f + 1e-4 * step * decrease or (step == 1.0 and -decrease <= noise and f_c <= f + noise):
                break
            step *= 0.5
            if step < 1e-12:
                raise BetaStepConvergenceError(beta, kkt, "line search stalled")
        beta, eta, f = cand, eta_c, f_c
    raise BetaStepConvergenceError(beta, kkt, "iteration cap")


def load_d_matrix(path) -> np.ndarray:
    """Read an ``r x q`` structure matrix from a headerless CSV file."""
    d = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError(f"non-finite entry in D matrix {path}")
    return d


def beta_kkt_residual(X, t, z, beta, penalty: PenaltySpec) -> float:
    """Largest KKT violation of ``beta`` for the lasso kind (unscaled gradient units)."""
    grad = X.T @ (0.5 * (t - z * np.exp(-(X @ beta))))
    pen = penalty.weights(X.shape[1])
    r = np.where(beta != 0, np.abs(grad + pen * np.sign(beta)), np.maximum(np.abs(grad) - pen, 0.0))
    return float(r.max())


def _min_generalized_eigvec(a: np.ndarray, h: np.ndarray) -> np.ndarray:
    a = 0.5 * (a + a.T)
    h = 0.5 * (h + h.T)
    try:
        _, vec = scipy.linalg.eigh(a, h, subset_by_index=[0, 0])
    except np.linalg.LinAlgError:
        ridge = 1e-10 * np.trace(h) / h.shape[0]
        try:
            _, vec = scipy.linalg.eigh(a, h + ridge * np.eye(h.shape[0]), subset_by_index=[0, 0])
        except np.linalg.LinAlgError:
            raise SingularPooledMatrixError(
                "pooled matrix H is singular beyond ridge tolerance; check p < min T_i") from None
    g = vec[:, 0]
    return g / math.sqrt(float(g @ h @ g))


def min_generalized_eigvec(a: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``argmin g'Ag`` subject to ``g'Hg = 1``, sign-canonicalized."""
    return canonical_sign(_min_generalized_eigvec(np.asarray(a, dtype=float), np.asarray(h, dtype=float)))


def h_orthogonal_basis(h: np.ndarray, previous: Sequence[np.ndarray]) -> np.ndarray:
    """Orthonormal basis of ``{v : g' H v = 0 for every g in previous}``."""
    p = h.shape[0]
    if not previous:
        return np.eye(p)
    constraints = np.column_stack(previous).T @ h
    return scipy.linalg.null_space(constraints)


# ----------------------------------------------------------------------------
# public operations


def objective(dataset: Dataset, beta: np.ndarray, gamma: np.ndarray, penalty: PenaltySpec) -> float:
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    eta = dataset.design @ beta
    w = _quad_forms(dataset.covariances, gamma)
    return _smooth_loss(eta, dataset.t_counts, dataset.t_counts * w) + penalty.value(beta)


def beta_step(dataset: Dataset, gamma: np.ndarray, penalty: PenaltySpec,
              init: np.ndarray | None = None, tol: float = 1e-8) -> np.ndarray:
    """Minimise the criterion over ``beta`` with ``gamma`` held fixed."""
    z = dataset.t_counts * _quad_forms(dataset.covariances, np.asarray(gamma, dtype=float))
    return solve_beta(dataset.design, dataset.t_counts, z, penalty, init, tol)


def gamma_step(dataset: Dataset, beta: np.ndarray, h: PooledMatrix | None = None,
               deflation: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Smallest generalized eigenvector of ``(A, H)``, ``A = 0.5 sum T_i exp(-x_i'beta) S_i``.

    With ``deflation`` the search is restricted to the H-orthogonal complement
    of the given projections.
    """
    hm = (h or pooled_matrix(dataset)).h
    eta = dataset.design @ np.asarray(beta, dtype=float)
    _check_eta(eta)
    a = 0.5 * np.tensordot(dataset.t_counts * np.exp(-eta), dataset.covariances, axes=1)
    basis = h_orthogonal_basis(hm, list(deflation or []))
    g = basis @ _min_generalized_eigvec(basis.T @ a @ basis, basis.T @ hm @ basis)
    return canonical_sign(g)


class _Problem:
    """Data for one component, expressed in the coordinates of a deflation basis."""

    def __init__(self, dataset: Dataset, h: np.ndarray, basis: np.ndarray):
        self.basis = basis
        self.X = dataset.design
        self.t = np.ascontiguousarray(dataset.t_counts)
        self.covs = np.einsum("ja,ijk,kb->iab", basis, dataset.covariances, basis)
        self.h = basis.T @ h @ basis
        self.q = dataset.q

    def z(self, gamma):
        return self.t * np.maximum(_quad_forms(self.covs, gamma), 0.0)

    def value(self, beta, gamma, penalty):
        return _smooth_loss(self.X @ beta, self.t, self.z(gamma)) + penalty.value(beta)

    def gamma_update(self, beta):
        eta = self.X @ beta
        _check_eta(eta)
        a = 0.5 * np.tensordot(self.t * np.exp(-eta), self.covs, axes=1)
        return _min_generalized_eigvec(a, self.h)


def _run_restart(prob: _Problem, penalty: PenaltySpec, config: FitConfig, seed_key, r: int):
    rng = np.random.default_rng([config.rng_seed, *seed_key, r])
    dim = prob.h.shape[0]
    try:
        chol = np.linalg.cholesky(prob.h)
    except np.linalg.LinAlgError:
        raise SingularPooledMatrixError("pooled matrix H is not positive definite; check p < min T_i") from None
    g = rng.standard_normal(dim)
    gamma = scipy.linalg.solve_triangular(chol.T, g / np.linalg.norm(g), lower=False)
    beta = intercept_start(prob.t, prob.z(gamma), prob.q)
    trace = [prob.value(beta, gamma, penalty)]
    converged = False
    for _ in range(config.max_outer_iters):
        before = trace[-1]
        new_beta = solve_beta(prob.X, prob.t, prob.z(gamma), penalty, beta, config.beta_solver_tol)
        val = prob.value(new_beta, gamma, penalty)
        if val <= trace[-1]:
            beta = new_beta
        trace.append(min(val, trace[-1]))
        new_gamma = prob.gamma_update(beta)
        val = prob.value(beta, new_gamma, penalty)
        if val <= trace[-1]:
            gamma = new_gamma
        trace.append(min(val, trace[-1]))
        if abs(before - trace[-1]) <= config.outer_tol * max(1.0, abs(trace[-1])):
            converged = True
            break
    return gamma, beta, trace, converged


def fit(dataset: Dataset, penalty: PenaltySpec, config: FitConfig = FitConfig(),
        deflation: Sequence[np.ndarray] | None = None) -> ModelFit:
    """Block coordinate descent from ``config.restarts`` random starts; keeps the lowest objective.

    ``deflation`` lists previously found projections; the new one is sought in
    their H-orthogonal complement.
    """
    h = pooled_matrix(dataset).h
    deflation = list(deflation or [])
    basis = h_orthogonal_basis(h, deflation)
    prob = _Problem(dataset, h, basis)
    seed_key = (len(deflation),)

    def one(r):
        try:
            return _run_restart(prob, penalty, config, seed_key, r)
        except (SolverError, np.linalg.LinAlgError) as exc:
            return f"restart {r}: {exc}"

    results = ordered_map(one, range(config.restarts), config.threads)
    best, best_r = None, -1
    for r, res in enumerate(results):
        if isinstance(res, str):
            continue
        if best is None or res[2][-1] < best[2][-1]:
            best, best_r = res, r
    if best is None:
        raise AllRestartsFailedError([res for res in results if isinstance(res, str)])
    gamma, beta, trace, converged = best
    gamma_full = basis @ gamma
    return ModelFit(canonical_sign(gamma_full), beta, trace, converged, best_r, penalty.lam)


def lambda_max(X: np.ndarray, t: np.ndarray, z: np.ndarray, penalize_intercept: bool = False) -> float:
    """Smallest lasso weight at which only the intercept is active."""
    beta = intercept_start(t, z, X.shape[1])
    grad = X.T @ (0.5 * (t - z * np.exp(-(X @ beta))))
    start = 0 if penalize_intercept else 1
    return float(np.max(np.abs(grad[start:]))) if grad.size > start else 0.0


def pilot_lambda(dataset: Dataset) -> float:
    """Universal-threshold style default ``sqrt(M log q)`` for the unnormalised criterion."""
    return math.sqrt(dataset.m_total * math.log(max(dataset.q, 2)))


def cross_validate_lambda(dataset: Dataset, gamma: np.ndarray, penalty: PenaltySpec,
                          cv: CVConfig = CVConfig(), seed: int = 0, tol: float = 1e-8):
    """Choose lambda by K-fold cross-validated deviance with ``gamma`` fixed.

    Returns ``(best_lambda, grid, mean_heldout_loss)``.
    """
    z = dataset.t_counts * _quad_forms(dataset.covariances, np.asarray(gamma, dtype=float))
    return cv_lambda_arrays(dataset.design, dataset.t_counts, z, penalty, cv, seed, tol)


def cv_lambda_arrays(X, t, z, penalty: PenaltySpec, cv: CVConfig = CVConfig(), seed: int = 0,
                     tol: float = 1e-8):
    n, q = X.shape
    lmax = lambda_max(X, t, z, penalty.penalize_intercept)
    ratio = cv.ratio if cv.ratio is not None else (1e-2 if q >= n else 1e-4)
    grid = lmax * np.logspace(0, math.log10(ratio), cv.n_lambdas)
    folds = min(cv.folds, n)
    order = np.random.default_rng([seed, 7919]).permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[order] = np.arange(n) % folds
    loss = np.zeros(grid.size)
    for k in range(folds):
        train, test = fold_of != k, fold_of == k
        Xtr = np.asfortranarray(X[train])
        beta = None
        saturated = False
        for i, lam in enumerate(grid):
            # past a saturated support the remaining path is not worth solving
            if saturated:
                loss[i] = np.inf
                continue
            try:
                beta = solve_beta(Xtr, t[train], z[train], penalty.with_lambda(lam), beta, tol)
                eta = X[test] @ beta
                loss[i] += _smooth_loss(eta, t[test], z[test]) if np.all(np.abs(eta) <= EXP_CLAMP) else np.inf
                saturated = np.count_nonzero(beta) >= Xtr.shape[0] - 1
            except SolverError:
                loss[i] = np.inf
                beta = None
    loss /= float(t.sum())
    best = int(np.argmin(loss))
    return float(grid[best]), grid, loss


def fit_cv(dataset: Dataset, penalty: PenaltySpec, config: FitConfig = FitConfig(),
           cv: CVConfig = CVConfig(), deflation: Sequence[np.ndarray] | None = None) -> ModelFit:
    """Pilot fit at ``pilot_lambda``, cross-validate lambda at the pilot gamma, then refit."""
    pilot = fit(dataset, penalty.with_lambda(pilot_lambda(dataset)), config, deflation)
    lam, grid, loss = cross_validate_lambda(dataset, pilot.gamma, penalty, cv, config.rng_seed,
                                            config.beta_solver_tol)
    out = fit(dataset, penalty.with_lambda(lam), config, deflation)
    out.cv = {"grid": grid.tolist(), "loss": [float(v) for v in loss], "pilot_lambda": pilot.lam}
    return out


def dfd(dataset: Dataset, components: Sequence[np.ndarray]) -> float:
    """Average deviation from diagonality of the projected sample covariances (always >= 1)."""
    g = np.column_stack([np.asarray(c, dtype=float) for c in components])
    proj = np.einsum("ja,ijk,kb->iab", g, dataset.covariances, g)
    sign, logdet = np.linalg.slogdet(proj)
    diag = np.einsum("iaa->ia", proj)
    singular = (sign <= 0) | (logdet < math.log(1e-300)) | np.any(diag <= 0, axis=1)
    if np.any(singular):
        raise SolverError(f"singular projected covariance (subject {int(np.flatnonzero(singular)[0])})")
    weights = dataset.t_counts / dataset.t_counts.sum()
    log_ratio = np.log(diag).sum(axis=1) - logdet
    return float(math.exp(weights @ log_ratio))


def select_components(dataset: Dataset, penalty: PenaltySpec, config: FitConfig = FitConfig(),
                      dfd_threshold: float = 2.0, cv: CVConfig | None = None,
                      max_components: int | None = None) -> ComponentSet:
    """Fit components one at a time with deflation until average DfD would exceed the threshold."""
    if not dfd_threshold > 1:
        raise ValueError("dfd_threshold must exceed 1")
    limit = min(max_components or dataset.p, dataset.p)
    fits: list[ModelFit] = []
    values: list[float] = []
    rejected = None
    for k in range(limit):
        prior = [c.gamma for c in fits]
        comp = fit_cv(dataset, penalty, config, cv, prior) if cv else fit(dataset, penalty, config, prior)
        value = dfd(dataset, prior + [comp.gamma])
        if value > dfd_threshold:
            rejected = value
            break
        fits.append(comp)
        values.append(value)
    return ComponentSet(fits, values, rejected)
