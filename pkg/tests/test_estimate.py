import json
import math

import numpy as np
import pytest

from covreg.data import Dataset, SubjectData, from_arrays, pooled_matrix
from covreg.estimate import (AllRestartsFailedError, BetaStepConvergenceError, ComponentSet, CVConfig,
                             FitConfig, ModelFit, ObjectiveOverflowError, PenaltySpec, beta_kkt_residual,
                             beta_step, cross_validate_lambda, dfd, fit, fit_cv, gamma_step, lambda_max,
                             load_d_matrix, min_generalized_eigvec, objective, select_components,
                             solve_beta)

from conftest import make_dataset
from oracles import grid_search_beta, literal_dfd, literal_objective, random_direction_min


def _z(data, gamma):
    return data.t_counts * np.einsum("j,ijk,k->i", gamma, data.covariances, gamma)


# ---------------------------------------------------------------- objective


def test_objective_single_unit_values():
    y = np.array([[2.0, 0.0]])
    s = SubjectData(y, [1.0])
    data = Dataset((s, s))  # two copies of one unit: each contributes c / 2
    gamma = np.array([1.0, 0.0])
    c = 4.0
    assert objective(data, np.array([0.0]), gamma, PenaltySpec()) == pytest.approx(2 * c / 2, rel=1e-15)
    b0 = math.log(c)
    assert objective(data, np.array([b0]), gamma, PenaltySpec()) == pytest.approx(2 * 0.5 * (b0 + 1), rel=1e-14)


def test_objective_matches_literal_transcription():
    rng = np.random.default_rng(10)
    ys = [rng.standard_normal((int(rng.integers(3, 8)), 3)) for _ in range(5)]
    xs = np.column_stack([np.ones(5), rng.standard_normal((5, 2))])
    data = from_arrays(ys, xs)
    for _ in range(5):
        beta, gamma = rng.standard_normal(3) * 0.5, rng.standard_normal(3)
        lam = float(rng.uniform(0, 2))
        got = objective(data, beta, gamma, PenaltySpec(lam=lam))
        want = literal_objective([y.tolist() for y in ys], xs.tolist(), beta.tolist(), gamma.tolist(), lam)
        assert got == pytest.approx(want, rel=1e-12)
        got = objective(data, beta, gamma, PenaltySpec(lam=lam, penalize_intercept=True))
        want = literal_objective([y.tolist() for y in ys], xs.tolist(), beta.tolist(), gamma.tolist(), lam, True)
        assert got == pytest.approx(want, rel=1e-12)


def test_objective_overflow_names_subject():
    data, _, _ = make_dataset(n=5, q=2)
    beta = np.array([0.0, 1.0])
    beta_big = beta * 1e4
    with pytest.raises(ObjectiveOverflowError) as info:
        objective(data, -beta_big, np.ones(3), PenaltySpec())
    assert 0 <= info.value.subject < 5


# ---------------------------------------------------------------- beta step


def test_beta_step_intercept_closed_form():
    rng = np.random.default_rng(11)
    y = rng.standard_normal((20, 3))
    s = SubjectData(y, [1.0])
    data = Dataset((s, s))
    gamma = np.array([0.3, -0.2, 0.9])
    beta = beta_step(data, gamma, PenaltySpec(), tol=1e-12)
    assert beta[0] == pytest.approx(math.log(gamma @ (y.T @ y / 20) @ gamma), abs=1e-10)


def test_beta_step_huge_lambda_zeroes_slopes(small_data):
    data, basis, _ = small_data
    beta = beta_step(data, basis[:, 0], PenaltySpec(lam=1e12))
    assert np.all(beta[1:] == 0.0)


def test_beta_step_grid_oracle_q2():
    rng = np.random.default_rng(12)
    n = 20
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    t = np.full(n, 10.0)
    z = t * np.exp(X @ [0.2, 0.5]) * rng.chisquare(10, n) / 10
    pen = PenaltySpec(lam=0.1)
    beta = solve_beta(X, t, z, pen, tol=1e-12)
    oracle = grid_search_beta(X, t, z, pen.weights(2), beta)
    np.testing.assert_allclose(beta, oracle, atol=5e-3)


def test_beta_step_kkt_and_gradient():
    data, basis, _ = make_dataset(n=50, q=10, seed=13)
    gamma = basis[:, 0]
    for lam in (0.0, 5.0, 50.0):
        pen = PenaltySpec(lam=lam)
        beta = beta_step(data, gamma, pen, tol=1e-10)
        kkt = beta_kkt_residual(data.design, data.t_counts, _z(data, gamma), beta, pen)
        assert kkt <= 1e-10 * data.m_total


def test_beta_step_warm_start_agrees():
    data, basis, _ = make_dataset(n=50, q=10, seed=14)
    pen = PenaltySpec(lam=10.0)
    cold = beta_step(data, basis[:, 0], pen, tol=1e-11)
    warm = beta_step(data, basis[:, 0], pen, init=cold + 0.1, tol=1e-11)
    np.testing.assert_allclose(cold, warm, atol=1e-6)


def test_beta_step_convergence_error_carries_iterate(monkeypatch):
    from covreg import kernels

    def stuck(X, t, z, beta, pen, tol):
        return beta, 100, 1.0, kernels.MAX_ITER

    monkeypatch.setattr(kernels, "lasso_irls", stuck)
    data, basis, _ = make_dataset(n=10, q=3)
    with pytest.raises(BetaStepConvergenceError) as info:
        beta_step(data, basis[:, 0], PenaltySpec(lam=0.0))
    assert info.value.kkt_residual == 1.0
    assert info.value.beta.shape == (3,)


def test_soft_threshold_identity_orthonormal_design():
    # X = I: every coordinate is fitted by its own unit, so the problem separates
    rng = np.random.default_rng(15)
    q = 6
    X = np.eye(q)
    t = rng.integers(5, 50, q).astype(float)
    z = t * np.exp(rng.normal(0, 0.5, q))
    lam = 3.0
    beta = solve_beta(X, t, z, PenaltySpec(lam=lam, penalize_intercept=True), tol=1e-13)
    u = np.exp(-np.log(z / t)) - 1
    shrunk = np.sign(u) * np.maximum(np.abs(u) - 2 * lam / z, 0)
    np.testing.assert_allclose(beta, -np.log1p(shrunk), atol=1e-8)


def test_generalized_lasso_matches_lasso_with_identity():
    data, basis, _ = make_dataset(n=40, q=6, seed=16)
    gamma = basis[:, 0]
    lasso = beta_step(data, gamma, PenaltySpec(lam=8.0), tol=1e-12)
    gen = beta_step(data, gamma, PenaltySpec("generalized", 8.0, d=np.eye(6)), tol=1e-12)
    np.testing.assert_allclose(gen, lasso, atol=1e-5)


def test_generalized_lasso_fusion():
    data, basis, _ = make_dataset(n=40, q=5, seed=17)
    d = np.diff(np.eye(5), axis=0)  # first differences, intercept row zeroed by default
    beta = beta_step(data, basis[:, 0], PenaltySpec("generalized", 1e6, d=d), tol=1e-10)
    # a huge fusion weight makes coordinates 1..4 equal
    assert np.ptp(beta[1:]) < 1e-4


def test_load_d_matrix(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("0,1,-1\n0,0,1\n")
    d = load_d_matrix(path)
    assert d.shape == (2, 3)
    with pytest.raises(ValueError):
        PenaltySpec("generalized", 1.0, d=d).d_matrix(4)


def test_penalty_spec_validation():
    with pytest.raises(ValueError):
        PenaltySpec(lam=-1)
    with pytest.raises(ValueError):
        PenaltySpec(lam=float("nan"))
    with pytest.raises(ValueError):
        PenaltySpec("generalized", 1.0)
    with pytest.raises(ValueError):
        PenaltySpec("ridge")


# ---------------------------------------------------------------- gamma step


def test_gamma_step_pencil_examples():
    g = min_generalized_eigvec(np.diag([3.0, 1.0, 2.0]), np.eye(3))
    np.testing.assert_allclose(g, [0, 1, 0], atol=1e-12)
    rng = np.random.default_rng(18)
    m = rng.standard_normal((4, 4))
    h = m @ m.T + 4 * np.eye(4)
    g = min_generalized_eigvec(h, h)
    assert g @ h @ g == pytest.approx(1, abs=1e-8)


def test_gamma_step_random_search_oracle():
    rng = np.random.default_rng(19)
    for _ in range(5):
        m1, m2 = rng.standard_normal((2, 5, 5))
        a, h = m1 @ m1.T + 0.1 * np.eye(5), m2 @ m2.T + 0.5 * np.eye(5)
        g = min_generalized_eigvec(a, h)
        assert g @ h @ g == pytest.approx(1, abs=1e-8)
        assert g @ a @ g <= random_direction_min(a, h, 20000, rng) + 1e-6


def test_gamma_step_on_data_and_deflation(small_data):
    data, basis, beta = small_data
    h = pooled_matrix(data)
    g1 = gamma_step(data, beta, h)
    assert g1 @ h.h @ g1 == pytest.approx(1, abs=1e-8)
    g2 = gamma_step(data, beta, h, deflation=[g1])
    assert abs(g1 @ h.h @ g2) <= 1e-6
    assert g2 @ h.h @ g2 == pytest.approx(1, abs=1e-8)
    a = 0.5 * np.tensordot(data.t_counts * np.exp(-(data.design @ beta)), data.covariances, axes=1)
    rng = np.random.default_rng(20)
    assert g1 @ a @ g1 <= random_direction_min(a, h.h, 20000, rng) + 1e-6


# ---------------------------------------------------------------- fit


def test_fit_recovers_dominant_component():
    data, basis, _ = make_dataset(n=100, p=4, q=3, t_obs=100, seed=21,
                                  beta=np.array([0.0, 1.5, -1.0]))
    res = fit(data, PenaltySpec(), FitConfig(restarts=3, rng_seed=1))
    cos = abs(res.gamma @ basis[:, 0]) / np.linalg.norm(res.gamma)
    assert cos >= 0.99
    np.testing.assert_allclose(res.beta[1:], [1.5, -1.0], atol=0.1)
    h = pooled_matrix(data).h
    assert res.gamma @ h @ res.gamma == pytest.approx(1, abs=1e-8)
    assert all(b <= a + 1e-8 for a, b in zip(res.objective_trace, res.objective_trace[1:]))
    assert res.converged


def test_fit_more_restarts_never_worse():
    data, _, _ = make_dataset(n=60, p=4, q=5, seed=22)
    pen = PenaltySpec(lam=5.0)
    one = fit(data, pen, FitConfig(restarts=1, rng_seed=3))
    five = fit(data, pen, FitConfig(restarts=5, rng_seed=3))
    assert five.objective_trace[-1] <= one.objective_trace[-1]


def test_fit_deterministic_across_threads():
    data, _, _ = make_dataset(n=40, p=3, q=6, seed=23)
    pen = PenaltySpec(lam=4.0)
    a = fit(data, pen, FitConfig(restarts=4, rng_seed=9, threads=1))
    b = fit(data, pen, FitConfig(restarts=4, rng_seed=9, threads=3))
    assert a.objective_trace == b.objective_trace
    np.testing.assert_array_equal(a.gamma, b.gamma)
    assert a.restart_index == b.restart_index


def test_fit_all_restarts_failed(monkeypatch):
    from covreg import estimate

    def boom(*args, **kwargs):
        raise estimate.SolverError("diverged")

    monkeypatch.setattr(estimate, "_run_restart", boom)
    data, _, _ = make_dataset(n=10, q=2)
    with pytest.raises(AllRestartsFailedError) as info:
        fit(data, PenaltySpec(), FitConfig(restarts=2))
    assert len(info.value.diagnostics) == 2


def test_model_fit_json_round_trip():
    data, _, _ = make_dataset(n=30, q=3, seed=24)
    res = fit(data, PenaltySpec(lam=1.0), FitConfig(restarts=2))
    back = ModelFit.from_dict(json.loads(json.dumps(res.to_dict())))
    np.testing.assert_array_equal(back.gamma, res.gamma)
    assert back.objective_trace == res.objective_trace and back.lam == 1.0


def test_lambda_max_zeroes_everything():
    data, basis, _ = make_dataset(n=40, q=8, seed=25)
    z = _z(data, basis[:, 0])
    lmax = lambda_max(data.design, data.t_counts, z)
    beta = solve_beta(data.design, data.t_counts, z, PenaltySpec(lam=lmax * 1.0001))
    assert np.all(beta[1:] == 0)
    beta = solve_beta(data.design, data.t_counts, z, PenaltySpec(lam=lmax * 0.9))
    assert np.any(beta[1:] != 0)


def test_cross_validation_picks_grid_value():
    data, basis, _ = make_dataset(n=60, q=10, seed=26)
    lam, grid, loss = cross_validate_lambda(data, basis[:, 0], PenaltySpec(), CVConfig(folds=3, n_lambdas=8))
    assert lam in grid and loss.shape == grid.shape
    assert np.all(np.diff(grid) < 0)
    assert loss[list(grid).index(lam)] == np.min(loss)
    res = fit_cv(data, PenaltySpec(), FitConfig(restarts=2), CVConfig(folds=3, n_lambdas=8))
    assert res.cv is not None and len(res.cv["grid"]) == 8


# ---------------------------------------------------------------- DfD


def test_dfd_examples():
    data, basis, _ = make_dataset(n=20, p=3, q=2, seed=27)
    assert dfd(data, [basis[:, 0]]) == pytest.approx(1.0, abs=1e-14)
    # exact common eigenvectors give DfD = 1
    rng = np.random.default_rng(28)
    q_, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    ys = []
    for _ in range(4):
        lam = rng.uniform(0.5, 2.0, 3)
        ys.append(np.diag(np.sqrt(3 * lam)) @ q_.T)  # T = 3 rows, y'y / 3 = Q diag(lam) Q'
    exact = from_arrays(ys, np.ones((4, 1)))
    assert dfd(exact, [q_[:, 0], q_[:, 1]]) == pytest.approx(1.0, abs=1e-10)


def test_dfd_literal_oracle_and_hadamard():
    data, _, _ = make_dataset(n=3, p=4, q=2, seed=29)
    rng = np.random.default_rng(30)
    for _ in range(5):
        gs = [rng.standard_normal(4), rng.standard_normal(4)]
        got = dfd(data, gs)
        assert got == pytest.approx(literal_dfd(data.covariances, data.t_counts, gs), rel=1e-10)
        assert got >= 1.0


def test_select_components_threshold_and_trace():
    data, _, _ = make_dataset(n=50, p=4, q=3, seed=31)
    cfg = FitConfig(restarts=2)
    tight = select_components(data, PenaltySpec(lam=1.0), cfg, dfd_threshold=1.0 + 1e-9)
    assert len(tight.components) == 1 and tight.rejected_dfd > 1.0 + 1e-9
    comps = select_components(data, PenaltySpec(lam=1.0), cfg, dfd_threshold=50.0)
    assert len(comps.components) == 4
    for k in range(1, 5):
        assert comps.dfd_values[k - 1] == pytest.approx(dfd(data, [c.gamma for c in comps.components[:k]]),
                                                       rel=1e-12)
    h = pooled_matrix(data).h
    g = comps.gammas
    off = g.T @ h @ g - np.diag(np.diag(g.T @ h @ g))
    assert np.max(np.abs(off)) <= 1e-6
    back = ComponentSet.from_dict(json.loads(json.dumps(comps.to_dict())))
    assert back.dfd_values == comps.dfd_values
    with pytest.raises(ValueError):
        select_components(data, PenaltySpec(), cfg, dfd_threshold=1.0)
