import json

import numpy as np
import pytest

from covreg.data import (Dataset, DataValidationError, DimensionMismatchError, MissingFileError,
                         MissingInterceptError, NonFiniteValueError, SubjectData, canonical_sign,
                         from_arrays, load_dataset, pooled_matrix, project_response, projected_responses,
                         sample_covariance, standardize_covariates, write_dataset)

from conftest import make_dataset


def _write_manifest(tmp_path, ys, xs):
    entries = []
    for i, (y, x) in enumerate(zip(ys, xs)):
        np.savetxt(tmp_path / f"y{i}.csv", np.atleast_2d(y), delimiter=",")
        np.savetxt(tmp_path / f"x{i}.csv", np.atleast_2d(x), delimiter=",")
        entries.append({"y": f"y{i}.csv", "x": f"x{i}.csv"})
    p = np.atleast_2d(ys[0]).shape[1]
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"p": p, "q": len(xs[0]), "subjects": entries}))
    return path


def test_load_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    ys = [rng.standard_normal((5, 3)), rng.standard_normal((7, 3))]
    xs = [[1, 0.5, -1, 2], [1, 0.1, 0.2, 0.3]]
    data = load_dataset(_write_manifest(tmp_path, ys, xs))
    assert (data.n, data.p, data.q) == (2, 3, 4)
    np.testing.assert_allclose(data.subjects[1].y, ys[1], rtol=1e-15)
    assert data.m_total == 12


def test_write_then_load(tmp_path):
    data, _, _ = make_dataset(n=6, q=3)
    back = load_dataset(write_dataset(data, tmp_path / "d"))
    np.testing.assert_array_equal(back.design, data.design)
    np.testing.assert_array_equal(back.covariances, data.covariances)


def test_nan_names_subject(tmp_path):
    ys = [np.ones((3, 3)), np.array([[1.0, np.nan, 0], [0, 1, 0]])]
    path = _write_manifest(tmp_path, ys, [[1, 0], [1, 1]])
    with pytest.raises(NonFiniteValueError, match="non-finite value, subject 1"):
        load_dataset(path)


def test_dimension_mismatch(tmp_path):
    ys = [np.ones((3, 3)), np.ones((3, 4))]
    path = _write_manifest(tmp_path, ys, [[1, 0], [1, 1]])
    with pytest.raises(DimensionMismatchError, match="subject 1"):
        load_dataset(path)


def test_missing_file_and_intercept(tmp_path):
    with pytest.raises(MissingFileError):
        load_dataset(tmp_path / "nope.json")
    path = _write_manifest(tmp_path, [np.ones((2, 2)), np.ones((2, 2))], [[1, 0], [2, 1]])
    with pytest.raises(MissingInterceptError, match="subject 1"):
        load_dataset(path)
    (tmp_path / "y0.csv").unlink()
    with pytest.raises(MissingFileError, match="subject 0"):
        load_dataset(path)


def test_ragged_rows(tmp_path):
    path = _write_manifest(tmp_path, [np.ones((2, 2)), np.ones((2, 2))], [[1, 0], [1, 1]])
    (tmp_path / "y1.csv").write_text("1,2\n3\n")
    with pytest.raises(DimensionMismatchError, match="subject 1"):
        load_dataset(path)


def test_dataset_invariants():
    s = SubjectData(np.ones((2, 2)), [1.0, 0.0])
    with pytest.raises(DataValidationError):
        Dataset((s,))
    with pytest.raises(DimensionMismatchError):
        Dataset((s, SubjectData(np.ones((2, 3)), [1.0, 0.0])))
    with pytest.raises(MissingInterceptError):
        SubjectData(np.ones((2, 2)), [0.0, 1.0])
    data = Dataset((s, s))
    with pytest.raises(ValueError):
        data.design[0, 0] = 3.0


def test_sample_covariance_examples():
    s = sample_covariance(SubjectData(np.array([[1.0, 0, 0]]), [1.0]))
    np.testing.assert_array_equal(s.s, np.diag([1.0, 0, 0]))
    s = sample_covariance(SubjectData(np.array([[1.0, 1], [-1, -1]]), [1.0]))
    np.testing.assert_array_equal(s.s, [[1, 1], [1, 1]])
    assert s.weight == 2


def test_sample_covariance_double_loop():
    y = np.random.default_rng(2).standard_normal((50, 5))
    oracle = np.zeros((5, 5))
    for row in y:
        for a in range(5):
            for b in range(5):
                oracle[a, b] += row[a] * row[b]
    oracle /= 50
    s = sample_covariance(SubjectData(y, [1.0])).s
    np.testing.assert_allclose(s, oracle, rtol=1e-12, atol=1e-14)
    assert np.linalg.eigvalsh(s).min() >= -1e-10 * np.trace(s)
    s3 = sample_covariance(SubjectData(3 * y, [1.0])).s
    np.testing.assert_allclose(s3, 9 * s, rtol=1e-12)


def test_pooled_matrix_examples():
    # p = 1 makes S1 = I with T1 = 1 realisable
    s1 = SubjectData(np.array([[1.0]]), [1.0])
    s2 = SubjectData(np.full((3, 1), np.sqrt(2.0)), [1.0])
    np.testing.assert_allclose(pooled_matrix(Dataset((s1, s2))).h, [[1.75]], rtol=1e-14)
    a = SubjectData(np.random.default_rng(0).standard_normal((6, 3)), [1.0])
    np.testing.assert_allclose(pooled_matrix(Dataset((a, a, a))).h, sample_covariance(a).s, rtol=1e-14)


def test_pooled_matrix_brute_force_and_reordering():
    data, _, _ = make_dataset(n=7, p=4, q=2, seed=3)
    acc, tot = np.zeros((4, 4)), 0.0
    for s in data.subjects:
        for row in s.y:
            acc += np.outer(row, row)
        tot += s.t_count
    h = pooled_matrix(data).h
    np.testing.assert_allclose(h, acc / tot, rtol=1e-12)
    rev = data.subset(list(range(data.n))[::-1])
    np.testing.assert_allclose(pooled_matrix(rev).h, h, rtol=1e-12)


def test_project_response():
    s = SubjectData(np.array([[2.0, 0], [3.0, 0]]), [1.0])
    assert project_response(s, [1.0, 0.0]) == 13.0
    assert project_response(s, [0.0, 0.0]) == 0.0
    data, _, _ = make_dataset(n=5, p=4, q=2, seed=4)
    g = np.random.default_rng(5).standard_normal(4)
    direct = np.array([project_response(s, g) for s in data.subjects])
    via_cov = np.array([s.t_count * g @ sample_covariance(s).s @ g for s in data.subjects])
    np.testing.assert_allclose(direct, via_cov, rtol=1e-10)
    np.testing.assert_allclose(projected_responses(data, g), direct, rtol=1e-10)


def test_from_arrays_and_standardize():
    rng = np.random.default_rng(6)
    xs = np.column_stack([np.ones(10), rng.normal(3, 2, (10, 2))])
    data = from_arrays([rng.standard_normal((4, 2)) for _ in range(10)], xs)
    std = standardize_covariates(data)
    np.testing.assert_allclose(std.design[:, 1:].mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(std.design[:, 1:].std(axis=0), 1, rtol=1e-12)
    assert np.all(std.design[:, 0] == 1)
    with pytest.raises(DimensionMismatchError):
        from_arrays([np.ones((2, 2))], xs)


def test_canonical_sign():
    np.testing.assert_array_equal(canonical_sign(np.array([0.1, -0.9])), [-0.1, 0.9])
    np.testing.assert_array_equal(canonical_sign(np.array([0.1, 0.9])), [0.1, 0.9])
