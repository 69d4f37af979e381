"""Datasets of subject-level observation matrices and the covariance primitives."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np


class DataValidationError(ValueError):
    """Raised when input data violate a structural invariant."""

    def __init__(self, message: str, subject: int | None = None):
        self.subject = subject
        if subject is not None:
            message = f"{message}, subject {subject}"
        super().__init__(message)


class MissingFileError(DataValidationError):
    pass


class DimensionMismatchError(DataValidationError):
    pass


class NonFiniteValueError(DataValidationError):
    pass


class MissingInterceptError(DataValidationError):
    pass


@dataclass(frozen=True)
class SubjectData:
    """One unit: a ``T x p`` observation matrix ``y`` and covariates ``x``.

    ``x[0]`` is the intercept and must equal 1.
    """

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float, copy=True)
        x = np.array(self.x, dtype=float, copy=True).ravel()
        if y.ndim == 1:
            y = y[None, :]
        if y.ndim != 2 or y.shape[0] < 1:
            raise DimensionMismatchError("y must be a non-empty 2-d array")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise NonFiniteValueError("non-finite value")
        if x.size == 0 or x[0] != 1.0:
            raise MissingInterceptError("x[0] must be exactly 1 (intercept)")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def t_count(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def q(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class SampleCov:
    s: np.ndarray
    weight: int


@dataclass(frozen=True)
class PooledMatrix:
    h: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of subjects sharing ``p`` and ``q``.

    Immutable; the stacked moment arrays are computed once on first use.
    """

    subjects: tuple[SubjectData, ...]
    p: int = field(init=False)
    q: int = field(init=False)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if len(subjects) < 2:
            raise DataValidationError(f"need at least 2 subjects, got {len(subjects)}")
        p, q = subjects[0].p, subjects[0].q
        for i, s in enumerate(subjects):
            if s.p != p:
                raise DimensionMismatchError(f"dimension mismatch: p={s.p} != {p}", i)
            if s.q != q:
                raise DimensionMismatchError(f"dimension mismatch: q={s.q} != {q}", i)
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @cached_property
    def t_counts(self) -> np.ndarray:
        t = np.array([s.t_count for s in self.subjects], dtype=float)
        t.setflags(write=False)
        return t

    @property
    def m_total(self) -> int:
        """Total observation count over all subjects."""
        return int(sum(s.t_count for s in self.subjects))

    @cached_property
    def design(self) -> np.ndarray:
        """``n x q`` covariate matrix (Fortran ordered for column sweeps)."""
        x = np.asfortranarray(np.stack([s.x for s in self.subjects]))
        x.setflags(write=False)
        return x

    @cached_property
    def covariances(self) -> np.ndarray:
        """``n x p x p`` stack of per-subject sample covariances."""
        s = np.stack([s.y.T @ s.y / s.t_count for s in self.subjects])
        s = 0.5 * (s + np.transpose(s, (0, 2, 1)))
        s.setflags(write=False)
        return s

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.subjects[i] for i in indices))


def from_arrays(ys: Sequence[np.ndarray], xs: np.ndarray) -> Dataset:
    """Build a Dataset from a list of observation matrices and a covariate matrix."""
    xs = np.asarray(xs, dtype=float)
    if len(ys) != xs.shape[0]:
        raise DimensionMismatchError(f"{len(ys)} observation matrices but {xs.shape[0]} covariate rows")
    subjects = []
    for i, (y, x) in enumerate(zip(ys, xs)):
        try:
            subjects.append(SubjectData(y, x))
        except DataValidationError as exc:
            raise type(exc)(str(exc), i) from None
    return Dataset(tuple(subjects))


def standardize_covariates(dataset: Dataset) -> Dataset:
    """Return a copy with non-intercept covariate columns centred and scaled to unit sd."""
    x = np.array(dataset.design)
    mu = x[:, 1:].mean(axis=0)
    sd = x[:, 1:].std(axis=0)
    sd[sd == 0] = 1.0
    x[:, 1:] = (x[:, 1:] - mu) / sd
    return from_arrays([s.y for s in dataset.subjects], x)


def _read_csv(path: Path, subject: int) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"missing file {path}", subject)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise DataValidationError(f"unparseable number in {path}", subject) from None
    if not rows:
        raise DataValidationError(f"empty file {path}", subject)
    if len({len(r) for r in rows}) != 1:
        raise DimensionMismatchError(f"ragged rows in {path}", subject)
    arr = np.array(rows, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError("non-finite value", subject)
    return arr


def load_dataset(manifest_path: str | Path, standardize: bool = False) -> Dataset:
    """Load a dataset from a JSON manifest of per-subject CSV files.

    The manifest looks like ``{"p": 3, "q": 4, "subjects": [{"y": "s0_y.csv",
    "x": "s0_x.csv"}, ...]}``. Relative paths resolve against the manifest's
    directory. Errors name the 0-based subject index.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFileError(f"missing file {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"malformed manifest: {exc}") from None
    try:
        p, q, entries = int(manifest["p"]), int(manifest["q"]), manifest["subjects"]
    except (KeyError, TypeError, ValueError):
        raise DataValidationError("manifest needs integer 'p', 'q' and a 'subjects' list") from None
    base = manifest_path.parent
    subjects = []
    for i, entry in enumerate(entries):
        y = _read_csv(base / entry["y"], i)
        x = _read_csv(base / entry["x"], i)
        if y.shape[1] != p:
            raise DimensionMismatchError(f"dimension mismatch: y has {y.shape[1]} columns, expected p={p}", i)
        if x.shape != (1, q):
            raise DimensionMismatchError(f"dimension mismatch: x has shape {x.shape}, expected (1, {q})", i)
        if x[0, 0] != 1.0:
            raise MissingInterceptError("missing intercept column (x[0] != 1)", i)
        subjects.append(SubjectData(y, x[0]))
    dataset = Dataset(tuple(subjects))
    return standardize_covariates(dataset) if standardize else dataset


def write_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write ``dataset`` as a manifest plus CSV files; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(dataset.subjects):
        y_name, x_name = f"subject{i:04d}_y.csv", f"subject{i:04d}_x.csv"
        np.savetxt(directory / y_name, s.y, delimiter=",", fmt="%.17g")
        np.savetxt(directory / x_name, s.x[None, :], delimiter=",", fmt="%.17g")
        entries.append({"y": y_name, "x": x_name})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"p": dataset.p, "q": dataset.q, "subjects": entries}, indent=1))
    return manifest


def sample_covariance(subject: SubjectData) -> SampleCov:
    # Mean-zero model: no centring, divisor T.
    s = subject.y.T @ subject.y / subject.t_count
    return SampleCov(0.5 * (s + s.T), subject.t_count)


def pooled_matrix(dataset: Dataset) -> PooledMatrix:
    t = dataset.t_counts
    h = np.tensordot(t, dataset.covariances, axes=1) / t.sum()
    return PooledMatrix(0.5 * (h + h.T))


def project_response(subject: SubjectData, gamma: np.ndarray) -> float:
    """Sum over observations of the squared projection ``(gamma' y_t)^2``."""
    v = subject.y @ np.asarray(gamma, dtype=float)
    return float(v @ v)


def projected_responses(dataset: Dataset, gamma: np.ndarray) -> np.ndarray:
    """Vector of ``project_response`` over all subjects, via the stored covariances."""
    gamma = np.asarray(gamma, dtype=float)
    quad = np.einsum("j,ijk,k->i", gamma, dataset.covariances, gamma)
    return dataset.t_counts * np.maximum(quad, 0.0)


def canonical_sign(gamma: np.ndarray) -> np.ndarray:
    """Flip ``gamma`` so its largest-magnitude entry is positive."""
    gamma = np.asarray(gamma, dtype=float)
    return gamma if gamma[np.argmax(np.abs(gamma))] >= 0 else -gamma
