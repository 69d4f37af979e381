"""Synthetic common-eigenstructure data and the replicate harness that scores estimation and inference."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ._parallel import ordered_map
from .data import Dataset, SubjectData
from .estimate import CVConfig, FitConfig, PenaltySpec, SolverError, select_components
from .infer import SplitPlan, infer

SCENARIO_DIR = Path(__file__).parent / "scenarios"


def reflection_basis(p: int) -> np.ndarray:
    """Orthonormal ``p x p`` matrix whose first column is ``ones / sqrt(p)``.

    Column ``k > 0`` is ``-e_k + c * ones + (1 - p c) e_0`` with
    ``c = (1 - 1/sqrt(p)) / (p - 1)``; at ``p = 5`` columns 1 and 2 are
    ``(0.447, -0.862, 0.138, 0.138, 0.138)`` and ``(0.447, 0.138, -0.862, 0.138, 0.138)``.
    """
    if p == 1:
        return np.ones((1, 1))
    c = (1 - 1 / math.sqrt(p)) / (p - 1)
    g = np.full((p, p), c) - np.eye(p)
    g[0, :] += 1 - p * c
    g[:, 0] = 1 / math.sqrt(p)
    return g


@dataclass(frozen=True)
class ActiveSet:
    component: int
    indices: tuple[int, ...]
    values: tuple[float, ...]


DEFAULT_ACTIVE = (ActiveSet(1, (10, 20, 30), (2.0, 2.0, -2.0)),
                  ActiveSet(2, (15, 25, 35), (1.0, -1.0, 1.0)))


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation design. Component indices are 0-based columns of ``eigvec_matrix``."""

    n: int = 100
    t_obs: int = 100
    p: int = 5
    q: int = 200
    mode: str = "alternative"
    eigvec_matrix: np.ndarray | None = None
    active_sets: tuple[ActiveSet, ...] = DEFAULT_ACTIVE
    lognormal_sigma: float = 0.5
    intercept_range: tuple[float, float] = (-10.0, 10.0)
    replicate_count: int = 50
    b_splits: int = 100
    rng_seed: int = 2024
    targets: tuple[int, ...] = (10, 25)
    null_targets: int = 10
    max_components: int | None = None
    dfd_threshold: float = 2.0
    restarts: int = 3
    lam: float | None = None
    cv_folds: int = 5
    alpha: float = 0.05
    name: str = "scenario"

    def __post_init__(self):
        if self.mode not in ("null", "alternative"):
            raise ValueError(f"mode must be 'null' or 'alternative', got {self.mode!r}")
        if self.eigvec_matrix is not None:
            g = np.array(self.eigvec_matrix, dtype=float)
            if g.shape != (self.p, self.p) or not np.allclose(g.T @ g, np.eye(self.p), atol=1e-10):
                raise ValueError("eigvec_matrix must be a p x p orthonormal matrix")
            g.setflags(write=False)
            object.__setattr__(self, "eigvec_matrix", g)
        object.__setattr__(self, "active_sets", tuple(
            a if isinstance(a, ActiveSet) else ActiveSet(int(a["component"]), tuple(a["indices"]), tuple(a["values"]))
            for a in self.active_sets))
        for a in self.active_sets if self.mode == "alternative" else ():
            if any(not 0 < j < self.q for j in a.indices) or not 0 <= a.component < self.p:
                raise ValueError(f"active set {a} out of range")
        if self.t_obs <= self.p:
            raise ValueError("t_obs must exceed p")

    @property
    def basis(self) -> np.ndarray:
        """The true eigenvector matrix; the reflection basis when none was given."""
        return reflection_basis(self.p) if self.eigvec_matrix is None else self.eigvec_matrix

    @property
    def signal_components(self) -> list[int]:
        return [] if self.mode == "null" else [a.component for a in self.active_sets]

    def truth_betas(self, intercepts: dict[int, float] | None = None) -> dict[int, np.ndarray]:
        out = {}
        for a in self.active_sets if self.mode == "alternative" else ():
            beta = np.zeros(self.q)
            beta[0] = (intercepts or {}).get(a.component, 0.0)
            beta[list(a.indices)] = a.values
            out[a.component] = beta
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eigvec_matrix"] = None if self.eigvec_matrix is None else self.eigvec_matrix.tolist()
        d["active_sets"] = [asdict(a) for a in self.active_sets]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        d.pop("grid", None)
        for key in ("intercept_range", "targets"):
            if key in d:
                d[key] = tuple(d[key])
        if "active_sets" in d:
            d["active_sets"] = tuple(d["active_sets"])
        return cls(**d)


def load_scenario(name_or_path: str | Path) -> tuple[ScenarioSpec, list[tuple[int, int]] | None]:
    """Read a scenario JSON (bundled name or path); returns the spec and an optional (n, T) grid."""
    path = Path(name_or_path)
    if not path.is_file():
        path = SCENARIO_DIR / f"{name_or_path}.json"
    if not path.is_file():
        raise FileNotFoundError(f"no scenario {name_or_path!r}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    grid = [tuple(cell) for cell in raw["grid"]] if raw.get("grid") else None
    raw.setdefault("name", path.stem)
    return ScenarioSpec.from_dict(raw), grid


@dataclass
class Truth:
    gamma: np.ndarray
    betas: dict[int, np.ndarray]


def generate_subject(spec: ScenarioSpec, x: np.ndarray, rng: np.random.Generator,
                     betas: dict[int, np.ndarray] | None = None) -> SubjectData:
    """Draw ``t_obs`` rows from N(0, Gamma diag(lam) Gamma')."""
    betas = spec.truth_betas() if betas is None else betas
    log_lam = rng.normal(0.0, spec.lognormal_sigma, spec.p)
    for comp, beta in betas.items():
        eta = float(x @ beta)
        if abs(eta) > 700:
            raise OverflowError(f"eigenvalue overflow: x'beta = {eta:.4g}")
        log_lam[comp] = eta
    scale = np.exp(0.5 * log_lam)
    y = (rng.standard_normal((spec.t_obs, spec.p)) * scale) @ spec.basis.T
    return SubjectData(y, x)


def generate_dataset(spec: ScenarioSpec, rng: np.random.Generator) -> tuple[Dataset, Truth]:
    lo, hi = spec.intercept_range
    intercepts = {a.component: float(rng.uniform(lo, hi)) for a in spec.active_sets} \
        if spec.mode == "alternative" else {}
    betas = spec.truth_betas(intercepts)
    xs = np.column_stack([np.ones(spec.n), rng.standard_normal((spec.n, spec.q - 1))])
    subjects = tuple(generate_subject(spec, x, rng, betas) for x in xs)
    return Dataset(subjects), Truth(spec.basis, betas)


def abs_cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def match_components(estimated: Sequence[np.ndarray], truth: Sequence[np.ndarray]) -> list[int | None]:
    """For each true vector, the index of its matched estimate (bijection maximising total |cosine|)."""
    k_true, k_est = len(truth), len(estimated)
    if k_true == 0:
        return []
    sim = np.array([[abs_cosine(e, t) for e in estimated] for t in truth]).reshape(k_true, k_est)
    best, best_val = None, -1.0
    slots = list(range(k_est)) + [None] * max(0, k_true - k_est)
    for perm in itertools.permutations(slots, k_true):
        val = sum(sim[i, j] for i, j in enumerate(perm) if j is not None)
        if val > best_val + 1e-15:
            best, best_val = perm, val
    return list(best)


def _component_label(comp: int | None) -> str:
    return "null" if comp is None else f"C{comp + 1}"


def run_replicate(spec: ScenarioSpec, r: int, plan: SplitPlan | None = None,
                  penalty: PenaltySpec = PenaltySpec(), config: FitConfig | None = None) -> dict:
    """One replicate: generate, fit components, match, infer on targets. Returns a flat record."""
    seed = spec.rng_seed * 1_000_003 + r
    rng = np.random.default_rng([spec.rng_seed, r])
    data, truth = generate_dataset(spec, rng)
    plan = replace(plan or SplitPlan.halves(spec.n, spec.b_splits), rng_seed=seed)
    config = replace(config or FitConfig(restarts=spec.restarts), rng_seed=seed, threads=1)
    cv = None if spec.lam is not None else CVConfig(folds=spec.cv_folds)
    if spec.lam is not None:
        penalty = penalty.with_lambda(spec.lam)
    comps = select_components(data, penalty, config, spec.dfd_threshold, cv, spec.max_components)
    record = {"replicate": r, "k": len(comps.components), "dfd": comps.dfd_values,
              "traces_monotone": all(
                  all(b <= a + 1e-8 for a, b in zip(c.objective_trace, c.objective_trace[1:]))
                  for c in comps.components),
              "components": []}
    gammas = [c.gamma for c in comps.components]
    if spec.mode == "alternative":
        signal = spec.signal_components
        matched = match_components(gammas, [truth.gamma[:, c] for c in signal])
        jobs = [(c, m, list(spec.targets)) for c, m in zip(signal, matched)]
    else:
        chosen = rng.choice(np.arange(1, spec.q), size=min(spec.null_targets, spec.q - 1), replace=False)
        jobs = [(None, 0 if gammas else None, sorted(int(j) for j in chosen))]
    for comp, idx, targets in jobs:
        entry = {"component": _component_label(comp), "matched": idx is not None}
        if idx is None:
            record["components"].append(entry)
            continue
        fit_ = comps.components[idx]
        truth_beta = truth.betas.get(comp, np.zeros(spec.q))
        entry["abs_inner"] = abs_cosine(fit_.gamma, truth.gamma[:, comp]) if comp is not None else None
        res, _, _ = infer(data, fit_.gamma, penalty.with_lambda(fit_.lam), plan, spec.alpha, targets)
        entry["coefs"] = [
            {"j": j, "truth": float(truth_beta[j]), "estimate": float(res.beta_hat[j]),
             "v_hat": float(res.v_hat[j]), "ci_lower": float(res.ci_lower[j]),
             "ci_upper": float(res.ci_upper[j]),
             "covered": bool(res.ci_lower[j] <= truth_beta[j] <= res.ci_upper[j])}
            for j in targets]
        record["components"].append(entry)
    return record


@dataclass
class SimReport:
    rows: list[dict]
    gamma_rows: list[dict]
    replicate_count: int
    failures: int
    runtime: float
    records: list[dict] = field(default_factory=list)
    spec: dict | None = None

    def row(self, component: str, j: int | str) -> dict:
        for row in self.rows:
            if row["component"] == component and row["coefficient"] == j:
                return row
        raise KeyError((component, j))

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["component", "coefficient", "truth", "mean_estimate", "se", "cp", "mse",
                  "mean_sd_hat", "replicates_used"]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n", extrasaction="ignore")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def summary(self) -> dict:
        return {"replicate_count": self.replicate_count, "failures": self.failures,
                "runtime_seconds": self.runtime, "rows": self.rows, "gamma": self.gamma_rows,
                "spec": self.spec}


def aggregate(records: Sequence[dict], replicate_count: int, runtime: float = 0.0,
              spec: dict | None = None) -> SimReport:
    """Collapse replicate records (in replicate order) into per-coefficient metrics."""
    coef: dict[tuple[str, object], list[dict]] = {}
    inner: dict[str, list[float]] = {}
    failures = 0
    for rec in records:
        if "error" in rec:
            failures += 1
            continue
        for comp in rec["components"]:
            label = comp["component"]
            if comp.get("abs_inner") is not None:
                inner.setdefault(label, []).append(comp["abs_inner"])
            elif label != "null":
                inner.setdefault(label, []).append(0.0)
            for c in comp.get("coefs", []):
                key = (label, "pooled" if label == "null" else c["j"])
                coef.setdefault(key, []).append(c)
    rows = []
    for (label, j), items in coef.items():
        est = np.array([c["estimate"] for c in items])
        truth = np.array([c["truth"] for c in items])
        rows.append({"component": label, "coefficient": j,
                     "truth": float(truth.mean()), "mean_estimate": float(est.mean()),
                     "se": float(est.std(ddof=1)) if est.size > 1 else 0.0,
                     "cp": float(np.mean([c["covered"] for c in items])),
                     "mse": float(np.mean((est - truth) ** 2)),
                     "mean_sd_hat": float(np.mean(np.sqrt([c["v_hat"] for c in items]))),
                     "replicates_used": int(est.size)})
    rows.sort(key=lambda r: (r["component"], str(r["coefficient"])))
    gamma_rows = [{"component": label, "mean_abs_inner": float(np.mean(v)),
                   "se": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, "replicates_used": len(v)}
                  for label, v in sorted(inner.items())]
    return SimReport(rows, gamma_rows, replicate_count, failures, runtime, list(records), spec)


def run_replicates(spec: ScenarioSpec, plan: SplitPlan | None = None, penalty: PenaltySpec = PenaltySpec(),
                   config: FitConfig | None = None, threads: int = 1) -> SimReport:
    """Run ``spec.replicate_count`` independent replicates; failures are counted, not raised."""
    start = time.perf_counter()

    def one(r):
        try:
            return run_replicate(spec, r, plan, penalty, config)
        except (SolverError, np.linalg.LinAlgError, OverflowError, ValueError) as exc:
            return {"replicate": r, "error": f"{type(exc).__name__}: {exc}"}

    records = ordered_map(one, range(spec.replicate_count), threads)
    return aggregate(records, spec.replicate_count, time.perf_counter() - start, spec.to_dict())


def sweep(spec: ScenarioSpec, grid: Sequence[tuple[int, int]], plan: SplitPlan | None = None,
          penalty: PenaltySpec = PenaltySpec(), config: FitConfig | None = None,
          threads: int = 1) -> list[SimReport]:
    """One report per ``(n, T)`` cell of ``grid``."""
    if not grid:
        raise ValueError("grid must be nonempty")
    reports = []
    for n, t in grid:
        cell = replace(spec, n=int(n), t_obs=int(t))
        cell_plan = None if plan is None else SplitPlan.halves(int(n), plan.b_splits, plan.rng_seed)
        reports.append(run_replicates(cell, cell_plan, penalty, config, threads))
    return reports


def sweep_csv(grid: Sequence[tuple[int, int]], reports: Sequence[SimReport]) -> str:
    buf = io.StringIO()
    fields = ["n", "T", "component", "coefficient", "truth", "mean_estimate", "se", "cp", "mse",
              "mean_sd_hat", "replicates_used"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n", extrasaction="ignore")
    writer.writeheader()
    for (n, t), rep in zip(grid, reports):
        for row in rep.rows:
            writer.writerow({"n": n, "T": t, **{k: (repr(v) if isinstance(v, float) else v)
                                               for k, v in row.items()}})
    return buf.getvalue()
