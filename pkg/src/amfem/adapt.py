"""Bulk marking and the solve/estimate/mark/refine loop."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .estimator import IndicatorSet, estimate, frozen_indicators, oscillation
from .mesh import Mesh, generate_lshape, generate_unit_square, locate, refine, uniform_refine
from .problems import Problem, make_problem
from .spaces import build_dofmap, prolong_stress
from .system import assemble, energy_error, energy_norm, solve

__all__ = [
    "AfemConfig",
    "AfemHistory",
    "AfemRecord",
    "HISTORY_HEADER",
    "IterationError",
    "afem_run",
    "doerfler_mark",
    "initial_mesh",
    "reference_error",
    "uniform_run",
]

HISTORY_HEADER = ("k", "ntri", "ndof", "eta2", "osc2", "err_energy", "nmarked", "seconds")
REDUCTION_TOL = 1e-10


class IterationError(RuntimeError):
    """A module error raised inside the adaptive loop, tagged with its iteration."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"iteration {iteration}: {type(cause).__name__}: {cause}")
        self.iteration = iteration
        self.cause = cause


def doerfler_mark(ind, theta: float) -> np.ndarray:
    """Smallest set whose combined indicator reaches ``theta`` of the total.

    Elements are sorted by decreasing eta^2 + osc^2 (ties by index) and the
    shortest prefix meeting the bulk criterion is returned, sorted.

    Parameters
    ----------
    ind : IndicatorSet or array_like
        Per-element indicators; arrays are taken as the combined values.
    theta : float
        Bulk parameter in (0, 1].
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    vals = ind.combined if isinstance(ind, IndicatorSet) else np.asarray(ind, float)
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise ValueError("indicators must be finite and nonnegative")
    total = vals.sum()
    if total <= 0.0:
        return np.empty(0, np.int64)
    order = np.lexsort((np.arange(len(vals)), -vals))
    csum = np.cumsum(vals[order])
    n = int(np.searchsorted(csum, theta * total, side="left")) + 1
    n = min(n, int(np.count_nonzero(vals)))
    return np.sort(order[:n])


@dataclass(frozen=True)
class AfemConfig:
    """Settings of an adaptive or uniform run.

    ``theta`` is the bulk parameter.  The convergence theory asks for theta
    below a threshold built from unknown efficiency and reliability
    constants, so any value in (0, 1) is accepted here.
    """

    problem: str = "poisson"
    domain: str = "unit_square"
    family: str = "rt"
    order: int = 0
    source: str = "manufactured"
    theta: float = 0.3
    max_dofs: int = 100_000
    tol: float = 1e-8
    max_iter: int = 100
    initial_subdivisions: int = 2
    refinement: str = "bisec3"
    reference_error: bool = False
    check_reductions: bool = True

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if self.refinement not in ("nvb", "bisec3"):
            raise ValueError(f"unknown refinement rule {self.refinement!r}")
        if self.max_dofs < 0 or self.max_iter < 0 or self.tol < 0:
            raise ValueError("stopping parameters must be nonnegative")

    def make_problem(self) -> Problem:
        return make_problem(self.problem, self.family, self.order, self.source)


@dataclass
class AfemRecord:
    k: int
    ntri: int
    n_sigma: int
    n_u: int
    eta2: float
    osc2: float
    err_energy: float
    nmarked: int
    seconds: float
    est_reduction_slack: float = float("nan")
    osc_reduction_slack: float = float("nan")

    @property
    def ndof(self) -> int:
        return self.n_sigma + self.n_u

    def row(self) -> list:
        return [self.k, self.ntri, self.ndof, self.eta2, self.osc2, self.err_energy,
                self.nmarked, self.seconds]


@dataclass
class AfemHistory:
    config: dict
    records: list[AfemRecord] = field(default_factory=list)
    meshes: list[Mesh] = field(default_factory=list, repr=False)
    indicators: list[IndicatorSet] = field(default_factory=list, repr=False)
    fields: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name == "ndof":
            return np.array([r.ndof for r in self.records], float)
        return np.array([getattr(r, name) for r in self.records], float)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_HEADER)
            for r in self.records:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])

    def to_dict(self) -> dict:
        return {"config": self.config, "records": [dict(asdict(r), ndof=r.ndof) for r in self.records]}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True))


def initial_mesh(domain: str, n: int = 2) -> Mesh:
    if domain == "unit_square":
        return generate_unit_square(n)
    if domain == "lshape":
        return generate_lshape(n)
    path = Path(domain)
    if path.suffix == ".json" and path.exists():
        return Mesh.from_json(path)
    raise ValueError(f"unknown domain {domain!r}: expected unit_square, lshape or a mesh JSON file")


def reference_error(history: AfemHistory, problem: Problem, extra_levels: int = 2) -> np.ndarray:
    """Energy errors of every stored field against a solution computed two
    uniform refinements beyond the finest mesh."""
    ref_mesh = uniform_refine(history.meshes[-1], extra_levels)
    ref = solve(assemble(ref_mesh, problem))
    out = []
    for fld in history.fields:
        parent = locate(fld.mesh, ref_mesh)
        p = prolong_stress(fld.mesh, fld.dofmap, fld.sigma, ref_mesh, ref.dofmap, parent)
        out.append(energy_norm(ref_mesh, ref.dofmap, ref.sigma - p))
    return np.array(out)


def _run(config: AfemConfig, mesh: Mesh | None, uniform: bool, keep_fields: bool) -> AfemHistory:
    problem = config.make_problem()
    if mesh is None:
        mesh = initial_mesh(config.domain, config.initial_subdivisions)
    hist = AfemHistory(config=asdict(config) | {"mode": "uniform" if uniform else "adaptive"})
    has_exact = problem.exact_sigma is not None
    k = 0
    while True:
        t0 = time.perf_counter()
        try:
            fld = solve(assemble(mesh, problem))
            ind = estimate(fld)
        except Exception as exc:  # tag module failures with the iteration
            raise IterationError(k, exc) from exc
        eta2, osc2 = ind.total()
        err = energy_error(fld) if has_exact else float("nan")
        dm = fld.dofmap
        ndof = dm.n_sigma + dm.n_u
        stop = (ndof >= config.max_dofs or eta2 + osc2 <= config.tol or k >= config.max_iter)
        if stop:
            marked = np.empty(0, np.int64)
        elif uniform:
            marked = np.arange(mesh.n_triangles)
        else:
            marked = doerfler_mark(ind, config.theta)
        rec = AfemRecord(k, mesh.n_triangles, dm.n_sigma, dm.n_u, eta2, osc2, err,
                         len(marked), 0.0)
        hist.meshes.append(mesh)
        hist.indicators.append(ind)
        hist.fields.append(fld)
        hist.records.append(rec)
        if stop or len(marked) == 0:
            rec.seconds = time.perf_counter() - t0
            break
        try:
            if uniform:
                fine = uniform_refine(mesh, 1)
            else:
                fine = refine(mesh, marked, config.refinement)
        except Exception as exc:
            raise IterationError(k, exc) from exc
        if config.check_reductions:
            parent = locate(mesh, fine)
            eta_fine = frozen_indicators(fld, fine, parent).sum()
            rec.est_reduction_slack = float(eta2 - 0.5 * ind.eta2[marked].sum() - eta_fine)
            osc_fine = oscillation(fine, problem.source, config.order, problem.n_components).sum()
            refined = np.flatnonzero(np.bincount(parent, minlength=mesh.n_triangles) != 1)
            rec.osc_reduction_slack = float(osc2 - 0.5 * ind.osc2[refined].sum() - osc_fine)
        rec.seconds = time.perf_counter() - t0
        mesh = fine
        k += 1
    if config.reference_error and not has_exact:
        for rec, e in zip(hist.records, reference_error(hist, problem)):
            rec.err_energy = float(e)
    if not keep_fields:
        hist.fields = []
    return hist


def afem_run(config: AfemConfig, mesh: Mesh | None = None, keep_fields: bool = True) -> AfemHistory:
    """Adaptive loop: solve, estimate, mark by bulk criterion, refine."""
    return _run(config, mesh, uniform=False, keep_fields=keep_fields)


def uniform_run(config: AfemConfig, mesh: Mesh | None = None, keep_fields: bool = True) -> AfemHistory:
    """Baseline loop refining every element by one bisection per step."""
    return _run(config, mesh, uniform=True, keep_fields=keep_fields)
