"""Special Lagrangian fibrations assembled from graph sections over a base grid."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .flat_model import (GroupAction, PerturbedCalabiYau, apply_group_action, structure_from_dict,
                         structure_to_dict)
from .forms import collocation_size, grid_points
from .solver import (GraphSection, IFTCertificate, SolverContext, SolverError, c1_norm, derivative_norm,
                     residual_direct, residual_formula, solution_derivative, solve_section)

FIBRATION_SCHEMA = "slagfib.fibration/1"


class FibrationError(RuntimeError):
    pass


class FiberSolveError(FibrationError):
    """A per-fiber solver failure; carries the offending base point."""

    def __init__(self, y, cause: Exception):
        super().__init__(f"fiber over y = {np.asarray(y).tolist()} failed: {cause}")
        self.y = np.asarray(y, dtype=float)
        self.cause = cause


@dataclass(frozen=True, eq=False)
class BaseGrid:
    points: np.ndarray
    spacing: float
    radius: float
    action: GroupAction | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("base grid needs a nonempty (N, n) point array")
        if np.any(np.linalg.norm(pts, axis=1) >= self.radius):
            raise ValueError(f"grid points must lie strictly inside radius {self.radius:g}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.action is not None:
            for g in self.action.elements:
                for p in pts:
                    if self.index_of(g.base_matrix @ p) < 0:
                        raise ValueError("grid is not invariant under the attached action")

    @classmethod
    def square(cls, n: int, half_width: float, count: int, radius: float,
               action: GroupAction | None = None) -> "BaseGrid":
        """count^n points evenly filling [-half_width, half_width]^n."""
        axis = np.linspace(-half_width, half_width, count)
        pts = np.array(list(itertools.product(axis, repeat=n)))
        spacing = 2.0 * half_width / (count - 1) if count > 1 else 0.0
        return cls(pts, spacing, radius, action)

    @property
    def n(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return len(self.points)

    def index_of(self, y, tol: float = 1e-9) -> int:
        dist = np.linalg.norm(self.points - np.asarray(y, dtype=float), axis=1)
        i = int(np.argmin(dist))
        return i if dist[i] <= tol else -1

    def neighbor_pairs(self) -> list:
        """Index pairs at distance at most the spacing (axis neighbors)."""
        if self.spacing <= 0:
            return []
        tree = cKDTree(self.points)
        return sorted(tree.query_pairs(self.spacing * (1 + 1e-9)))

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "spacing": self.spacing, "radius": self.radius,
                "action": None if self.action is None else self.action.to_dict()}


@dataclass(frozen=True, eq=False)
class Fibration:
    structure: PerturbedCalabiYau
    certificate: IFTCertificate
    grid: BaseGrid
    sections: tuple
    theta: float
    diagnostics: tuple
    continuity: dict = field(default_factory=dict)

    def section_at(self, y) -> GraphSection:
        i = self.grid.index_of(y)
        if i < 0:
            raise KeyError(f"no fiber over {np.asarray(y).tolist()}")
        return self.sections[i]

    @property
    def max_residual(self) -> float:
        return max(max(d["residual_direct"], d["residual_formula"]) for d in self.diagnostics)

    @property
    def max_sigma_norm(self) -> float:
        return max(d["sigma_norm"] for d in self.diagnostics)


def _solve_one(structure, certificate, ctx, y, mode, tol):
    try:
        section, log = solve_section(structure, y, certificate, mode=mode, tol=tol, context=ctx)
        cols = solution_derivative(structure, y, section.sigma, context=ctx, certificate=certificate)
    except SolverError as exc:
        raise FiberSolveError(y, exc) from exc
    diag = {
        "y": section.y.tolist(),
        "sigma_norm": ctx.norm(section.sigma),
        "residual_direct": ctx.residual_norm(residual_direct(structure, y, section.sigma)),
        "residual_formula": ctx.residual_norm(residual_formula(structure, y, section.sigma)),
        "iterations": log.iterations,
        "derivative_norm": derivative_norm(cols, ctx.alpha, ctx.grid),
    }
    return section, diag


def build_fibration(structure: PerturbedCalabiYau, certificate: IFTCertificate, grid: BaseGrid,
                    threads: int = 1, mode: str = "fixed_slope", tol: float = 1e-10,
                    context: SolverContext | None = None) -> Fibration:
    """Solve for sigma(y) at every grid point; any fiber failure aborts the build."""
    if not certificate.hypotheses_ok:
        raise FibrationError("certificate hypotheses do not hold")
    if grid.n != structure.n:
        raise ValueError("grid dimension does not match the structure")
    if np.any(np.linalg.norm(grid.points, axis=1) >= certificate.r):
        raise FibrationError(f"grid leaves the certified ball of radius {certificate.r:g}")
    ctx = context or SolverContext(structure, certificate.cutoff, certificate.alpha, certificate.probes,
                                   certificate.seed, certificate.norm_grid)
    # warm the shared caches before threads read them
    _ = (ctx.lin0, ctx.probes, ctx.contraction0)

    def job(y):
        return _solve_one(structure, certificate, ctx, y, mode, tol)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, grid.points))
    else:
        results = [job(y) for y in grid.points]
    sections = tuple(r[0] for r in results)
    diags = tuple(r[1] for r in results)
    continuity = _continuity(grid, sections, diags, ctx)
    return Fibration(structure, certificate, grid, sections, structure.theta, diags, continuity)


def _continuity(grid, sections, diags, ctx) -> dict:
    """Adjacent sections differ by at most 1.5 * ||D sigma|| * |y - y'|."""
    worst = 0.0
    ok = True
    for i, j in grid.neighbor_pairs():
        diff = ctx.norm(sections[i].sigma - sections[j].sigma)
        dist = float(np.linalg.norm(grid.points[i] - grid.points[j]))
        bound = 1.5 * max(diags[i]["derivative_norm"], diags[j]["derivative_norm"]) * dist
        worst = max(worst, diff - bound)
        ok = ok and diff <= bound + 1e-12
    return {"ok": ok, "worst_excess": worst, "pairs": len(grid.neighbor_pairs())}


# ---------------------------------------------------------------------------
# embedding and equivariance


@dataclass(frozen=True)
class EmbeddingReport:
    min_jacobian_det: float
    min_fiber_separation: float
    injective: bool
    max_dsigma_dy: float
    samples_per_fiber: int
    pairs_checked: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _fiber_points(section: GraphSection, size: int) -> np.ndarray:
    lattice = section.sigma.lattice
    n = lattice.n
    x = grid_points(lattice, size).reshape(n, -1)
    vals = section.sigma.grid_values(size).real.reshape(n, -1)
    y = section.y[:, None] + vals
    return np.concatenate([x, y], axis=0).T


def check_embedding(fibration: Fibration, samples: int = 32, jacobian_grid: int | None = None) -> EmbeddingReport:
    """Sample det dPsi for Psi(x, y) = (x, y + sigma(y)(x)) and the distance between fibers.

    dPsi is block lower triangular, so det dPsi = det(I + d sigma / dy).
    """
    structure = fibration.structure
    cert = fibration.certificate
    n = structure.n
    ctx = SolverContext(structure, cert.cutoff, cert.alpha, cert.probes, cert.seed, cert.norm_grid)
    jacobian_grid = max(jacobian_grid or 0, collocation_size(cert.cutoff))
    samples = max(samples, 2 * cert.cutoff + 2)
    min_det = math.inf
    max_partial = 0.0
    for sec in fibration.sections:
        cols = solution_derivative(structure, sec.y, sec.sigma, context=ctx, certificate=cert)
        # J[j, i] = d sigma_j / d y_i on the x grid
        J = np.stack([c.grid_values(jacobian_grid).real.reshape(n, -1) for c in cols], axis=1)
        J = np.moveaxis(J, -1, 0)
        max_partial = max(max_partial, float(np.max(np.abs(J))))
        dets = np.linalg.det(np.eye(n) + J)
        min_det = min(min_det, float(np.min(dets)))

    lattice = structure.lattice
    shifts = [lattice.basis @ np.array(c, dtype=float) for c in itertools.product((-1, 0, 1), repeat=n)]
    clouds = [_fiber_points(sec, samples) for sec in fibration.sections]
    sup_sigma = [float(np.max(np.abs(c[:, n:] - s.y))) * math.sqrt(n) for c, s in zip(clouds, fibration.sections)]
    ys = fibration.grid.points
    min_sep = math.inf
    pairs = 0
    trees = {}
    for a in range(len(clouds)):
        for b in range(a + 1, len(clouds)):
            lower = float(np.linalg.norm(ys[a] - ys[b])) - sup_sigma[a] - sup_sigma[b]
            if lower >= min_sep:
                continue
            if b not in trees:
                tiled = np.concatenate([clouds[b] + np.concatenate([s, np.zeros(n)]) for s in shifts])
                trees[b] = cKDTree(tiled)
            dist, _ = trees[b].query(clouds[a])
            min_sep = min(min_sep, float(np.min(dist)))
            pairs += 1
    if len(clouds) < 2:
        min_sep = math.inf
    injective = bool(min_det > 0 and min_sep > 0)
    return EmbeddingReport(min_det, min_sep, injective, max_partial, samples**n, pairs)


def check_equivariance(fibration: Fibration, action: GroupAction, tol: float = 1e-12) -> float:
    """max over gamma, y of ||(gamma^-1)^* sigma(y) - sigma(gamma y)||_{1,alpha}."""
    structure = fibration.structure
    for form in (structure.omega, structure.Omega):
        if action.invariance_defect(form) > tol:
            raise FibrationError("the structure is not invariant under the action")
    grid = fibration.grid
    cert = fibration.certificate
    worst = 0.0
    for g_index in range(len(action)):
        for sec in fibration.sections:
            moved = apply_group_action(action, g_index, sec)
            j = grid.index_of(moved.y)
            if j < 0:
                raise FibrationError("the grid is not invariant under the action")
            diff = moved.sigma - fibration.sections[j].sigma
            worst = max(worst, c1_norm(diff, cert.alpha, cert.norm_grid))
    return worst


# ---------------------------------------------------------------------------
# persistence


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fibration_to_dict(fibration: Fibration) -> dict:
    s = fibration.structure
    return {
        "schema": FIBRATION_SCHEMA,
        "lattice": s.lattice.to_dict(),
        "epsilon": s.epsilon,
        "seed": s.metadata.get("seed"),
        "theta": fibration.theta,
        "structure": structure_to_dict(s),
        "certificate": fibration.certificate.to_dict(),
        "grid": fibration.grid.to_dict(),
        "sections": [sec.to_dict() for sec in fibration.sections],
        "diagnostics": list(fibration.diagnostics),
        "continuity": fibration.continuity,
    }


def fibration_from_dict(data: dict) -> Fibration:
    if data.get("schema") != FIBRATION_SCHEMA:
        raise FibrationError(f"unknown fibration schema {data.get('schema')!r}")
    structure = structure_from_dict(data["structure"])
    cert = IFTCertificate.from_dict(data["certificate"])
    g = data["grid"]
    action = None if g.get("action") is None else GroupAction.from_dict(structure.lattice, g["action"])
    grid = BaseGrid(np.array(g["points"], dtype=float), float(g["spacing"]), float(g["radius"]), action)
    sections = tuple(GraphSection.from_dict(x) for x in data["sections"])
    return Fibration(structure, cert, grid, sections, float(data["theta"]), tuple(data["diagnostics"]),
                     dict(data.get("continuity", {})))


def fibration_csv(fibration: Fibration) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = fibration.structure.n
    w.writerow([f"y{i + 1}" for i in range(n)] + ["sigma_norm", "residual_direct", "residual_formula",
                                                  "iterations", "derivative_norm"])
    for d in fibration.diagnostics:
        w.writerow([repr(v) for v in d["y"]] + [repr(d["sigma_norm"]), repr(d["residual_direct"]),
                                                repr(d["residual_formula"]), d["iterations"],
                                                repr(d["derivative_norm"])])
    return buf.getvalue()


def export_fibration(fibration: Fibration, path) -> tuple:
    """Write the JSON fibration file and its companion CSV; returns both paths."""
    path = Path(path)
    atomic_write_text(path, json.dumps(fibration_to_dict(fibration), indent=1))
    csv_path = path.with_suffix(".csv")
    atomic_write_text(csv_path, fibration_csv(fibration))
    return path, csv_path


def import_fibration(path) -> Fibration:
    with open(path, encoding="utf-8") as fh:
        return fibration_from_dict(json.load(fh))
