"""Deformation of the zero-section fibration into special Lagrangian graphs.

The unknown is a 1-form sigma on the fiber torus with zero harmonic part.
The residual

    F(y, sigma) = (-Pi^* omega_k, *_h a^{-1} Pi^* Im(e^{i theta} Omega_k))

vanishes exactly when the graph of y + sigma is special Lagrangian of phase
theta.  Its sigma-derivative at the flat structure is the Dirac operator
D sigma = (d sigma, *d* sigma) = (d sigma, -d^* sigma), which is inverted
frequency by frequency.  Sections are found with the fixed-slope iteration of
the quantitative implicit function theorem; Newton mode is an accelerator.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .flat_model import PerturbedCalabiYau, make_rng
from .forms import (GraphPullback, TorusForm, d, default_norm_grid, form_basis,
                    form_from_dict, form_to_dict, hodge_star_torus, surrogate_norms, wave_vectors,
                    _box_frequencies)
from .lattice import Lattice

DEFAULT_ALPHA = 0.5
DEFAULT_PROBES = 64
MAX_ITERATIONS = 200
NEUMANN_TERM_TOL = 1e-14
PROJECTION_TOL = 1e-9


class SolverError(RuntimeError):
    pass


class ProjectionDefectError(SolverError):
    pass


class SmallnessViolationError(SolverError):
    pass


class DivergenceError(SolverError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = list(history)


class BudgetViolationError(SolverError):
    pass


class CertificateError(SolverError):
    pass


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True, eq=False)
class GraphSection:
    """sigma (zero harmonic part) and the base point y of L(y, sigma)."""

    y: np.ndarray
    sigma: TorusForm

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        if self.sigma.degree != 1:
            raise ValueError("a graph section is a 1-form")
        if y.shape[0] != self.sigma.n:
            raise ValueError("base point dimension does not match the torus")
        if np.any(self.sigma.mean() != 0):
            raise ValueError("graph sections must have exactly zero harmonic part")

    def norm(self, alpha: float = DEFAULT_ALPHA, grid: int | None = None) -> float:
        return c1_norm(self.sigma, alpha, grid)

    def to_dict(self) -> dict:
        return {"y": self.y.tolist(), "sigma": form_to_dict(self.sigma)}

    @classmethod
    def from_dict(cls, data: dict) -> "GraphSection":
        return cls(np.array(data["y"], dtype=float), form_from_dict(data["sigma"]))


@dataclass(frozen=True, eq=False)
class Residual:
    """(2-form part, function part); the 2-form part is absent on T^1."""

    first: TorusForm | None
    second: TorusForm

    def __add__(self, other: "Residual") -> "Residual":
        first = None if self.first is None else self.first + other.first
        return Residual(first, self.second + other.second)

    def __sub__(self, other: "Residual") -> "Residual":
        return self + (-1.0) * other

    def __mul__(self, scalar) -> "Residual":
        first = None if self.first is None else scalar * self.first
        return Residual(first, scalar * self.second)

    __rmul__ = __mul__

    def with_cutoff(self, cutoff: int) -> "Residual":
        first = None if self.first is None else self.first.with_cutoff(cutoff)
        return Residual(first, self.second.with_cutoff(cutoff))

    def real_part(self) -> "Residual":
        first = None if self.first is None else self.first.real_part()
        return Residual(first, self.second.real_part())

    def norm(self, alpha: float = DEFAULT_ALPHA, grid: int | None = None) -> float:
        """Combined C^{0,alpha} surrogate norm."""
        total = surrogate_norms(self.second, alpha, 0, grid).value
        if self.first is not None:
            total += surrogate_norms(self.first, alpha, 0, grid).value
        return total

    def max_coeff(self) -> float:
        m = self.second.max_coeff()
        return m if self.first is None else max(m, self.first.max_coeff())

    def l2_norm(self) -> float:
        s = self.second.l2_norm() ** 2
        if self.first is not None:
            s += self.first.l2_norm() ** 2
        return math.sqrt(s)


def c1_norm(form: TorusForm, alpha: float = DEFAULT_ALPHA, grid: int | None = None) -> float:
    return surrogate_norms(form, alpha, 1, grid).value


def zero_residual(lattice: Lattice, cutoff: int) -> Residual:
    first = TorusForm.zeros(lattice, 2, cutoff) if lattice.n >= 2 else None
    return Residual(first, TorusForm.zeros(lattice, 0, cutoff))


def zero_section(lattice: Lattice, cutoff: int) -> TorusForm:
    return TorusForm.zeros(lattice, 1, cutoff)


def random_section(lattice: Lattice, cutoff: int, rng: np.random.Generator, decay: float = 3.0,
                   band: int | None = None) -> TorusForm:
    """Random real 1-form in B_1 (zero mean) with amplitude ~ (1 + |k|)^-decay."""
    n = lattice.n
    k = _box_frequencies(n, cutoff)
    kmag = np.sqrt(np.sum(k**2, axis=0))
    prof = (1.0 + kmag) ** (-decay)
    if band is not None:
        prof = prof * (np.max(np.abs(k), axis=0) <= band)
    shape = (n,) + (2 * cutoff + 1,) * n
    c = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * prof
    return TorusForm(lattice, 1, c).real_part().without_mean()


def _fourier_mode(lattice: Lattice, cutoff: int, k: tuple, comp: int, kind: str) -> TorusForm:
    n = lattice.n
    c = np.zeros((n,) + (2 * cutoff + 1,) * n, dtype=complex)
    pos = tuple(cutoff + v for v in k)
    neg = tuple(cutoff - v for v in k)
    if kind == "cos":
        c[(comp,) + pos] += 0.5
        c[(comp,) + neg] += 0.5
    else:
        c[(comp,) + pos] += -0.5j
        c[(comp,) + neg] += 0.5j
    return TorusForm(lattice, 1, c)


def probe_sections(lattice: Lattice, cutoff: int, count: int, seed: int, alpha: float = DEFAULT_ALPHA,
                   grid: int | None = None) -> list:
    """Unit-C^{1,alpha} probe directions: lowest Fourier modes first, then random ones."""
    n = lattice.n
    probes = []
    for comp in range(n):
        for j in range(n):
            k = tuple(1 if i == j else 0 for i in range(n))
            for kind in ("cos", "sin"):
                probes.append(_fourier_mode(lattice, cutoff, k, comp, kind))
    probes = probes[: max(0, min(len(probes), count // 4))]
    rng = make_rng(seed)
    while len(probes) < count:
        decay = rng.uniform(1.0, 4.0)
        probes.append(random_section(lattice, cutoff, rng, decay))
    return [(1.0 / c1_norm(p, alpha, grid)) * p for p in probes]


# ---------------------------------------------------------------------------
# Dirac operator


class DiracOperator:
    """D sigma = (d sigma, *d* sigma) on zero-mean 1-forms, with its per-frequency symbol."""

    def __init__(self, lattice: Lattice, cutoff: int, probes: int = DEFAULT_PROBES, seed: int = 0,
                 alpha: float = DEFAULT_ALPHA, grid: int | None = None):
        self.lattice = lattice
        self.cutoff = cutoff
        self.alpha = alpha
        self.grid = grid or default_norm_grid(cutoff)
        n = lattice.n
        xi = wave_vectors(lattice, cutoff)  # (n, box)
        self._xi = xi
        two = form_basis(n, 2) if n >= 2 else ()
        rows = len(two) + 1
        sym = np.zeros((rows, n) + xi.shape[1:], dtype=complex)
        for r, (a, b) in enumerate(two):
            sym[r, b] += 1j * xi[a]
            sym[r, a] -= 1j * xi[b]
        for j in range(n):
            sym[-1, j] = 1j * xi[j]
        self.symbol = sym
        self.symbol.setflags(write=False)
        self._n_two = len(two)
        mag2 = np.sum(xi**2, axis=0)
        zero = (cutoff,) * n
        mag2[zero] = np.inf
        self._mag2 = mag2
        self.sigma_min = float(np.sqrt(np.min(mag2)))
        self.probe_count = probes
        self.probe_seed = seed
        ratios = [c1_norm(p, alpha, self.grid) / self.apply(p).norm(alpha, self.grid)
                  for p in probe_sections(lattice, cutoff, probes, seed, alpha, self.grid)]
        self.probe_ratio = max(ratios) if ratios else 0.0
        self.C_S = max(1.0 / self.sigma_min, self.probe_ratio)

    def singular_values(self) -> np.ndarray:
        """All singular values over retained nonzero frequencies (each equals |xi|)."""
        mats = np.moveaxis(self.symbol.reshape(self.symbol.shape[:2] + (-1,)), -1, 0)
        keep = np.isfinite(self._mag2.reshape(-1))
        return np.linalg.svd(mats[keep], compute_uv=False).ravel()

    def apply(self, sigma: TorusForm) -> Residual:
        first = d(sigma) if self.lattice.n >= 2 else None
        second = hodge_star_torus(d(hodge_star_torus(sigma)))
        return Residual(first, second)

    def _stack(self, target: Residual) -> np.ndarray:
        K = self.cutoff
        parts = []
        if self._n_two:
            parts.append(target.first.with_cutoff(K).coeffs)
        parts.append(target.second.with_cutoff(K).coeffs)
        return np.concatenate(parts, axis=0)

    def projection_defect(self, target: Residual) -> tuple:
        """(solution coefficients, L^2 size of the part of target outside the range)."""
        w = self._stack(target)
        v = np.einsum("rj...,r...->j...", np.conj(self.symbol), w) / self._mag2
        back = np.einsum("rj...,j...->r...", self.symbol, v)
        defect = w - back
        size = math.sqrt(self.lattice.covolume * float(np.sum(np.abs(defect) ** 2)))
        return v, size

    def invert(self, target: Residual, tol: float = PROJECTION_TOL, report: dict | None = None) -> TorusForm:
        """Unique zero-mean xi with D xi = target, after projecting target onto the range."""
        v, defect = self.projection_defect(target)
        if report is not None:
            report["projection_defect"] = defect
        if defect > tol:
            raise ProjectionDefectError(f"target is {defect:.3e} away from the range of the Dirac operator")
        return TorusForm(self.lattice, 1, v)


# ---------------------------------------------------------------------------
# residuals and linearizations


def _pullback_cutoff(structure, sigma: TorusForm) -> int:
    return sigma.cutoff


def residual_direct(structure: PerturbedCalabiYau, y, sigma: TorusForm) -> Residual:
    """Pull omega_k and a^{-1} Im(e^{i theta} Omega_k) back along the graph."""
    K = sigma.cutoff
    first = None
    if structure.n >= 2:
        first = -GraphPullback(structure.omega, y, sigma).value().with_cutoff(K)
    top = GraphPullback(structure.im_phase_Omega, y, sigma).value().with_cutoff(K)
    return Residual(first, hodge_star_torus(top)).real_part()


def residual_formula(structure: PerturbedCalabiYau, y, sigma: TorusForm) -> Residual:
    """(d sigma + Pi^* d alpha_k, *d* sigma + *Pi^* d Im beta_k).

    Coincides with :func:`residual_direct` for n <= 2.  For n >= 3 the flat part
    of the second component drops the cubic and higher minors of d sigma.
    """
    K = sigma.cutoff
    first = None
    if structure.n >= 2:
        first = d(sigma) + GraphPullback(structure.d_alpha, y, sigma).value().with_cutoff(K)
    pert = GraphPullback(structure.d_im_beta, y, sigma).value().with_cutoff(K)
    second = hodge_star_torus(d(hodge_star_torus(sigma))) + hodge_star_torus(pert)
    return Residual(first, second).real_part()


class Linearization:
    """Derivatives of the direct residual at (y, sigma)."""

    def __init__(self, structure: PerturbedCalabiYau, y, sigma: TorusForm, dirac: DiracOperator | None = None):
        self.structure = structure
        self.y = np.asarray(y, dtype=float)
        self.sigma = sigma
        self.cutoff = sigma.cutoff
        self._omega = GraphPullback(structure.omega, y, sigma) if structure.n >= 2 else None
        self._Omega = GraphPullback(structure.im_phase_Omega, y, sigma)
        self.dirac = dirac

    def _assemble(self, ydot, sdot) -> Residual:
        K = self.cutoff
        first = None
        if self._omega is not None:
            first = -self._omega.tangent(ydot, sdot).with_cutoff(K)
        second = hodge_star_torus(self._Omega.tangent(ydot, sdot).with_cutoff(K))
        return Residual(first, second).real_part()

    def sigma_direction(self, sdot: TorusForm) -> Residual:
        return self._assemble(None, sdot)

    def y_direction(self, ydot) -> Residual:
        return self._assemble(np.asarray(ydot, dtype=float), None)

    def perturbation(self, sdot: TorusForm) -> Residual:
        """V sdot = D_sigma F(y, sigma) sdot - D sdot."""
        if self.dirac is None:
            raise SolverError("perturbation part needs the Dirac operator")
        return self.sigma_direction(sdot) - self.dirac.apply(sdot)

    def value(self) -> Residual:
        K = self.cutoff
        first = None if self._omega is None else -self._omega.value().with_cutoff(K)
        return Residual(first, hodge_star_torus(self._Omega.value().with_cutoff(K))).real_part()


def linearize_sigma(structure: PerturbedCalabiYau, y, sigma: TorusForm):
    """The linear map sdot -> D_sigma F(y, sigma) sdot."""
    return Linearization(structure, y, sigma).sigma_direction


def linearize_y(structure: PerturbedCalabiYau, y, sigma: TorusForm):
    """The linear map ydot -> D_y F(y, sigma) ydot."""
    return Linearization(structure, y, sigma).y_direction


# ---------------------------------------------------------------------------
# Neumann-series inversion


@dataclass
class NeumannLog:
    contraction: float
    terms: int
    term_norms: list = field(default_factory=list)

    @property
    def decay_ratios(self) -> list:
        t = self.term_norms
        return [t[i + 1] / t[i] for i in range(len(t) - 1) if t[i] > 0]


def measure_contraction(dirac: DiracOperator, V, probes: list, alpha: float = DEFAULT_ALPHA,
                        grid: int | None = None) -> float:
    """Sampled surrogate norm of D^{-1} V on B_1."""
    best = 0.0
    for p in probes:
        out = dirac.invert(V(p))
        best = max(best, c1_norm(out, alpha, grid) / c1_norm(p, alpha, grid))
    return best


def perturbed_invert(dirac: DiracOperator, V, target: Residual, contraction: float | None = None,
                     probes: list | None = None, term_tol: float = NEUMANN_TERM_TOL,
                     max_terms: int = MAX_ITERATIONS):
    """(D + V)^{-1} target = sum_j (-D^{-1} V)^j D^{-1} target.

    Refuses to run unless the measured contraction ||D^{-1} V|| is below 1/2.
    Returns (solution, NeumannLog).
    """
    if contraction is None:
        if probes is None:
            probes = probe_sections(dirac.lattice, dirac.cutoff, 16, dirac.probe_seed, dirac.alpha, dirac.grid)
        contraction = measure_contraction(dirac, V, probes, dirac.alpha, dirac.grid)
    if not contraction < 0.5:
        raise SmallnessViolationError(f"||D^-1 V|| = {contraction:.3g} is not below 1/2")
    term = dirac.invert(target)
    total = term
    log = NeumannLog(float(contraction), 1, [term.l2_norm()])
    for _ in range(max_terms):
        if log.term_norms[-1] < term_tol:
            break
        term = -1.0 * dirac.invert(V(term))
        total = total + term
        log.terms += 1
        log.term_norms.append(term.l2_norm())
        if len(log.term_norms) > 3 and log.term_norms[-1] > 0.5 * log.term_norms[-2] > 0 \
                and log.term_norms[-2] > 0.5 * log.term_norms[-3]:
            raise SmallnessViolationError("Neumann terms stopped contracting; the perturbation is too large here")
    return total.real_part().without_mean(), log


# ---------------------------------------------------------------------------
# solver context and certificate


class SolverContext:
    """Per-structure cache: Dirac operator, probes and the frozen linearization at (0, 0)."""

    def __init__(self, structure: PerturbedCalabiYau, cutoff: int = 8, alpha: float = DEFAULT_ALPHA,
                 probes: int = DEFAULT_PROBES, seed: int = 0, grid: int | None = None):
        self.structure = structure
        self.cutoff = cutoff
        self.alpha = alpha
        self.grid = grid or default_norm_grid(cutoff)
        self.seed = seed
        self.probe_count = probes
        self.dirac = DiracOperator(structure.lattice, cutoff, probes, seed, alpha, self.grid)
        self._contraction0 = None

    @cached_property
    def probes(self) -> list:
        return probe_sections(self.structure.lattice, self.cutoff, self.probe_count, self.seed + 1,
                              self.alpha, self.grid)

    @cached_property
    def lin0(self) -> Linearization:
        return Linearization(self.structure, np.zeros(self.structure.n), self.zero(), self.dirac)

    def zero(self) -> TorusForm:
        return zero_section(self.structure.lattice, self.cutoff)

    def linearization(self, y, sigma: TorusForm) -> Linearization:
        return Linearization(self.structure, y, sigma, self.dirac)

    @property
    def contraction0(self) -> float:
        if self._contraction0 is None:
            self._contraction0 = measure_contraction(self.dirac, self.lin0.perturbation, self.probes,
                                                     self.alpha, self.grid)
        return self._contraction0

    def norm(self, sigma: TorusForm) -> float:
        return c1_norm(sigma, self.alpha, self.grid)

    def residual_norm(self, res: Residual) -> float:
        return res.norm(self.alpha, self.grid)

    def residual(self, y, sigma: TorusForm) -> Residual:
        return residual_direct(self.structure, y, sigma)

    def frozen_inverse(self, target: Residual, contraction: float | None = None):
        return perturbed_invert(self.dirac, self.lin0.perturbation, target,
                                self.contraction0 if contraction is None else contraction)


@dataclass(frozen=True)
class IFTCertificate:
    """Measured constants for the quantitative implicit function theorem (surrogate norms)."""

    Cbar: float
    deviation_bound: float
    residual_at_zero: float
    delta: float
    delta0: float
    r: float
    C_S: float
    sigma_min: float
    dirac_contraction: float
    max_contraction: float
    cutoff: int
    alpha: float
    norm_grid: int
    probes: int
    seed: int
    samples_y: int
    samples_sigma: int
    perturbation_size: float
    norm_kind: str = "grid surrogate C^{k,alpha} (sup + gradient sup + max finite-difference quotient)"

    @property
    def deviation_limit(self) -> float:
        return 1.0 / (2.0 * self.Cbar)

    @property
    def residual_limit(self) -> float:
        return self.delta / (4.0 * self.Cbar)

    @property
    def hypotheses_ok(self) -> bool:
        return (self.deviation_bound <= self.deviation_limit and self.residual_at_zero <= self.residual_limit
                and self.delta < self.delta0)

    def margins(self) -> dict:
        return {"deviation": self.deviation_limit - self.deviation_bound,
                "residual": self.residual_limit - self.residual_at_zero,
                "delta": self.delta0 - self.delta}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hypotheses_ok"] = self.hypotheses_ok
        out["margins"] = self.margins()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "IFTCertificate":
        keys = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in keys})


def base_samples(n: int, radius: float, count: int, seed: int) -> np.ndarray:
    """Origin, the 2n axis points on the sphere, then seeded points in the ball."""
    pts = [np.zeros(n)]
    for j in range(n):
        e = np.zeros(n)
        e[j] = radius
        pts.extend([e, -e])
    rng = make_rng(seed)
    while len(pts) < count:
        v = rng.standard_normal(n)
        v *= radius * rng.uniform() ** (1.0 / n) / np.linalg.norm(v)
        pts.append(v)
    return np.array(pts[:max(count, 1)])


def certify_hypotheses(structure: PerturbedCalabiYau, r: float | None = None, delta: float = 0.2,
                       delta0: float = 0.4, samples: int = 9, sigma_samples: int = 3,
                       context: SolverContext | None = None, cutoff: int = 8, probes: int = DEFAULT_PROBES,
                       seed: int = 0) -> IFTCertificate:
    """Measure Cbar, the derivative deviation and the residual at sigma = 0.

    ``r`` is the radius of the base ball to certify (default 3r/2 of the
    structure).  Derivative deviations are sampled over |y| <= r and
    ||sigma|| in {0, delta0}.
    """
    ctx = context or SolverContext(structure, cutoff, probes=probes, seed=seed)
    radius = 1.5 * structure.r if r is None else float(r)
    if radius + delta0 >= structure.base.domain_radius:
        raise CertificateError(f"graphs with |y| <= {radius:g} and ||sigma|| <= {delta0:g} can leave the domain "
                               f"of radius {structure.base.domain_radius:g}")
    dirac = ctx.dirac
    q0 = ctx.contraction0
    if q0 < 0.5:
        Cbar = dirac.C_S / (1.0 - q0)
    else:
        Cbar = math.inf
    flat = structure.is_flat
    ys = base_samples(structure.n, radius, samples, seed + 2)
    residual_at_zero = 0.0
    deviation = 0.0
    max_contraction = q0
    if not flat:
        zero = ctx.zero()
        for y in ys:
            residual_at_zero = max(residual_at_zero, ctx.residual_norm(ctx.residual(y, zero)))
        rng = make_rng(seed + 3)
        sigmas = [zero]
        for _ in range(max(0, sigma_samples - 1)):
            s = random_section(structure.lattice, ctx.cutoff, rng, decay=3.0)
            sigmas.append((delta0 / ctx.norm(s)) * s)
        lin0 = ctx.lin0
        base_images = [lin0.sigma_direction(p) for p in ctx.probes]
        for y in ys:
            for s in sigmas:
                lin = ctx.linearization(y, s)
                for p, img0 in zip(ctx.probes, base_images):
                    img = lin.sigma_direction(p)
                    diff = img - img0
                    pn = ctx.norm(p)
                    deviation = max(deviation, ctx.residual_norm(diff) / pn)
                    vp = img - dirac.apply(p)
                    max_contraction = max(max_contraction, ctx.norm(dirac.invert(vp)) / pn)
        if Cbar < math.inf:
            ratios = [ctx.norm(ctx.frozen_inverse(dirac.apply(p))[0]) / ctx.residual_norm(dirac.apply(p))
                      for p in ctx.probes[:16]]
            Cbar = max(Cbar, max(ratios))
    return IFTCertificate(
        Cbar=float(Cbar), deviation_bound=float(deviation), residual_at_zero=float(residual_at_zero),
        delta=float(delta), delta0=float(delta0), r=radius, C_S=float(dirac.C_S), sigma_min=dirac.sigma_min,
        dirac_contraction=float(q0), max_contraction=float(max_contraction), cutoff=ctx.cutoff,
        alpha=ctx.alpha, norm_grid=ctx.grid, probes=len(ctx.probes), seed=seed, samples_y=len(ys),
        samples_sigma=sigma_samples, perturbation_size=structure.perturbation_size())


# ---------------------------------------------------------------------------
# section solver


@dataclass
class ConvergenceLog:
    mode: str
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    step_history: list = field(default_factory=list)
    neumann_terms: list = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _context_for(structure, certificate: IFTCertificate, context: SolverContext | None) -> SolverContext:
    if context is not None:
        return context
    return SolverContext(structure, certificate.cutoff, certificate.alpha, certificate.probes,
                         certificate.seed, certificate.norm_grid)


def solve_section(structure: PerturbedCalabiYau, y, certificate: IFTCertificate, mode: str = "fixed_slope",
                  tol: float = 1e-10, max_iter: int = MAX_ITERATIONS, sigma0: TorusForm | None = None,
                  context: SolverContext | None = None, enforce_budget: bool = True):
    """Find the unique sigma(y) with F(y, sigma(y)) = 0 and ||sigma(y)|| <= delta.

    ``mode="fixed_slope"`` iterates sigma <- sigma - D_sigma F(0,0)^{-1} F(y, sigma);
    ``mode="newton"`` refreshes the derivative every step.
    """
    if mode not in ("fixed_slope", "newton"):
        raise ValueError(f"unknown mode {mode!r}")
    if not certificate.hypotheses_ok:
        raise CertificateError("certificate hypotheses do not hold; refusing to solve")
    y = np.asarray(y, dtype=float).reshape(structure.n)
    if float(np.linalg.norm(y)) >= certificate.r:
        raise CertificateError(f"|y| = {np.linalg.norm(y):.6g} lies outside the certified ball of radius "
                               f"{certificate.r:g}")
    ctx = _context_for(structure, certificate, context)
    start = time.perf_counter()
    sigma = ctx.zero() if sigma0 is None else sigma0.with_cutoff(ctx.cutoff).real_part().without_mean()
    log = ConvergenceLog(mode)
    res = ctx.residual(y, sigma)
    rn = ctx.residual_norm(res)
    log.residual_history.append(rn)
    while rn > tol:
        if log.iterations >= max_iter:
            log.seconds = time.perf_counter() - start
            raise DivergenceError(f"no convergence after {max_iter} iterations (residual {rn:.3e})",
                                  log.residual_history)
        if mode == "fixed_slope":
            step, nlog = ctx.frozen_inverse(res)
        else:
            lin = ctx.linearization(y, sigma)
            step, nlog = perturbed_invert(ctx.dirac, lin.perturbation, res,
                                          contraction=min(certificate.max_contraction, 0.49))
        sigma = (sigma - step).real_part().without_mean()
        log.iterations += 1
        log.neumann_terms.append(nlog.terms)
        log.step_history.append(step.l2_norm())
        res = ctx.residual(y, sigma)
        rn = ctx.residual_norm(res)
        log.residual_history.append(rn)
        if not np.isfinite(rn) or (log.iterations > 5 and rn > 10 * log.residual_history[0]):
            log.seconds = time.perf_counter() - start
            raise DivergenceError(f"iteration diverged (residual {rn:.3e})", log.residual_history)
    log.seconds = time.perf_counter() - start
    section = GraphSection(y, sigma)
    if enforce_budget:
        size = ctx.norm(sigma)
        if size > certificate.delta:
            raise BudgetViolationError(f"||sigma(y)|| = {size:.4g} exceeds delta = {certificate.delta:g}")
    return section, log


def solution_derivative(structure: PerturbedCalabiYau, y, sigma: TorusForm,
                        context: SolverContext | None = None, certificate: IFTCertificate | None = None) -> list:
    """Columns D sigma(y) e_i = -D_sigma F(y, sigma)^{-1} D_y F(y, sigma) e_i."""
    if context is None:
        if certificate is None:
            context = SolverContext(structure, sigma.cutoff)
        else:
            context = _context_for(structure, certificate, None)
    n = structure.n
    lin = context.linearization(y, sigma)
    contraction = None if certificate is None else min(certificate.max_contraction, 0.49)
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        rhs = lin.y_direction(e)
        if rhs.max_coeff() == 0.0:
            cols.append(zero_section(structure.lattice, sigma.cutoff))
            continue
        step, _ = perturbed_invert(context.dirac, lin.perturbation, rhs, contraction=contraction)
        cols.append(-1.0 * step)
    return cols


def derivative_norm(columns: list, alpha: float = DEFAULT_ALPHA, grid: int | None = None) -> float:
    """Upper bound sqrt(sum_i ||c_i||^2) for the operator norm R^n -> B_1."""
    return math.sqrt(sum(c1_norm(c, alpha, grid) ** 2 for c in columns))


def dirac_invert(dirac: DiracOperator, target: Residual, tol: float = PROJECTION_TOL) -> TorusForm:
    return dirac.invert(target, tol)
