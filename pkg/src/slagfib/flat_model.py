"""Flat Calabi-Yau models T^n x B(0, 2r), their exact perturbations and symmetries."""
from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .forms import (AmbientForm, FormError, TorusForm, _basis_index, _monomial_index,
                    collocation_size, d, form_basis, form_from_dict, form_to_dict,
                    grid_points, monomials, wave_vectors, wedge, _box_frequencies)
from .lattice import Lattice

PRNG_NAME = "numpy.random.PCG64/SeedSequence v1"

# Re(Omega ^ conj Omega) and omega^n / n! must stay above this fraction of their flat values.
DEGENERACY_FLOOR = 0.1


class StructureError(ValueError):
    pass


class DegenerateStructureError(StructureError):
    pass


class VanishingPeriodError(StructureError):
    pass


class GroupActionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# flat structure


@dataclass(frozen=True, eq=False)
class FlatCalabiYau:
    n: int
    lattice: Lattice
    r: float
    omega: AmbientForm
    Omega: AmbientForm

    @property
    def metric(self) -> np.ndarray:
        """g = sum dx_j^2 + dy_j^2 in the (dx, dy) coframe."""
        return np.eye(2 * self.n)

    @property
    def domain_radius(self) -> float:
        return 2.0 * self.r


def build_flat_structure(n: int, lattice: Lattice, r: float) -> FlatCalabiYau:
    """omega = sum dx_j ^ dy_j and Omega = (dx_1 + i dy_1) ^ ... ^ (dx_n + i dy_n)."""
    if lattice.n != n:
        raise StructureError(f"lattice has dimension {lattice.n}, expected {n}")
    if not r > 0:
        raise StructureError("domain radius r must be positive")
    R = 2.0 * r
    omega = AmbientForm.zeros(lattice, 2, 0, 0, R)
    for j in range(n):
        omega = omega + wedge(AmbientForm.coframe(lattice, j, 1.0, R), AmbientForm.coframe(lattice, n + j, 1.0, R))
    Omega = AmbientForm.coframe(lattice, 0, 1.0, R) + AmbientForm.coframe(lattice, n, 1j, R)
    for j in range(1, n):
        Omega = wedge(Omega, AmbientForm.coframe(lattice, j, 1.0, R) + AmbientForm.coframe(lattice, n + j, 1j, R))
    return FlatCalabiYau(n, lattice, float(r), omega, Omega)


def zero_section_period(form: AmbientForm) -> complex:
    """Integral of an ambient n-form over the fiber T^n x {0}, exact on the representation."""
    if form.degree != form.n:
        raise FormError("only n-forms have periods over the fiber torus")
    restricted = form.restrict_to_zero_section()
    return complex(restricted.mean()[0] * form.lattice.covolume)


def phase_normalize(Omega_pert: AmbientForm, lattice: Lattice | None = None) -> tuple:
    """Return (a, theta) with integral_L Omega_pert = a e^{-i theta} integral_L Re Omega_0.

    L is the zero section; integral_L Re Omega_0 equals the lattice covolume.
    """
    lattice = lattice or Omega_pert.lattice
    period = zero_section_period(Omega_pert)
    flat = lattice.covolume
    if abs(period) <= 1e-14 * flat:
        raise VanishingPeriodError("the fiber period of Omega vanishes; the fiber class is not calibrated")
    ratio = period / flat
    a = abs(ratio)
    theta = -cmath.phase(ratio)
    if theta <= -math.pi:
        theta += 2 * math.pi
    return float(a), float(theta)


# ---------------------------------------------------------------------------
# random potentials


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def sample_potential(lattice: Lattice, degree: int, cutoff: int, poly_degree: int, r: float,
                     rng: np.random.Generator, decay: float = 4.0, real: bool = True) -> AmbientForm:
    """Band-limited random ambient form, amplitude ~ (1 + |k|)^-decay (2r)^-|m|, sum |c| = 1."""
    n = lattice.n
    R = 2.0 * r
    mons = monomials(n, poly_degree)
    comps = form_basis(2 * n, degree)
    k = _box_frequencies(n, cutoff)
    kmag = np.sqrt(np.sum(k**2, axis=0))
    profile = (1.0 + kmag) ** (-decay)
    shape = (len(mons), len(comps)) + (2 * cutoff + 1,) * n
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    c *= profile
    for i, m in enumerate(mons):
        c[i] *= R ** (-sum(m))
    form = AmbientForm(lattice, degree, poly_degree, c, R)
    if real:
        form = form.real_part()
    total = float(np.sum(np.abs(form.coeffs)))
    return (1.0 / total) * form if total > 0 else form


def sample_potentials(lattice: Lattice, r: float, seed: int, cutoff: int = 3, poly_degree: int = 3,
                      decay: float = 4.0, action: "GroupAction | None" = None):
    """Seeded (alpha, beta): a real 1-form and a complex (n-1)-form, optionally group-averaged."""
    rng = make_rng(seed)
    n = lattice.n
    alpha = sample_potential(lattice, 1, cutoff, poly_degree, r, rng, decay, real=True)
    beta = sample_potential(lattice, n - 1, cutoff, poly_degree, r, rng, decay, real=False)
    if action is not None:
        alpha = action.average(alpha)
        beta = action.average(beta)
    return alpha, beta


# ---------------------------------------------------------------------------
# perturbed structure


@dataclass(frozen=True, eq=False)
class PerturbedCalabiYau:
    """omega_k = omega_0 - d(eps alpha), Omega_k = a e^{-i theta} (Omega_0 + d(eps beta))."""

    base: FlatCalabiYau
    alpha: AmbientForm
    beta: AmbientForm
    epsilon: float
    omega: AmbientForm
    Omega: AmbientForm
    a: float
    theta: float
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def lattice(self) -> Lattice:
        return self.base.lattice

    @property
    def r(self) -> float:
        return self.base.r

    @property
    def is_flat(self) -> bool:
        return self.epsilon == 0.0 or (self.d_alpha.max_coeff() == 0.0 and self.d_beta.max_coeff() == 0.0)

    @cached_property
    def d_alpha(self) -> AmbientForm:
        return d(self.epsilon * self.alpha)

    @cached_property
    def d_beta(self) -> AmbientForm:
        return d(self.epsilon * self.beta)

    @cached_property
    def d_im_beta(self) -> AmbientForm:
        return d((self.epsilon * self.beta).imag_part())

    @cached_property
    def im_phase_Omega(self) -> AmbientForm:
        """a^{-1} Im(e^{i theta} Omega_k), the form whose pullback gives the second residual."""
        rotated = (cmath.exp(1j * self.theta) / self.a) * self.Omega
        return rotated.imag_part()

    def calibration(self, theta: float | None = None) -> AmbientForm:
        return calibration_form(self, self.theta if theta is None else theta)

    def perturbation_size(self) -> float:
        """Coefficient l1 size of (d alpha, d beta) after scaling by epsilon."""
        return float(np.sum(np.abs(self.d_alpha.coeffs)) + np.sum(np.abs(self.d_beta.coeffs)))


def flat_perturbed(base: FlatCalabiYau) -> PerturbedCalabiYau:
    zero1 = AmbientForm.zeros(base.lattice, 1, 0, 0, base.domain_radius)
    zeron = AmbientForm.zeros(base.lattice, base.n - 1, 0, 0, base.domain_radius)
    return PerturbedCalabiYau(base, zero1, zeron, 0.0, base.omega, base.Omega, 1.0, 0.0, {})


def _degeneracy_samples(base: FlatCalabiYau, count: int = 16, seed: int = 0) -> np.ndarray:
    n = base.n
    R = base.domain_radius
    pts = [np.zeros(n)]
    for j in range(n):
        e = np.zeros(n)
        e[j] = 0.95 * R
        pts.extend([e, -e])
    rng = make_rng(seed)
    for _ in range(count):
        v = rng.standard_normal(n)
        v *= 0.95 * R * rng.uniform() ** (1.0 / n) / np.linalg.norm(v)
        pts.append(v)
    return np.array(pts)


def _top_ratio(form: AmbientForm, flat: AmbientForm, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Pointwise ratio of top-degree coefficients form / flat over all (x, y) pairs."""
    npts_x = xs.shape[0]
    X = np.repeat(xs, ys.shape[0], axis=0)
    Yp = np.tile(ys, (npts_x, 1))
    num = form.evaluate(X, Yp)[0]
    den = flat.evaluate(X[:1], Yp[:1])[0, 0]
    return num / den


def check_nondegenerate(base: FlatCalabiYau, omega: AmbientForm, Omega: AmbientForm, grid: int = 8) -> dict:
    """Sample Re(Omega ^ conj Omega) and omega^n against their flat values on T^n x B(0, 2r)."""
    n = base.n
    xs = grid_points(base.lattice, grid).reshape(n, -1).T
    ys = _degeneracy_samples(base)
    vol_flat = wedge(base.Omega, base.Omega.conjugate())
    vol = wedge(Omega, Omega.conjugate())
    om_flat = base.omega
    om = omega
    for _ in range(n - 1):
        om_flat = wedge(om_flat, base.omega)
        om = wedge(om, omega)
    holo = _top_ratio(vol, vol_flat, xs, ys)
    kahler = _top_ratio(om, om_flat, xs, ys)
    report = {"min_volume_ratio": float(np.min(holo.real)), "min_symplectic_ratio": float(np.min(kahler.real))}
    if report["min_volume_ratio"] < DEGENERACY_FLOOR:
        raise DegenerateStructureError(
            f"Omega ^ conj(Omega) drops to {report['min_volume_ratio']:.3g} of its flat value; perturbation too large")
    if report["min_symplectic_ratio"] < DEGENERACY_FLOOR:
        raise DegenerateStructureError(
            f"omega^n drops to {report['min_symplectic_ratio']:.3g} of its flat value; perturbation too large")
    return report


def perturb_structure(base: FlatCalabiYau, alpha: AmbientForm, beta: AmbientForm, epsilon: float,
                      scale: float = 1.0, phase: float = 0.0, metadata: dict | None = None,
                      check: bool = True) -> PerturbedCalabiYau:
    """Exact perturbation; (a, theta) are recovered from the perturbed Omega by phase_normalize.

    ``scale`` and ``phase`` multiply the perturbed holomorphic form by
    scale * e^{-i phase}, the only change of its fiber period an exact
    perturbation cannot produce.
    """
    n = base.n
    if alpha.degree != 1 or beta.degree != n - 1:
        raise StructureError("alpha must be a 1-form and beta an (n-1)-form")
    if not alpha.is_real(1e-12):
        raise StructureError("alpha must be a real form")
    if not scale > 0:
        raise StructureError("scale must be positive")
    R = base.domain_radius
    alpha = alpha.with_domain_radius(R)
    beta = beta.with_domain_radius(R)
    eps = float(epsilon)
    omega_k = base.omega - d(eps * alpha)
    Omega_pert = (scale * cmath.exp(-1j * phase)) * (base.Omega + d(eps * beta))
    a, theta = phase_normalize(Omega_pert, base.lattice)
    meta = dict(metadata or {})
    if check and eps != 0.0:
        meta.update(check_nondegenerate(base, omega_k, Omega_pert))
    return PerturbedCalabiYau(base, alpha, beta, eps, omega_k, Omega_pert, a, theta, meta)


def calibration_form(structure, theta: float = 0.0) -> AmbientForm:
    """Re(e^{i theta} Omega) for a flat or perturbed structure."""
    Omega = structure.Omega
    return (cmath.exp(1j * theta) * Omega).real_part()


def kahler_calibration(structure, m: int) -> AmbientForm:
    """omega^m / m!, calibrating complex m-dimensional submanifolds."""
    out = structure.omega
    for _ in range(m - 1):
        out = wedge(out, structure.omega)
    return (1.0 / math.factorial(m)) * out


# ---------------------------------------------------------------------------
# group actions


@dataclass(frozen=True, eq=False)
class GroupElement:
    """(x, y) -> (A x + t, B y) on T^n x R^n."""

    torus_matrix: np.ndarray
    translation: np.ndarray
    base_matrix: np.ndarray
    name: str = ""

    def __post_init__(self):
        A = np.array(self.torus_matrix, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(-1)
        B = np.array(self.base_matrix, dtype=float)
        for arr in (A, t, B):
            arr.setflags(write=False)
        object.__setattr__(self, "torus_matrix", A)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "base_matrix", B)

    @property
    def n(self) -> int:
        return self.torus_matrix.shape[0]

    def compose(self, other: "GroupElement") -> "GroupElement":
        """self after other."""
        return GroupElement(self.torus_matrix @ other.torus_matrix,
                            self.torus_matrix @ other.translation + self.translation,
                            self.base_matrix @ other.base_matrix)

    def inverse(self) -> "GroupElement":
        Ai = np.linalg.inv(self.torus_matrix)
        return GroupElement(Ai, -Ai @ self.translation, np.linalg.inv(self.base_matrix), self.name + "^-1")

    def equals(self, other: "GroupElement", lattice: Lattice, tol: float = 1e-9) -> bool:
        if not np.allclose(self.torus_matrix, other.torus_matrix, atol=tol):
            return False
        if not np.allclose(self.base_matrix, other.base_matrix, atol=tol):
            return False
        return float(lattice.torus_distance(self.translation, other.translation)) < tol

    def act_on_point(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return x @ self.torus_matrix.T + self.translation, y @ self.base_matrix.T

    def to_dict(self) -> dict:
        return {"name": self.name, "torus_matrix": self.torus_matrix.tolist(),
                "translation": self.translation.tolist(), "base_matrix": self.base_matrix.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GroupElement":
        return cls(data["torus_matrix"], data["translation"], data["base_matrix"], data.get("name", ""))


def _coframe_matrix(element: GroupElement) -> np.ndarray:
    n = element.n
    L = np.zeros((2 * n, 2 * n))
    L[:n, :n] = element.torus_matrix
    L[n:, n:] = element.base_matrix
    return L


def _exterior_power(L: np.ndarray, degree: int) -> np.ndarray:
    """Matrix of pullback on degree-forms: dz_I -> sum_J det(L[I, J]) dz_J."""
    basis = form_basis(L.shape[0], degree)
    out = np.zeros((len(basis), len(basis)))
    for i, I in enumerate(basis):
        for j, J in enumerate(basis):
            out[i, j] = 1.0 if degree == 0 else np.linalg.det(L[np.ix_(I, J)])
    return out


def _frequency_map(lattice: Lattice, A: np.ndarray) -> np.ndarray:
    m = np.linalg.solve(lattice.basis, A @ lattice.basis).T
    mi = np.round(m)
    if not np.allclose(m, mi, atol=1e-9):
        raise GroupActionError("torus map does not preserve the lattice")
    return mi.astype(int)


def _substitution_matrix(B: np.ndarray, n: int, poly_degree: int) -> np.ndarray:
    """P with (B y)^m = sum_m' P[m', m] y^m'."""
    mons = monomials(n, poly_degree)
    index = _monomial_index(n, poly_degree)
    P = np.zeros((len(mons), len(mons)))

    def mul(p, q):
        out = {}
        for a, ca in p.items():
            for b, cb in q.items():
                key = tuple(x + y for x, y in zip(a, b))
                out[key] = out.get(key, 0.0) + ca * cb
        return out

    linear = []
    for j in range(n):
        lin = {}
        for l in range(n):
            if B[j, l] != 0.0:
                e = [0] * n
                e[l] = 1
                lin[tuple(e)] = float(B[j, l])
        linear.append(lin)
    for col, m in enumerate(mons):
        poly = {(0,) * n: 1.0}
        for j in range(n):
            for _ in range(m[j]):
                poly = mul(poly, linear[j])
        for key, val in poly.items():
            P[index[key], col] += val
    return P


def _remap_box(coeffs: np.ndarray, n: int, kmap: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """new[..., M k] = old[..., k] * phase[k]; the box must be invariant."""
    K = (coeffs.shape[-1] - 1) // 2
    out = np.zeros_like(coeffs)
    kbox = _box_frequencies(n, K).reshape(n, -1).astype(int)
    knew = kmap @ kbox
    if np.any(np.abs(knew) > K):
        lost = np.abs(knew).max(axis=0) > K
        flat = coeffs.reshape(coeffs.shape[:-n] + (-1,))
        if np.any(flat[..., lost]):
            raise GroupActionError("frequency box is not invariant under the torus map")
        keep = ~lost
    else:
        keep = np.ones(kbox.shape[1], dtype=bool)
    flat = (coeffs.reshape(coeffs.shape[:-n] + (-1,)) * phase.reshape(-1))
    src = tuple(kbox[:, keep] + K)
    dst = tuple(knew[:, keep] + K)
    out[(Ellipsis,) + dst] = flat.reshape(coeffs.shape)[(Ellipsis,) + src]
    return out


def pullback_by(element: GroupElement, form):
    """gamma^* of a torus or ambient form."""
    lattice = form.lattice
    n = lattice.n
    A = element.torus_matrix
    kmap = _frequency_map(lattice, A)
    xi = wave_vectors(lattice, form.cutoff)
    phase = np.exp(1j * np.tensordot(element.translation, xi, axes=(0, 0)))
    if isinstance(form, TorusForm):
        E = _exterior_power(A, form.degree)
        c = _remap_box(form.coeffs, n, kmap, phase)
        c = np.tensordot(E.T, c, axes=(1, 0))
        return TorusForm(lattice, form.degree, c)
    if isinstance(form, AmbientForm):
        E = _exterior_power(_coframe_matrix(element), form.degree)
        P = _substitution_matrix(element.base_matrix, n, form.poly_degree)
        c = _remap_box(form.coeffs, n, kmap, phase)
        c = np.einsum("ab,bc...->ac...", P, np.einsum("ji,mj...->mi...", E, c))
        return AmbientForm(lattice, form.degree, form.poly_degree, c, form.domain_radius)
    raise TypeError(f"cannot pull back {type(form).__name__}")


@dataclass(frozen=True, eq=False)
class GroupAction:
    """A finite group acting on T^n x B(0, 2r) by product maps."""

    lattice: Lattice
    elements: tuple

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if not self.elements:
            raise GroupActionError("a group needs at least the identity")
        for g in self.elements:
            if g.n != self.lattice.n:
                raise GroupActionError("element dimension does not match the lattice")
            if not self.lattice.is_compatible(g.torus_matrix):
                raise GroupActionError(f"element {g.name or '?'} is not compatible with the lattice")
        object.__setattr__(self, "table", self._build_table())

    @classmethod
    def trivial(cls, lattice: Lattice) -> "GroupAction":
        n = lattice.n
        return cls(lattice, (GroupElement(np.eye(n), np.zeros(n), np.eye(n), "e"),))

    @classmethod
    def flip(cls, lattice: Lattice) -> "GroupAction":
        """Z/2 acting by (x, y) -> (-x, -y)."""
        n = lattice.n
        return cls(lattice, (GroupElement(np.eye(n), np.zeros(n), np.eye(n), "e"),
                             GroupElement(-np.eye(n), np.zeros(n), -np.eye(n), "flip")))

    def _find(self, g: GroupElement) -> int:
        for i, h in enumerate(self.elements):
            if g.equals(h, self.lattice):
                return i
        return -1

    def _build_table(self) -> np.ndarray:
        size = len(self.elements)
        table = np.zeros((size, size), dtype=int)
        for i, a in enumerate(self.elements):
            for j, b in enumerate(self.elements):
                k = self._find(a.compose(b))
                if k < 0:
                    raise GroupActionError("element list is not closed under composition")
                table[i, j] = k
        ident = [i for i in range(size) if all(table[i, j] == j and table[j, i] == j for j in range(size))]
        if not ident:
            raise GroupActionError("element list has no identity")
        e = ident[0]
        for i in range(size):
            if not any(table[i, j] == e for j in range(size)):
                raise GroupActionError("element list is not closed under inverses")
        return table

    def __len__(self) -> int:
        return len(self.elements)

    def average(self, form):
        total = pullback_by(self.elements[0], form)
        for g in self.elements[1:]:
            total = total + pullback_by(g, form)
        return (1.0 / len(self.elements)) * total

    def invariance_defect(self, form) -> float:
        return max(float(np.max(np.abs((pullback_by(g, form) - form).coeffs), initial=0.0))
                   for g in self.elements)

    def preserves_flat_structure(self, base: FlatCalabiYau, tol: float = 1e-12) -> bool:
        for g in self.elements:
            L = _coframe_matrix(g)
            if not np.allclose(L.T @ base.metric @ L, base.metric, atol=tol):
                return False
        return max(self.invariance_defect(base.omega), self.invariance_defect(base.Omega)) <= tol

    def to_dict(self) -> dict:
        return {"elements": [g.to_dict() for g in self.elements]}

    @classmethod
    def from_dict(cls, lattice: Lattice, data: dict) -> "GroupAction":
        return cls(lattice, tuple(GroupElement.from_dict(e) for e in data["elements"]))


def apply_group_action(action: GroupAction, element: int | GroupElement, obj):
    """Apply gamma to a form (pullback gamma^*), a point (x, y), or a graph section.

    Sections map by gamma . L(y, sigma) = L(gamma . y, (gamma^-1)^* sigma).
    """
    if isinstance(element, int):
        g = action.elements[element]
    else:
        if action._find(element) < 0:
            raise GroupActionError("element is not part of the action")
        g = element
    if isinstance(obj, (TorusForm, AmbientForm)):
        return pullback_by(g, obj)
    if hasattr(obj, "sigma") and hasattr(obj, "y"):
        y_new = g.base_matrix @ np.asarray(obj.y, dtype=float)
        sigma_new = pullback_by(g.inverse(), obj.sigma)
        return type(obj)(y_new, sigma_new)
    if isinstance(obj, tuple) and len(obj) == 2:
        return g.act_on_point(*obj)
    raise TypeError(f"cannot apply a group element to {type(obj).__name__}")


# ---------------------------------------------------------------------------
# persistence


def structure_to_dict(structure: PerturbedCalabiYau) -> dict:
    meta = dict(structure.metadata)
    return {
        "schema": "slagfib.structure/1",
        "n": structure.n,
        "lattice": structure.lattice.to_dict(),
        "r": structure.r,
        "epsilon": structure.epsilon,
        "a": structure.a,
        "theta": structure.theta,
        "alpha": form_to_dict(structure.alpha),
        "beta": form_to_dict(structure.beta),
        "metadata": meta,
    }


def structure_from_dict(data: dict) -> PerturbedCalabiYau:
    if data.get("schema") != "slagfib.structure/1":
        raise StructureError(f"unknown structure schema {data.get('schema')!r}")
    lattice = Lattice.from_dict(data["lattice"])
    base = build_flat_structure(int(data["n"]), lattice, float(data["r"]))
    alpha = form_from_dict(data["alpha"])
    beta = form_from_dict(data["beta"])
    meta = dict(data.get("metadata", {}))
    scale = float(meta.get("scale", 1.0))
    phase = float(meta.get("phase", 0.0))
    s = perturb_structure(base, alpha, beta, float(data["epsilon"]), scale, phase, meta, check=False)
    if abs(s.a - float(data["a"])) > 1e-12 or abs(s.theta - float(data["theta"])) > 1e-12:
        raise StructureError("recorded (a, theta) do not match the potentials")
    return s


def generate_structure(n: int, lattice: Lattice, r: float, epsilon: float, seed: int,
                       potential_cutoff: int = 3, poly_degree: int = 3, decay: float = 4.0,
                       action: GroupAction | None = None, scale: float = 1.0,
                       phase: float = 0.0) -> PerturbedCalabiYau:
    """Reproducible perturbed structure from (seed, parameters) alone."""
    base = build_flat_structure(n, lattice, r)
    if action is not None and not action.preserves_flat_structure(base):
        raise GroupActionError("the action does not preserve the flat structure")
    alpha, beta = sample_potentials(lattice, r, seed, potential_cutoff, poly_degree, decay, action)
    meta = {"seed": int(seed), "prng": PRNG_NAME, "potential_cutoff": potential_cutoff,
            "poly_degree": poly_degree, "decay": decay, "scale": scale, "phase": phase,
            "group": action.to_dict() if action is not None else None}
    return perturb_structure(base, alpha, beta, epsilon, scale, phase, meta)
