"""Spectral calculus of differential forms on T^n and on T^n x B(0, 2r).

Torus coefficients live on a centred frequency box ``|k_j| <= K``; ambient
coefficients are additionally polynomials in the base coordinates y.  The
exterior derivative is exact on both representations.  Nonlinear operations
(wedge, graph pullback) go through a collocation grid that oversamples the
cutoff by the 3/2 rule.

Orientation: dx_1 ^ ... ^ dx_n on the torus and dx_1..dx_n, dy_1..dy_n on the
ambient space.  Ambient component indices 0..n-1 are dx, n..2n-1 are dy.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .lattice import Lattice


class FormError(ValueError):
    pass


class DomainEscapeError(FormError):
    """The graph of y + sigma leaves the ambient ball of radius 2r."""

    def __init__(self, message: str, x=None, y=None):
        super().__init__(message)
        self.x = x
        self.y = y


# ---------------------------------------------------------------------------
# index bookkeeping


@lru_cache(maxsize=None)
def form_basis(dim: int, degree: int) -> tuple:
    """Strictly increasing multi-indices of the given degree over range(dim)."""
    if degree < 0 or degree > dim:
        raise FormError(f"degree {degree} is not representable in dimension {dim}")
    return tuple(itertools.combinations(range(dim), degree))


@lru_cache(maxsize=None)
def _basis_index(dim: int, degree: int) -> dict:
    return {I: i for i, I in enumerate(form_basis(dim, degree))}


def merge_sign(a: tuple, b: tuple):
    """Return (sign, merged) with dx_a ^ dx_b = sign * dx_merged; sign 0 if they overlap."""
    if set(a) & set(b):
        return 0, None
    seq = a + b
    inversions = sum(1 for i in range(len(seq)) for j in range(i + 1, len(seq)) if seq[i] > seq[j])
    return (-1) ** inversions, tuple(sorted(seq))


def _complement(dim: int, idx: tuple) -> tuple:
    return tuple(i for i in range(dim) if i not in idx)


@lru_cache(maxsize=None)
def monomials(n: int, max_degree: int) -> tuple:
    """Exponent vectors of total degree <= max_degree, graded then lexicographic."""
    out = []
    for total in range(max_degree + 1):
        for m in itertools.product(range(total + 1), repeat=n):
            if sum(m) == total:
                out.append(m)
    return tuple(sorted(out, key=lambda m: (sum(m), tuple(-e for e in m))))


@lru_cache(maxsize=None)
def _monomial_index(n: int, max_degree: int) -> dict:
    return {m: i for i, m in enumerate(monomials(n, max_degree))}


@lru_cache(maxsize=None)
def _y_derivative_pairs(n: int, max_degree: int, j: int) -> tuple:
    """(source, target, factor) triples for d/dy_j on the monomial list."""
    index = _monomial_index(n, max_degree)
    triples = []
    for src, m in enumerate(monomials(n, max_degree)):
        if m[j] > 0:
            t = list(m)
            t[j] -= 1
            triples.append((src, index[tuple(t)], m[j]))
    return tuple(triples)


def collocation_size(cutoff: int) -> int:
    """Smallest power of two that satisfies the 3/2 dealiasing rule M >= 3K + 1."""
    need = 3 * cutoff + 1
    return max(4, 1 << (need - 1).bit_length())


# ---------------------------------------------------------------------------
# frequency box <-> grid


@lru_cache(maxsize=None)
def _box_frequencies(n: int, cutoff: int) -> np.ndarray:
    axes = np.meshgrid(*[np.arange(-cutoff, cutoff + 1)] * n, indexing="ij")
    k = np.stack(axes).astype(float)
    k.setflags(write=False)
    return k


def wave_vectors(lattice: Lattice, cutoff: int) -> np.ndarray:
    """Array (n, box...) of wave vectors xi = G k over the frequency box."""
    k = _box_frequencies(lattice.n, cutoff)
    return np.tensordot(lattice.dual_matrix, k, axes=(1, 0))


def _box_slices(n: int, cutoff: int, size: int):
    idx = np.arange(-cutoff, cutoff + 1) % size
    return (Ellipsis,) + np.ix_(*[idx] * n)


def box_to_grid(coeffs: np.ndarray, n: int, size: int) -> np.ndarray:
    """Evaluate coefficient arrays (..., box) on the uniform size^n grid."""
    cutoff = (coeffs.shape[-1] - 1) // 2
    if size < 2 * cutoff + 1:
        raise FormError(f"grid of {size} points cannot resolve cutoff {cutoff}")
    big = np.zeros(coeffs.shape[:-n] + (size,) * n, dtype=complex)
    big[_box_slices(n, cutoff, size)] = coeffs
    axes = tuple(range(-n, 0))
    return np.fft.ifftn(big, axes=axes) * float(size) ** n


def grid_to_box(values: np.ndarray, n: int, cutoff: int) -> np.ndarray:
    size = values.shape[-1]
    axes = tuple(range(-n, 0))
    spec = np.fft.fftn(values, axes=axes) / float(size) ** n
    return spec[_box_slices(n, cutoff, size)]


def grid_points(lattice: Lattice, size: int) -> np.ndarray:
    """Collocation points x = B u, returned with shape (n, size, ..., size)."""
    n = lattice.n
    u = np.stack(np.meshgrid(*[np.arange(size) / size] * n, indexing="ij"))
    return np.tensordot(lattice.basis, u, axes=(1, 0))


def _flip_box(arr: np.ndarray, n: int) -> np.ndarray:
    return arr[(Ellipsis,) + (slice(None, None, -1),) * n]


def _resize_box(coeffs: np.ndarray, n: int, cutoff: int) -> np.ndarray:
    old = (coeffs.shape[-1] - 1) // 2
    if old == cutoff:
        return coeffs
    if cutoff < old:
        s = slice(old - cutoff, old + cutoff + 1)
        return coeffs[(Ellipsis,) + (s,) * n]
    out = np.zeros(coeffs.shape[:-n] + (2 * cutoff + 1,) * n, dtype=complex)
    s = slice(cutoff - old, cutoff + old + 1)
    out[(Ellipsis,) + (s,) * n] = coeffs
    return out


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=complex)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# torus forms


@dataclass(frozen=True, eq=False)
class TorusForm:
    """A p-form on T^n = R^n / lattice with coefficients of shape (C(n, p), box...)."""

    lattice: Lattice
    degree: int
    coeffs: np.ndarray

    def __post_init__(self):
        n = self.lattice.n
        comps = form_basis(n, self.degree)
        c = np.asarray(self.coeffs)
        if c.ndim != n + 1 or c.shape[0] != len(comps):
            raise FormError(f"coefficient array of shape {c.shape} does not fit a {self.degree}-form on T^{n}")
        side = c.shape[1]
        if side % 2 != 1 or any(s != side for s in c.shape[1:]):
            raise FormError("frequency box must be centred and cubic")
        object.__setattr__(self, "coeffs", _frozen(c))

    @classmethod
    def zeros(cls, lattice: Lattice, degree: int, cutoff: int) -> "TorusForm":
        shape = (len(form_basis(lattice.n, degree)),) + (2 * cutoff + 1,) * lattice.n
        return cls(lattice, degree, np.zeros(shape, dtype=complex))

    @classmethod
    def constant(cls, lattice: Lattice, degree: int, values, cutoff: int) -> "TorusForm":
        """Parallel form with the given component values (one per multi-index)."""
        form = np.zeros((len(form_basis(lattice.n, degree)),) + (2 * cutoff + 1,) * lattice.n, dtype=complex)
        form[(slice(None),) + (cutoff,) * lattice.n] = np.asarray(values, dtype=complex)
        return cls(lattice, degree, form)

    @classmethod
    def from_grid(cls, lattice: Lattice, degree: int, values: np.ndarray, cutoff: int) -> "TorusForm":
        return cls(lattice, degree, grid_to_box(np.asarray(values, dtype=complex), lattice.n, cutoff))

    @classmethod
    def from_function(cls, lattice: Lattice, degree: int, func, cutoff: int, size: int | None = None) -> "TorusForm":
        """Interpolate func(x) -> (C(n, p), ...) values given x of shape (n, ...)."""
        size = size or collocation_size(cutoff)
        x = grid_points(lattice, size)
        vals = np.asarray(func(x), dtype=complex)
        vals = vals.reshape((len(form_basis(lattice.n, degree)),) + (size,) * lattice.n)
        return cls.from_grid(lattice, degree, vals, cutoff)

    @property
    def n(self) -> int:
        return self.lattice.n

    @property
    def cutoff(self) -> int:
        return (self.coeffs.shape[1] - 1) // 2

    @property
    def components(self) -> tuple:
        return form_basis(self.n, self.degree)

    def _like(self, coeffs) -> "TorusForm":
        return TorusForm(self.lattice, self.degree, coeffs)

    def _check_compatible(self, other: "TorusForm"):
        if not isinstance(other, TorusForm) or other.degree != self.degree:
            raise FormError("forms of different kind or degree cannot be added")
        if not self.lattice.same_as(other.lattice):
            raise FormError("forms live on different lattices")

    def __add__(self, other):
        self._check_compatible(other)
        k = max(self.cutoff, other.cutoff)
        return self._like(_resize_box(self.coeffs, self.n, k) + _resize_box(other.coeffs, self.n, k))

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return self._like(-self.coeffs)

    def __mul__(self, scalar):
        if isinstance(scalar, (TorusForm, AmbientForm)):
            return NotImplemented
        return self._like(complex(scalar) * self.coeffs)

    __rmul__ = __mul__

    def with_cutoff(self, cutoff: int) -> "TorusForm":
        return self._like(_resize_box(self.coeffs, self.n, cutoff))

    def real_part(self) -> "TorusForm":
        """Form whose coefficient functions are the real parts of this one's."""
        return self._like(0.5 * (self.coeffs + np.conj(_flip_box(self.coeffs, self.n))))

    def imag_part(self) -> "TorusForm":
        return self._like((self.coeffs - np.conj(_flip_box(self.coeffs, self.n))) / 2j)

    def is_real(self, tol: float = 1e-12) -> bool:
        return float(np.max(np.abs(self.coeffs - np.conj(_flip_box(self.coeffs, self.n))), initial=0.0)) <= tol

    def mean(self) -> np.ndarray:
        """Harmonic (frequency-zero) coefficients, one per component."""
        return self.coeffs[(slice(None),) + (self.cutoff,) * self.n].copy()

    def without_mean(self) -> "TorusForm":
        c = np.array(self.coeffs)
        c[(slice(None),) + (self.cutoff,) * self.n] = 0.0
        return self._like(c)

    def grid_values(self, size: int | None = None) -> np.ndarray:
        size = size or collocation_size(self.cutoff)
        return box_to_grid(self.coeffs, self.n, size)

    def gradient_grid(self, size: int | None = None) -> np.ndarray:
        """Values of d/dx_l of every component, shape (C(n, p), n, grid...)."""
        size = size or collocation_size(self.cutoff)
        xi = wave_vectors(self.lattice, self.cutoff)
        spec = 1j * self.coeffs[:, None] * xi[None]
        return box_to_grid(spec, self.n, size)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Direct Fourier sum at arbitrary points (npts, n); returns (C(n, p), npts)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        xi = wave_vectors(self.lattice, self.cutoff).reshape(self.n, -1)
        phase = np.exp(1j * pts @ xi)
        return self.coeffs.reshape(self.coeffs.shape[0], -1) @ phase.T

    def evaluate_gradient(self, points: np.ndarray) -> np.ndarray:
        """d/dx_l of every component at points; returns (C(n, p), n, npts)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        xi = wave_vectors(self.lattice, self.cutoff).reshape(self.n, -1)
        phase = np.exp(1j * pts @ xi)
        c = self.coeffs.reshape(self.coeffs.shape[0], -1)
        return np.einsum("ck,lk,pk->clp", c, 1j * xi, phase)

    def l2_inner(self, other: "TorusForm") -> complex:
        """L^2 pairing over the torus (Parseval with the flat metric)."""
        self._check_compatible(other)
        k = max(self.cutoff, other.cutoff)
        a = _resize_box(self.coeffs, self.n, k)
        b = _resize_box(other.coeffs, self.n, k)
        return complex(self.lattice.covolume * np.sum(a * np.conj(b)))

    def l2_norm(self) -> float:
        return math.sqrt(max(self.l2_inner(self).real, 0.0))

    def max_coeff(self) -> float:
        return float(np.max(np.abs(self.coeffs), initial=0.0))

    def __repr__(self) -> str:
        return f"TorusForm(n={self.n}, degree={self.degree}, cutoff={self.cutoff})"


# ---------------------------------------------------------------------------
# ambient forms


@dataclass(frozen=True, eq=False)
class AmbientForm:
    """A p-form on T^n x B(0, domain_radius): Fourier in x, polynomial in y.

    ``coeffs`` has shape (n_monomials, C(2n, p), box...); monomials are those of
    :func:`monomials` for ``poly_degree``.
    """

    lattice: Lattice
    degree: int
    poly_degree: int
    coeffs: np.ndarray
    domain_radius: float = math.inf

    def __post_init__(self):
        n = self.lattice.n
        comps = form_basis(2 * n, self.degree)
        mons = monomials(n, self.poly_degree)
        c = np.asarray(self.coeffs)
        if c.ndim != n + 2 or c.shape[0] != len(mons) or c.shape[1] != len(comps):
            raise FormError(f"coefficient array of shape {c.shape} does not fit an ambient {self.degree}-form")
        side = c.shape[2]
        if side % 2 != 1 or any(s != side for s in c.shape[2:]):
            raise FormError("frequency box must be centred and cubic")
        if not self.domain_radius > 0:
            raise FormError("domain radius must be positive")
        object.__setattr__(self, "coeffs", _frozen(c))
        object.__setattr__(self, "domain_radius", float(self.domain_radius))

    @classmethod
    def zeros(cls, lattice: Lattice, degree: int, cutoff: int = 0, poly_degree: int = 0,
              domain_radius: float = math.inf) -> "AmbientForm":
        n = lattice.n
        shape = (len(monomials(n, poly_degree)), len(form_basis(2 * n, degree))) + (2 * cutoff + 1,) * n
        return cls(lattice, degree, poly_degree, np.zeros(shape, dtype=complex), domain_radius)

    @classmethod
    def coframe(cls, lattice: Lattice, index: int, coefficient: complex = 1.0,
                domain_radius: float = math.inf) -> "AmbientForm":
        """The parallel 1-form coefficient * dz_index (dx for index < n, dy otherwise)."""
        form = cls.zeros(lattice, 1, 0, 0, domain_radius)
        c = np.array(form.coeffs)
        c[0, index] = coefficient
        return cls(lattice, 1, 0, c, domain_radius)

    @classmethod
    def function(cls, lattice: Lattice, coeffs: np.ndarray, poly_degree: int,
                 domain_radius: float = math.inf) -> "AmbientForm":
        """0-form from coefficients of shape (n_monomials, box...)."""
        c = np.asarray(coeffs, dtype=complex)
        return cls(lattice, 0, poly_degree, c[:, None], domain_radius)

    @property
    def n(self) -> int:
        return self.lattice.n

    @property
    def cutoff(self) -> int:
        return (self.coeffs.shape[2] - 1) // 2

    @property
    def components(self) -> tuple:
        return form_basis(2 * self.n, self.degree)

    @property
    def monomials(self) -> tuple:
        return monomials(self.n, self.poly_degree)

    def _like(self, coeffs, poly_degree=None) -> "AmbientForm":
        return AmbientForm(self.lattice, self.degree,
                           self.poly_degree if poly_degree is None else poly_degree,
                           coeffs, self.domain_radius)

    def with_shape(self, cutoff: int, poly_degree: int) -> "AmbientForm":
        """Zero-pad (or truncate) the frequency box and the monomial list."""
        c = _resize_box(self.coeffs, self.n, cutoff)
        if poly_degree != self.poly_degree:
            new_index = _monomial_index(self.n, poly_degree)
            out = np.zeros((len(new_index),) + c.shape[1:], dtype=complex)
            for i, m in enumerate(self.monomials):
                if m in new_index:
                    out[new_index[m]] = c[i]
                elif np.any(c[i]):
                    raise FormError("truncating the polynomial degree would drop nonzero terms")
            c = out
        return self._like(c, poly_degree)

    def _aligned(self, other: "AmbientForm"):
        if not isinstance(other, AmbientForm) or other.degree != self.degree:
            raise FormError("forms of different kind or degree cannot be added")
        if not self.lattice.same_as(other.lattice):
            raise FormError("forms live on different lattices")
        k = max(self.cutoff, other.cutoff)
        d = max(self.poly_degree, other.poly_degree)
        return self.with_shape(k, d), other.with_shape(k, d)

    def __add__(self, other):
        a, b = self._aligned(other)
        out = a._like(a.coeffs + b.coeffs)
        return AmbientForm(out.lattice, out.degree, out.poly_degree, out.coeffs,
                           min(self.domain_radius, other.domain_radius))

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return self._like(-self.coeffs)

    def __mul__(self, scalar):
        if isinstance(scalar, (TorusForm, AmbientForm)):
            return NotImplemented
        return self._like(complex(scalar) * self.coeffs)

    __rmul__ = __mul__

    def with_domain_radius(self, radius: float) -> "AmbientForm":
        return AmbientForm(self.lattice, self.degree, self.poly_degree, self.coeffs, radius)

    def real_part(self) -> "AmbientForm":
        return self._like(0.5 * (self.coeffs + np.conj(_flip_box(self.coeffs, self.n))))

    def imag_part(self) -> "AmbientForm":
        return self._like((self.coeffs - np.conj(_flip_box(self.coeffs, self.n))) / 2j)

    def conjugate(self) -> "AmbientForm":
        return self._like(np.conj(_flip_box(self.coeffs, self.n)))

    def is_real(self, tol: float = 1e-12) -> bool:
        return float(np.max(np.abs(self.coeffs - np.conj(_flip_box(self.coeffs, self.n))), initial=0.0)) <= tol

    def max_coeff(self) -> float:
        return float(np.max(np.abs(self.coeffs), initial=0.0))

    def grid_values(self, size: int | None = None) -> np.ndarray:
        """Fourier parts on the torus grid, shape (n_monomials, C(2n, p), grid...)."""
        size = size or collocation_size(self.cutoff)
        return box_to_grid(self.coeffs, self.n, size)

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Component values at points (x_i, y_i); x, y of shape (npts, n). Returns (C(2n, p), npts)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        xi = wave_vectors(self.lattice, self.cutoff).reshape(self.n, -1)
        phase = np.exp(1j * x @ xi)
        c = self.coeffs.reshape(self.coeffs.shape[0], self.coeffs.shape[1], -1)
        fourier = np.einsum("mck,pk->mcp", c, phase)
        mono = np.stack([np.prod(y ** np.array(m), axis=1) for m in self.monomials])
        return np.einsum("mcp,mp->cp", fourier, mono)

    def restrict_to_zero_section(self) -> TorusForm:
        """Pullback to T^n x {0}: keep pure dx components of the constant monomial."""
        comps = self.components
        n = self.n
        idx = [i for i, I in enumerate(comps) if all(j < n for j in I)]
        return TorusForm(self.lattice, self.degree, self.coeffs[0, idx])

    def __repr__(self) -> str:
        return (f"AmbientForm(n={self.n}, degree={self.degree}, cutoff={self.cutoff}, "
                f"poly_degree={self.poly_degree})")


# ---------------------------------------------------------------------------
# exterior calculus


def d(form):
    """Exterior derivative, exact on both representations."""
    if isinstance(form, TorusForm):
        return _d_torus(form)
    if isinstance(form, AmbientForm):
        return _d_ambient(form)
    raise TypeError(f"cannot differentiate {type(form).__name__}")


def _d_torus(form: TorusForm) -> TorusForm:
    n, p = form.n, form.degree
    if p >= n:
        raise FormError(f"d of a top-degree form on T^{n} is not representable")
    xi = wave_vectors(form.lattice, form.cutoff)
    src = _basis_index(n, p)
    out = np.zeros((len(form_basis(n, p + 1)),) + form.coeffs.shape[1:], dtype=complex)
    for j, J in enumerate(form_basis(n, p + 1)):
        for pos, l in enumerate(J):
            I = J[:pos] + J[pos + 1:]
            out[j] += (-1) ** pos * (1j * xi[l]) * form.coeffs[src[I]]
    return TorusForm(form.lattice, p + 1, out)


def _d_ambient(form: AmbientForm) -> AmbientForm:
    n, p = form.n, form.degree
    if p >= 2 * n:
        raise FormError("d of a top-degree ambient form is not representable")
    xi = wave_vectors(form.lattice, form.cutoff)
    src = _basis_index(2 * n, p)
    c = form.coeffs
    out = np.zeros((c.shape[0], len(form_basis(2 * n, p + 1))) + c.shape[2:], dtype=complex)
    for j, J in enumerate(form_basis(2 * n, p + 1)):
        for pos, l in enumerate(J):
            I = J[:pos] + J[pos + 1:]
            sign = (-1) ** pos
            if l < n:
                out[:, j] += sign * (1j * xi[l]) * c[:, src[I]]
            else:
                for s, t, factor in _y_derivative_pairs(n, form.poly_degree, l - n):
                    out[t, j] += sign * factor * c[s, src[I]]
    return AmbientForm(form.lattice, p + 1, form.poly_degree, out, form.domain_radius)


def hodge_star_torus(form: TorusForm) -> TorusForm:
    """Flat Hodge star; dx_1..dx_n is orthonormal and positively oriented."""
    n, p = form.n, form.degree
    target = _basis_index(n, n - p)
    out = np.zeros((len(target),) + form.coeffs.shape[1:], dtype=complex)
    for i, I in enumerate(form_basis(n, p)):
        Ic = _complement(n, I)
        sign, _ = merge_sign(I, Ic)
        out[target[Ic]] = sign * form.coeffs[i]
    return TorusForm(form.lattice, n - p, out)


def codifferential_torus(form: TorusForm) -> TorusForm:
    """Formal L^2 adjoint of d: (-1)^{n(p+1)+1} * d *.

    On 1-forms this is minus the divergence, so d^* d f is the nonnegative
    Laplacian of f.
    """
    n, p = form.n, form.degree
    if p < 1:
        raise FormError("the codifferential of a function is not defined")
    sign = (-1) ** (n * (p + 1) + 1)
    return sign * hodge_star_torus(d(hodge_star_torus(form)))


def wedge(a, b, size: int | None = None):
    """Graded-commutative product; coefficient products are dealiased on the grid."""
    if isinstance(a, TorusForm) and isinstance(b, TorusForm):
        return _wedge_torus(a, b, size)
    if isinstance(a, AmbientForm) and isinstance(b, AmbientForm):
        return _wedge_ambient(a, b, size)
    raise TypeError("wedge needs two torus forms or two ambient forms")


def _is_parallel(coeffs: np.ndarray, n: int) -> bool:
    cutoff = (coeffs.shape[-1] - 1) // 2
    mask = np.ones(coeffs.shape[-n:], dtype=bool)
    mask[(cutoff,) * n] = False
    return not np.any(coeffs[..., mask])


def _product_values(ca: np.ndarray, cb: np.ndarray, n: int, cutoff: int, size: int | None):
    """Return a callable giving the dealiased product of coefficient functions."""
    if _is_parallel(ca, n) or _is_parallel(cb, n):
        a = _resize_box(ca, n, cutoff)
        b = _resize_box(cb, n, cutoff)
        ka = (ca.shape[-1] - 1) // 2
        kb = (cb.shape[-1] - 1) // 2
        if _is_parallel(ca, n):
            const = ca[(Ellipsis,) + (ka,) * n]
            return lambda ia, ib: const[ia] * b[ib]
        const = cb[(Ellipsis,) + (kb,) * n]
        return lambda ia, ib: a[ia] * const[ib]
    size = size or collocation_size(cutoff)
    if size < 3 * cutoff + 1:
        raise FormError(f"grid {size} violates the 3/2 dealiasing rule for cutoff {cutoff}")
    va = box_to_grid(ca, n, size)
    vb = box_to_grid(cb, n, size)
    return lambda ia, ib: grid_to_box(va[ia] * vb[ib], n, cutoff)


def _wedge_torus(a: TorusForm, b: TorusForm, size) -> TorusForm:
    n = a.n
    if not a.lattice.same_as(b.lattice):
        raise FormError("forms live on different lattices")
    p, q = a.degree, b.degree
    if p + q > n:
        raise FormError(f"wedge of degrees {p} and {q} exceeds dimension {n}")
    cutoff = max(a.cutoff, b.cutoff)
    prod = _product_values(a.coeffs, b.coeffs, n, cutoff, size)
    target = _basis_index(n, p + q)
    out = np.zeros((len(target),) + (2 * cutoff + 1,) * n, dtype=complex)
    for i, I in enumerate(a.components):
        for j, J in enumerate(b.components):
            sign, L = merge_sign(I, J)
            if sign:
                out[target[L]] += sign * prod(i, j)
    return TorusForm(a.lattice, p + q, out)


def _wedge_ambient(a: AmbientForm, b: AmbientForm, size) -> AmbientForm:
    n = a.n
    if not a.lattice.same_as(b.lattice):
        raise FormError("forms live on different lattices")
    p, q = a.degree, b.degree
    if p + q > 2 * n:
        raise FormError(f"wedge of degrees {p} and {q} exceeds dimension {2 * n}")
    cutoff = max(a.cutoff, b.cutoff)
    poly = a.poly_degree + b.poly_degree
    prod = _product_values(a.coeffs, b.coeffs, n, cutoff, size)
    target = _basis_index(2 * n, p + q)
    mon_index = _monomial_index(n, poly)
    out = np.zeros((len(mon_index), len(target)) + (2 * cutoff + 1,) * n, dtype=complex)
    for ma_i, ma in enumerate(a.monomials):
        if not np.any(a.coeffs[ma_i]):
            continue
        for mb_i, mb in enumerate(b.monomials):
            if not np.any(b.coeffs[mb_i]):
                continue
            m = mon_index[tuple(x + y for x, y in zip(ma, mb))]
            for i, I in enumerate(a.components):
                for j, J in enumerate(b.components):
                    sign, L = merge_sign(I, J)
                    if sign:
                        out[m, target[L]] += sign * prod((ma_i, i), (mb_i, j))
    return AmbientForm(a.lattice, p + q, poly, out, min(a.domain_radius, b.domain_radius))


# ---------------------------------------------------------------------------
# graph pullback


class GraphPullback:
    """Pullback of an ambient form along Pi: x -> (x, y + sigma(x)).

    Grid fields at the base point (y, sigma) are cached so that repeated
    directional derivatives (the linearizations) are cheap.
    """

    def __init__(self, form: AmbientForm, y, sigma: TorusForm, size: int | None = None,
                 check_domain: bool = True):
        n = form.n
        if sigma.degree != 1 or sigma.n != n:
            raise FormError("the graph datum must be a 1-form on T^n")
        if not form.lattice.same_as(sigma.lattice):
            raise FormError("form and section live on different lattices")
        self.form = form
        self.n = n
        self.cutoff = max(form.cutoff, sigma.cutoff)
        self.size = size or collocation_size(self.cutoff)
        self.y = np.asarray(y, dtype=float).reshape(n)
        sig = sigma.with_cutoff(self.cutoff)
        s_vals = sig.grid_values(self.size).real
        self.dsigma = sig.gradient_grid(self.size).real  # [j, l] = d sigma_j / dx_l
        Y = self.y.reshape((n,) + (1,) * n) + s_vals
        if check_domain and np.isfinite(form.domain_radius):
            rad = np.sqrt(np.sum(Y**2, axis=0))
            worst = np.unravel_index(int(np.argmax(rad)), rad.shape)
            if rad[worst] >= form.domain_radius:
                x_bad = grid_points(form.lattice, self.size)[(slice(None),) + worst]
                raise DomainEscapeError(
                    f"graph leaves the domain ball of radius {form.domain_radius:g} at x = {x_bad.tolist()} "
                    f"(|y + sigma(x)| = {rad[worst]:.6g})", x=x_bad, y=Y[(slice(None),) + worst])
        self.Y = Y
        mons = form.monomials
        self._mons = mons
        ones = np.ones_like(Y[0])
        self._mono = np.stack([np.prod([Y[j] ** m[j] for j in range(n)], axis=0) if any(m) else ones
                               for m in mons])
        fvals = form.grid_values(self.size)  # (nm, nc, grid)
        self._fvals = fvals
        self._g = np.einsum("mc...,m...->c...", fvals, self._mono)
        rows = np.zeros((2 * n, n) + Y.shape[1:])
        for i in range(n):
            rows[i, i] = 1.0
        rows[n:] = self.dsigma
        self._rows = rows
        self._out_basis = form_basis(n, form.degree) if form.degree <= n else ()
        if form.degree > n:
            raise FormError(f"an ambient {form.degree}-form pulls back to zero on an {n}-dimensional graph")

    def _minor(self, rows: np.ndarray, I: tuple, J: tuple) -> np.ndarray:
        p = len(I)
        if p == 0:
            return np.ones(rows.shape[2:])
        sub = rows[list(I)][:, list(J)]
        mat = np.moveaxis(sub, (0, 1), (-2, -1))
        if p == 1:
            return mat[..., 0, 0]
        if p == 2:
            return mat[..., 0, 0] * mat[..., 1, 1] - mat[..., 0, 1] * mat[..., 1, 0]
        return np.linalg.det(mat)

    def grid_value(self) -> np.ndarray:
        """Pulled-back component values on the grid, shape (C(n, p), grid...)."""
        out = np.zeros((len(self._out_basis),) + self.Y.shape[1:], dtype=complex)
        for i, I in enumerate(self.form.components):
            gi = self._g[i]
            if not np.any(gi):
                continue
            for j, J in enumerate(self._out_basis):
                out[j] += gi * self._minor(self._rows, I, J)
        return out

    def value(self) -> TorusForm:
        return TorusForm(self.form.lattice, self.form.degree,
                         grid_to_box(self.grid_value(), self.n, self.cutoff))

    def tangent_grid(self, ydot=None, sigmadot: TorusForm | None = None) -> np.ndarray:
        n = self.n
        shape = self.Y.shape[1:]
        Ydot = np.zeros((n,) + shape)
        rows_dot = np.zeros_like(self._rows)
        if ydot is not None:
            Ydot += np.asarray(ydot, dtype=float).reshape((n,) + (1,) * n)
        if sigmadot is not None:
            sd = sigmadot.with_cutoff(self.cutoff)
            Ydot += sd.grid_values(self.size).real
            rows_dot[n:] = sd.gradient_grid(self.size).real
        # derivative of sum_m f_m Y^m along Ydot
        index = _monomial_index(n, self.form.poly_degree)
        dmono = np.zeros_like(self._mono)
        for mi, m in enumerate(self._mons):
            for l in range(n):
                if m[l] > 0:
                    t = list(m)
                    t[l] -= 1
                    dmono[mi] += m[l] * self._mono[index[tuple(t)]] * Ydot[l]
        gdot = np.einsum("mc...,m...->c...", self._fvals, dmono)
        has_rows_dot = sigmadot is not None
        out = np.zeros((len(self._out_basis),) + shape, dtype=complex)
        for i, I in enumerate(self.form.components):
            gi = self._g[i]
            gdi = gdot[i]
            active = np.any(gi)
            if not active and not np.any(gdi):
                continue
            moving = [a for a, r in enumerate(I) if r >= n]
            for j, J in enumerate(self._out_basis):
                if np.any(gdi):
                    out[j] += gdi * self._minor(self._rows, I, J)
                if active and has_rows_dot and moving:
                    ddet = np.zeros(shape)
                    for a in moving:
                        rows = self._rows.copy()
                        rows[I[a]] = rows_dot[I[a]]
                        ddet += self._minor(rows, I, J)
                    out[j] += gi * ddet
        return out

    def tangent(self, ydot=None, sigmadot: TorusForm | None = None) -> TorusForm:
        """Directional derivative of the pullback in (y, sigma) along (ydot, sigmadot)."""
        return TorusForm(self.form.lattice, self.form.degree,
                         grid_to_box(self.tangent_grid(ydot, sigmadot), self.n, self.cutoff))


def pullback_graph(form: AmbientForm, y, sigma: TorusForm, size: int | None = None) -> TorusForm:
    """Pi^* form for Pi(x) = (x, y + sigma(x)): y_j -> y_j + sigma_j, dy_j -> d sigma_j."""
    return GraphPullback(form, y, sigma, size).value()


# ---------------------------------------------------------------------------
# surrogate Hoelder norms


@dataclass(frozen=True)
class NormReport:
    """Grid surrogate of a C^{k,alpha} norm (k = order)."""

    sup_norm: float
    grad_sup_norm: float
    holder_seminorm_estimate: float
    alpha: float
    order: int = 1

    def __post_init__(self):
        for name in ("sup_norm", "grad_sup_norm", "holder_seminorm_estimate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def value(self) -> float:
        return self.sup_norm + self.grad_sup_norm + self.holder_seminorm_estimate


def default_norm_grid(cutoff: int) -> int:
    return max(64, 2 * collocation_size(cutoff))


def _holder_quotient(field: np.ndarray, lattice: Lattice, size: int, alpha: float, n: int) -> float:
    best = 0.0
    for axis in range(n):
        h = float(np.linalg.norm(lattice.basis[:, axis])) / size
        diff = np.roll(field, -1, axis=field.ndim - n + axis) - field
        mag = np.sqrt(np.sum(np.abs(diff) ** 2, axis=tuple(range(field.ndim - n))))
        best = max(best, float(np.max(mag)) / h**alpha)
    return best


def surrogate_norms(form: TorusForm, alpha: float = 0.5, order: int = 1, grid: int | None = None) -> NormReport:
    """Sup, gradient-sup and Hoelder quotient of a torus form on a dense grid.

    ``order=1`` measures the Hoelder quotient of the gradient (C^{1,alpha});
    ``order=0`` measures it on the values and reports no gradient term.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if order not in (0, 1):
        raise ValueError("order must be 0 or 1")
    n = form.n
    size = grid or default_norm_grid(form.cutoff)
    vals = form.grid_values(size)
    sup = float(np.max(np.sqrt(np.sum(np.abs(vals) ** 2, axis=0))))
    if order == 0:
        return NormReport(sup, 0.0, _holder_quotient(vals, form.lattice, size, alpha, n), alpha, 0)
    grad = form.gradient_grid(size)
    gsup = float(np.max(np.sqrt(np.sum(np.abs(grad) ** 2, axis=(0, 1)))))
    return NormReport(sup, gsup, _holder_quotient(grad, form.lattice, size, alpha, n), alpha, 1)


# ---------------------------------------------------------------------------
# serialization


def form_to_dict(form) -> dict:
    """JSON-compatible record; only nonzero coefficients are listed."""
    n = form.n
    if isinstance(form, TorusForm):
        rows = []
        K = form.cutoff
        for ci, I in enumerate(form.components):
            block = form.coeffs[ci]
            for pos in zip(*np.nonzero(block)):
                v = block[pos]
                rows.append([[int(p) - K for p in pos], [0] * n, list(I), float(v.real), float(v.imag)])
        return {"kind": "torus", "degree": form.degree, "n": n, "cutoff": K,
                "lattice": form.lattice.to_dict(), "coeffs": rows}
    if isinstance(form, AmbientForm):
        rows = []
        K = form.cutoff
        for mi, m in enumerate(form.monomials):
            for ci, I in enumerate(form.components):
                block = form.coeffs[mi, ci]
                for pos in zip(*np.nonzero(block)):
                    v = block[pos]
                    rows.append([[int(p) - K for p in pos], list(m), list(I), float(v.real), float(v.imag)])
        radius = form.domain_radius
        return {"kind": "ambient", "degree": form.degree, "n": n, "cutoff": K,
                "poly_degree": form.poly_degree,
                "domain_radius": None if math.isinf(radius) else radius,
                "lattice": form.lattice.to_dict(), "coeffs": rows}
    raise TypeError(f"cannot serialize {type(form).__name__}")


def form_from_dict(data: dict):
    lattice = Lattice.from_dict(data["lattice"])
    n = int(data["n"])
    K = int(data["cutoff"])
    degree = int(data["degree"])
    if lattice.n != n:
        raise FormError("lattice dimension does not match the record")
    if data["kind"] == "torus":
        index = _basis_index(n, degree)
        c = np.zeros((len(index),) + (2 * K + 1,) * n, dtype=complex)
        for k, _m, I, re, im in data["coeffs"]:
            c[(index[tuple(I)],) + tuple(int(v) + K for v in k)] = complex(re, im)
        return TorusForm(lattice, degree, c)
    if data["kind"] == "ambient":
        D = int(data["poly_degree"])
        index = _basis_index(2 * n, degree)
        mon = _monomial_index(n, D)
        c = np.zeros((len(mon), len(index)) + (2 * K + 1,) * n, dtype=complex)
        for k, m, I, re, im in data["coeffs"]:
            c[(mon[tuple(m)], index[tuple(I)]) + tuple(int(v) + K for v in k)] = complex(re, im)
        radius = data.get("domain_radius")
        return AmbientForm(lattice, degree, D, c, math.inf if radius is None else float(radius))
    raise FormError(f"unknown form kind {data['kind']!r}")
