"""Lattices in R^n and the flat tori they define."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


class LatticeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Lattice:
    """A full-rank lattice; the columns of ``basis`` generate it."""

    basis: np.ndarray

    def __post_init__(self):
        b = np.array(self.basis, dtype=float)
        if b.ndim != 2 or b.shape[0] != b.shape[1] or b.shape[0] == 0:
            raise LatticeError(f"lattice basis must be a square matrix, got shape {b.shape}")
        if not np.all(np.isfinite(b)):
            raise LatticeError("lattice basis has non-finite entries")
        det = np.linalg.det(b)
        scale = np.prod(np.linalg.norm(b, axis=0))
        if scale == 0 or abs(det) <= 1e-12 * scale:
            raise LatticeError("degenerate lattice basis (zero covolume)")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @classmethod
    def cubic(cls, n: int, s: float = 1.0) -> "Lattice":
        return cls(s * np.eye(n))

    @classmethod
    def hexagonal(cls, s: float = 1.0) -> "Lattice":
        return cls(s * np.array([[1.0, 0.5], [0.0, math.sqrt(3.0) / 2.0]]))

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    @property
    def covolume(self) -> float:
        return float(abs(np.linalg.det(self.basis)))

    @property
    def dual_matrix(self) -> np.ndarray:
        """Matrix G with wave vector xi = G @ k for integer k; G = 2*pi*B^{-T}."""
        # dividing first keeps G exactly integral for the 2*pi*Z^n lattice
        return np.linalg.inv(self.basis.T / (2.0 * np.pi))

    def scaled(self, s: float) -> "Lattice":
        return Lattice(s * self.basis)

    def shortest_vector_length(self) -> float:
        """Length of the shortest nonzero lattice vector, by exhaustive enumeration.

        Every vector B c with |B c| <= L satisfies |c|_inf <= ||B^{-1}||_2 L, so
        enumerating that box with L the shortest column length is exact.
        """
        b = self.basis
        bound = float(np.min(np.linalg.norm(b, axis=0)))
        radius = int(math.ceil(np.linalg.norm(np.linalg.inv(b), 2) * bound + 1e-9))
        best = bound
        rng = range(-radius, radius + 1)
        for c in itertools.product(rng, repeat=self.n):
            if not any(c):
                continue
            length = float(np.linalg.norm(b @ np.array(c, dtype=float)))
            if length < best:
                best = length
        return best

    def injectivity_radius(self) -> float:
        """Injectivity radius of the flat torus R^n / lattice (and of T^n x R^n)."""
        return 0.5 * self.shortest_vector_length()

    def reduce_point(self, x: np.ndarray) -> np.ndarray:
        """Representative of x (shape (..., n)) nearest to the origin among lattice shifts."""
        x = np.asarray(x, dtype=float)
        u = np.linalg.solve(self.basis, x.reshape(-1, self.n).T).T
        u = u - np.round(u)
        base = u @ self.basis.T
        best = base.copy()
        best_norm = np.sum(best**2, axis=1)
        for c in itertools.product((-1, 0, 1), repeat=self.n):
            if not any(c):
                continue
            cand = base + self.basis @ np.array(c, dtype=float)
            cn = np.sum(cand**2, axis=1)
            better = cn < best_norm
            best[better] = cand[better]
            best_norm[better] = cn[better]
        return best.reshape(x.shape)

    def torus_distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = self.reduce_point(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
        return np.linalg.norm(d, axis=-1)

    def is_compatible(self, matrix: np.ndarray, tol: float = 1e-9) -> bool:
        """True when the linear map preserves the lattice (conjugate is unimodular)."""
        m = np.linalg.solve(self.basis, np.asarray(matrix, dtype=float) @ self.basis)
        if not np.allclose(m, np.round(m), atol=tol):
            return False
        return abs(abs(np.linalg.det(np.round(m))) - 1.0) < 0.5

    def to_dict(self) -> dict:
        return {"basis": self.basis.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Lattice":
        return cls(np.array(data["basis"], dtype=float))

    def same_as(self, other: "Lattice") -> bool:
        return self.basis.shape == other.basis.shape and np.array_equal(self.basis, other.basis)

    def __repr__(self) -> str:
        return f"Lattice(basis={self.basis.tolist()})"
