"""Cubic B-spline, affine and Fourier bases.

All bases expose ``evaluate(s)`` and ``derivative(s)`` returning an
``(len(s), dim)`` matrix.  Arguments outside ``[lo, hi]`` are clamped to the
boundary before evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import bspline_matrix
from .errors import ConfigError

DEGREE = 3


def default_dim(n: int) -> int:
    """Basis dimension ``4 + (2n)^(1/5)`` rounded to the nearest integer."""
    return int(np.floor(4.0 + (2.0 * n) ** 0.2 + 0.5))


def _basis_functions(x, t, k):
    """Dense matrix of all degree-``k`` B-splines on knot vector ``t`` at ``x``.

    Triangular (de Boor) scheme: for each x only the ``k + 1`` functions
    supported on its knot span are computed.  The span is the last
    non-degenerate one containing x, so ``x == t[-1]`` evaluates from the left.
    """
    x = np.ascontiguousarray(x, dtype=float).ravel()
    nbasis = len(t) - k - 1
    first = int(np.searchsorted(t, t[0], side="right")) - 1
    last = int(np.searchsorted(t, t[-1], side="left")) - 1
    return bspline_matrix(x, np.asarray(t, dtype=float), k, max(k, first), min(nbasis - 1, last))


@dataclass(frozen=True)
class SplineBasis:
    """Clamped cubic B-spline basis with evenly spaced interior knots.

    Parameters
    ----------
    interior_knot_count : int
        Number of interior knots; the basis dimension is this plus 4.
    boundary : tuple of float
        ``(lo, hi)`` evaluation range.
    """

    interior_knot_count: int
    boundary: tuple[float, float] = (0.0, 1.0)
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lo, hi = float(self.boundary[0]), float(self.boundary[1])
        if self.interior_knot_count < 0:
            raise ConfigError("interior_knot_count must be >= 0")
        if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
            raise ConfigError(f"invalid spline boundary ({lo}, {hi})")
        object.__setattr__(self, "boundary", (lo, hi))
        interior = np.linspace(lo, hi, self.interior_knot_count + 2)[1:-1]
        t = np.concatenate([[lo] * (DEGREE + 1), interior, [hi] * (DEGREE + 1)])
        object.__setattr__(self, "knots", t)

    @classmethod
    def with_dim(cls, dim: int, boundary=(0.0, 1.0)) -> "SplineBasis":
        if dim < DEGREE + 1:
            raise ConfigError(f"cubic spline basis needs dim >= 4, got {dim}")
        return cls(dim - DEGREE - 1, boundary)

    @classmethod
    def over(cls, values, dim: int) -> "SplineBasis":
        """Basis spanning the observed range of ``values``.

        A (near) constant sample gets a unit-width range around its value.
        """
        values = np.asarray(values, dtype=float)
        lo, hi = float(values.min()), float(values.max())
        if hi - lo <= 1e-12 * max(1.0, abs(lo), abs(hi)):
            lo, hi = lo - 0.5, hi + 0.5
        return cls.with_dim(dim, (lo, hi))

    @property
    def degree(self) -> int:
        return DEGREE

    @property
    def dim(self) -> int:
        return self.interior_knot_count + DEGREE + 1

    def clamp(self, s):
        return np.clip(np.asarray(s, dtype=float), *self.boundary)

    def evaluate(self, s) -> np.ndarray:
        s = np.atleast_1d(self.clamp(s))
        return _basis_functions(s, self.knots, DEGREE)

    def derivative(self, s) -> np.ndarray:
        s = np.atleast_1d(self.clamp(s))
        t, k = self.knots, DEGREE
        lower = _basis_functions(s, t, k - 1)  # dim + 1 functions
        out = np.zeros((s.size, self.dim))
        for i in range(self.dim):
            a = t[i + k] - t[i]
            b = t[i + k + 1] - t[i + 1]
            if a > 0:
                out[:, i] += k / a * lower[:, i]
            if b > 0:
                out[:, i] -= k / b * lower[:, i + 1]
        return out

    def to_dict(self) -> dict:
        return {"kind": "spline", "dim": self.dim, "boundary": list(self.boundary)}


@dataclass(frozen=True)
class LinearBasis:
    """Affine basis ``(1, (s - lo) / (hi - lo))``; evaluated without clamping."""

    boundary: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        lo, hi = float(self.boundary[0]), float(self.boundary[1])
        if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
            raise ConfigError(f"invalid linear basis range ({lo}, {hi})")
        object.__setattr__(self, "boundary", (lo, hi))

    @classmethod
    def over(cls, values, dim: int = 2) -> "LinearBasis":
        values = np.asarray(values, dtype=float)
        lo, hi = float(values.min()), float(values.max())
        if hi - lo <= 1e-12 * max(1.0, abs(lo), abs(hi)):
            lo, hi = lo - 0.5, hi + 0.5
        return cls((lo, hi))

    dim = 2

    def evaluate(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        lo, hi = self.boundary
        return np.column_stack([np.ones_like(s), (s - lo) / (hi - lo)])

    def derivative(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        lo, hi = self.boundary
        return np.column_stack([np.zeros_like(s), np.full_like(s, 1.0 / (hi - lo))])

    def to_dict(self) -> dict:
        return {"kind": "linear", "dim": 2, "boundary": list(self.boundary)}


def basis_from_dict(d: dict):
    if d["kind"] == "spline":
        return SplineBasis.with_dim(int(d["dim"]), tuple(d["boundary"]))
    if d["kind"] == "linear":
        return LinearBasis(tuple(d["boundary"]))
    raise ConfigError(f"unknown basis kind {d['kind']!r}")


class OrthonormalSplineBasis:
    """Cubic B-splines on [0, 1] rotated to be L2-orthonormal.

    Coefficient vectors then satisfy ``||gamma||_2 == ||beta||_L2``, so unit
    coefficient norm places ``beta`` on the unit sphere of L2[0, 1].
    """

    def __init__(self, dim: int):
        self.spline = SplineBasis.with_dim(dim, (0.0, 1.0))
        gram = self._gram(self.spline)
        w, V = np.linalg.eigh(gram)
        self.root = (V * np.sqrt(w)) @ V.T          # G^{1/2}
        self.inv_root = (V / np.sqrt(w)) @ V.T      # G^{-1/2}

    @staticmethod
    def _gram(spline: SplineBasis) -> np.ndarray:
        # Gauss-Legendre with 4 nodes per knot span is exact for degree-6 products
        nodes, weights = np.polynomial.legendre.leggauss(DEGREE + 1)
        breaks = np.unique(spline.knots)
        G = np.zeros((spline.dim, spline.dim))
        for a, b in zip(breaks[:-1], breaks[1:]):
            s = 0.5 * (b - a) * nodes + 0.5 * (a + b)
            B = spline.evaluate(s)
            G += (B * (0.5 * (b - a) * weights)[:, None]).T @ B
        return G

    @property
    def dim(self) -> int:
        return self.spline.dim

    def evaluate(self, s) -> np.ndarray:
        return self.spline.evaluate(s) @ self.inv_root

    def coefficients_of_constant(self) -> np.ndarray:
        """Coefficients representing beta(s) = 1 (unit L2 norm on [0, 1])."""
        return self.root @ np.ones(self.dim)


def fourier4(s) -> np.ndarray:
    """Four-term Fourier system ``sqrt(2) (sin 2 pi s, cos 2 pi s, sin 4 pi s, cos 4 pi s)``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    r2 = np.sqrt(2.0)
    return np.column_stack([
        r2 * np.sin(2 * np.pi * s),
        r2 * np.cos(2 * np.pi * s),
        r2 * np.sin(4 * np.pi * s),
        r2 * np.cos(4 * np.pi * s),
    ])


def spline_eval(basis, s) -> np.ndarray:
    """Basis values at scalar ``s`` (vector) or at an array of points (matrix)."""
    out = basis.evaluate(s)
    return out[0] if np.ndim(s) == 0 else out


def spline_deriv(basis, s) -> np.ndarray:
    out = basis.derivative(s)
    return out[0] if np.ndim(s) == 0 else out


def fourier4_eval(s) -> np.ndarray:
    out = fourier4(s)
    return out[0] if np.ndim(s) == 0 else out
