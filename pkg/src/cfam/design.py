"""Trial data containers, constrained treatment-specific designs and quadrature."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError


def riemann_weights(points) -> np.ndarray:
    """Gap to the next point for every point (the last reuses the previous gap)."""
    points = np.asarray(points, dtype=float)
    if points.size == 1:
        return np.ones(1)
    gaps = np.diff(points)
    return np.append(gaps, gaps[-1])


def trapezoid_weights(points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.size == 1:
        return np.ones(1)
    gaps = np.diff(points)
    w = np.zeros(points.size)
    w[:-1] += gaps / 2
    w[1:] += gaps / 2
    return w


@dataclass(frozen=True)
class Grid:
    """Observation points of a functional covariate with quadrature weights.

    Default weights are neighbor gaps (a left Riemann sum that also counts the
    last point); pass ``weights=trapezoid_weights(points)`` for the
    trapezoidal rule.
    """

    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise DataError("grid needs at least two points")
        if not np.all(np.isfinite(pts)) or np.any(np.diff(pts) <= 0):
            raise DataError("grid points must be finite and strictly increasing")
        object.__setattr__(self, "points", pts)
        w = riemann_weights(pts) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != pts.shape or np.any(w <= 0):
            raise DataError("grid weights must be positive, one per point")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, size: int = 50, lo: float = 0.0, hi: float = 1.0) -> "Grid":
        return cls(np.linspace(lo, hi, size))

    @classmethod
    def trapezoid(cls, points) -> "Grid":
        return cls(points, trapezoid_weights(points))

    def __len__(self):
        return self.points.size


@dataclass(frozen=True)
class FunctionalCovariate:
    values: np.ndarray  # (n, r)
    grid: Grid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != len(self.grid):
            raise DataError(
                f"functional covariate has {v.shape[-1]} columns, grid has {len(self.grid)} points"
            )
        if not np.all(np.isfinite(v)):
            raise DataError("functional covariate contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def weighted(self) -> np.ndarray:
        """Curve samples multiplied by quadrature weights (rows are integrands)."""
        return self.values * self.grid.weights[None, :]

    def means(self) -> np.ndarray:
        """Per-subject integral of the curve over the grid."""
        return self.values @ self.grid.weights


def resolve_pi(a: np.ndarray, L: int, pi=None) -> np.ndarray:
    if pi is None:
        return np.full(L, 1.0 / L)
    if isinstance(pi, str):
        if pi == "uniform":
            return np.full(L, 1.0 / L)
        if pi == "empirical":
            return np.bincount(a - 1, minlength=L) / a.size
        raise ConfigError(f"unknown pi specification {pi!r}")
    return np.asarray(pi, dtype=float)


@dataclass(frozen=True)
class TrialData:
    """Randomized-trial sample with arm-centered outcomes.

    ``center[a - 1]`` holds the mean that was removed from arm ``a``'s
    outcomes, so ``y + center[a - 1]`` recovers the raw outcome.
    """

    y: np.ndarray
    a: np.ndarray
    pi: np.ndarray
    x: tuple = ()
    z: np.ndarray = None
    center: np.ndarray = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        a = np.asarray(self.a).ravel()
        n = y.size
        if a.size != n:
            raise DataError(f"y has {n} entries but a has {a.size}")
        if not np.all(np.isfinite(y)):
            raise DataError("outcome contains non-finite values")
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise DataError("arm labels must be integers")
        a = a.astype(int)
        pi = np.asarray(self.pi, dtype=float).ravel()
        L = pi.size
        if L < 1 or np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-8:
            raise ConfigError(f"randomization probabilities must be positive and sum to 1, got {pi}")
        if a.min() < 1 or a.max() > L:
            raise DataError(f"arm labels must lie in 1..{L}")
        x = tuple(self.x)
        for j, xj in enumerate(x):
            if xj.n != n:
                raise DataError(f"functional covariate {j} has {xj.n} rows, expected {n}")
        z = np.zeros((n, 0)) if self.z is None else np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != n:
            raise DataError(f"scalar covariates have {z.shape[0]} rows, expected {n}")
        if not np.all(np.isfinite(z)):
            raise DataError("scalar covariates contain non-finite values")
        center = np.zeros(L) if self.center is None else np.asarray(self.center, float)
        for name, val in (("y", y), ("a", a), ("pi", pi), ("x", x), ("z", z), ("center", center)):
            object.__setattr__(self, name, val)

    @classmethod
    def create(cls, y, a, x: Sequence = (), z=None, pi=None, grids=None) -> "TrialData":
        """Validate raw arrays and remove per-arm outcome means.

        ``x`` may hold :class:`FunctionalCovariate` objects or plain ``(n, r)``
        arrays, the latter paired with ``grids`` (default: uniform on [0, 1]).
        ``pi`` is a probability vector, ``"uniform"`` (default) or
        ``"empirical"``.
        """
        y = np.asarray(y, dtype=float).ravel()
        a = np.asarray(a).ravel()
        if not np.all(np.isfinite(y)):
            raise DataError("outcome contains non-finite values")
        if a.size == 0:
            raise DataError("empty trial")
        L = int(np.max(a)) if pi is None or isinstance(pi, str) else len(pi)
        a_int = a.astype(int)
        covs = []
        for j, xj in enumerate(x):
            if isinstance(xj, FunctionalCovariate):
                covs.append(xj)
            else:
                xj = np.asarray(xj, dtype=float)
                grid = grids[j] if grids is not None else Grid.uniform(xj.shape[1])
                covs.append(FunctionalCovariate(xj, grid))
        pi_vec = resolve_pi(a_int, L, pi)
        center = np.zeros(pi_vec.size)
        yc = y.copy()
        for arm in range(1, pi_vec.size + 1):
            mask = a_int == arm
            if mask.any():
                center[arm - 1] = y[mask].mean()
                yc[mask] -= center[arm - 1]
        return cls(yc, a_int, pi_vec, tuple(covs), z, center)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def L(self) -> int:
        return self.pi.size

    @property
    def p(self) -> int:
        return len(self.x)

    @property
    def q(self) -> int:
        return self.z.shape[1]

    @property
    def raw_y(self) -> np.ndarray:
        return self.y + self.center[self.a - 1]

    def subset(self, idx, recenter: bool = True) -> "TrialData":
        """Rows ``idx``; outcomes re-centered per arm within the subset."""
        idx = np.asarray(idx)
        x = tuple(FunctionalCovariate(xj.values[idx], xj.grid) for xj in self.x)
        y = self.raw_y[idx]
        a = self.a[idx]
        center = np.zeros(self.L)
        if recenter:
            for arm in range(1, self.L + 1):
                mask = a == arm
                if mask.any():
                    center[arm - 1] = y[mask].mean()
            y = y - center[a - 1]
        else:
            center = self.center.copy()
            y = self.y[idx]
        return TrialData(y, a, self.pi, x, self.z[idx], center)

    def with_outcome(self, y) -> "TrialData":
        """Same covariates and arms with ``y`` re-centered per arm; raw offsets kept."""
        y = np.asarray(y, dtype=float).copy()
        for arm in range(1, self.L + 1):
            mask = self.a == arm
            if mask.any():
                y[mask] -= y[mask].mean()
        return replace(self, y=y)


def inner_product(x_row, beta_vals, grid: Grid) -> float:
    """Quadrature approximation of the L2 inner product on ``grid``."""
    x_row = np.asarray(x_row, dtype=float)
    beta_vals = np.asarray(beta_vals, dtype=float)
    if x_row.shape[-1] != len(grid) or beta_vals.shape[-1] != len(grid):
        raise DataError(
            f"inner product length mismatch: {x_row.shape[-1]}, {beta_vals.shape[-1]}, grid {len(grid)}"
        )
    return (x_row * grid.weights) @ beta_vals


@dataclass(frozen=True)
class ConstraintBasis:
    """Orthonormal basis of ``{theta : sum_a pi_a theta_a = 0}`` (stacked by arm)."""

    n_mat: np.ndarray
    pi: np.ndarray
    d: int

    @property
    def L(self) -> int:
        return self.pi.size


def null_space_basis(pi, d: int) -> ConstraintBasis:
    """Null space of the ``d x dL`` matrix ``(pi_1 I_d, ..., pi_L I_d)`` via complete QR."""
    pi = np.asarray(pi, dtype=float).ravel()
    L = pi.size
    if L < 2:
        raise ConfigError("the treatment constraint needs at least two arms")
    if np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-8:
        raise ConfigError(f"invalid randomization probabilities {pi}")
    P = np.kron(pi[None, :], np.eye(d))  # d x dL
    Q, _ = np.linalg.qr(P.T, mode="complete")
    return ConstraintBasis(Q[:, d:], pi, d)


def build_design(u, a, basis, L: int) -> np.ndarray:
    """Treatment-blocked design: row i carries the basis at ``u_i`` in block ``a_i``."""
    u = np.asarray(u, dtype=float)
    a = np.asarray(a, dtype=int)
    if a.min() < 1 or a.max() > L:
        raise DataError(f"arm labels must lie in 1..{L}")
    Psi = basis.evaluate(u)
    d = Psi.shape[1]
    D = np.zeros((u.size, d * L))
    for arm in range(1, L + 1):
        rows = a == arm
        D[rows, (arm - 1) * d:arm * d] = Psi[rows]
    return D


def reparametrize(D, N: ConstraintBasis) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.shape[1] != N.n_mat.shape[0]:
        raise DataError(f"design has {D.shape[1]} columns, constraint basis expects {N.n_mat.shape[0]}")
    return D @ N.n_mat


@dataclass(frozen=True)
class Projector:
    """Orthogonal projection onto the column space of a reparametrized design.

    Stores the thin SVD ``D = U S V^T`` truncated at a relative singular value
    cutoff, so rank-deficient designs get the minimum-norm solution.
    """

    U: np.ndarray         # (n, k) orthonormal columns
    coef_map: np.ndarray  # (cols, k): maps U^T r to minimum-norm coefficients

    @classmethod
    def of(cls, D, rcond: float = 1e-10) -> "Projector":
        if D.shape[1] == 0 or not np.any(D):
            return cls(np.zeros((D.shape[0], 0)), np.zeros((D.shape[1], 0)))
        U, s, Vt = np.linalg.svd(D, full_matrices=False)
        keep = s > rcond * s[0]
        return cls(U[:, keep], Vt[keep].T / s[keep])

    def matrix(self) -> np.ndarray:
        return self.U @ self.U.T

    def project(self, r):
        c = self.U.T @ r
        return self.U @ c, self.coef_map @ c
