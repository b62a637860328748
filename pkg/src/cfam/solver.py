"""Constrained functional additive model (CFAM) fitting.

The fit alternates two steps until the single-index coefficients settle:

* Step 1 holds every coefficient function fixed and runs block
  soft-thresholding coordinate descent over the treatment-specific component
  functions, each represented in a constrained spline space.
* Step 2 holds the component functions fixed and updates each active
  coefficient function with one linearized (Gauss-Newton) least-squares solve.

Scalar covariates only take part in Step 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._kernels import block_coordinate_descent
from .basis import LinearBasis, OrthonormalSplineBasis, SplineBasis, default_dim
from .design import (
    FunctionalCovariate,
    Grid,
    Projector,
    TrialData,
    build_design,
    null_space_basis,
)
from .errors import DataError, NumericalError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitOptions:
    """Solver settings.

    ``dim`` is the spline dimension of every component function and
    ``beta_dim`` that of every coefficient function; ``None`` picks
    ``round(4 + (2n)^(1/5))``.
    """

    dim: int | None = None
    beta_dim: int | None = None
    tol: float = 1e-4
    max_outer: int = 50
    inner_tol: float = 1e-6
    max_inner: int = 100
    linear_mode: bool = False
    ridge: float = 1e-8
    rcond: float = 1e-10
    gamma_floor: float = 1e-8

    def resolved(self, n: int) -> "FitOptions":
        dim = self.dim if self.dim is not None else default_dim(n)
        beta_dim = self.beta_dim if self.beta_dim is not None else default_dim(n)
        if self.linear_mode:
            dim = 2
        return replace(self, dim=int(dim), beta_dim=int(beta_dim))


@dataclass(frozen=True)
class IndexCoefficient:
    """Coefficient function ``beta(s) = B(s) @ gamma`` with ``||gamma|| = 1``.

    ``B`` is an L2-orthonormal cubic spline basis on [0, 1], so the
    coefficient norm equals the function's L2 norm.
    """

    gamma: np.ndarray
    basis: OrthonormalSplineBasis = field(repr=False, compare=False)
    sign_anchor: int | None = None
    flat: bool = False

    def values(self, s) -> np.ndarray:
        return self.basis.evaluate(s) @ self.gamma

    def flipped(self) -> "IndexCoefficient":
        return replace(self, gamma=-self.gamma)


@dataclass(frozen=True)
class ComponentFit:
    """Treatment-specific component ``g(u, a) = Psi(u) @ theta[:, a-1] - offset[a-1]``.

    Both ``theta`` and the per-arm constants ``offset`` satisfy the treatment
    constraint ``sum_a pi_a (.)_a = 0``; the constants keep every component
    orthogonal, in sample, to arm-level shifts (which the arm-centered outcome
    does not contain).  Single-arm fits use plain sample centering.
    """

    theta: np.ndarray
    shrinkage: float
    basis: SplineBasis | LinearBasis = field(repr=False)
    offset: np.ndarray = None

    def __post_init__(self):
        L = self.theta.shape[1]
        off = np.zeros(L) if self.offset is None else np.broadcast_to(np.asarray(self.offset, float), (L,)).copy()
        object.__setattr__(self, "offset", off)

    @property
    def active(self) -> bool:
        return self.shrinkage > 0

    @property
    def index_range(self) -> tuple[float, float]:
        return self.basis.boundary

    def evaluate(self, u, a) -> np.ndarray:
        a = np.broadcast_to(np.asarray(a, dtype=int), np.shape(u))
        Psi = self.basis.evaluate(u)
        return np.einsum("ij,ij->i", Psi, self.theta[:, a - 1].T) - self.offset[a - 1]

    def derivative(self, u, a) -> np.ndarray:
        a = np.broadcast_to(np.asarray(a, dtype=int), np.shape(u))
        dPsi = self.basis.derivative(u)
        return np.einsum("ij,ij->i", dPsi, self.theta[:, a - 1].T)

    def arm_functions(self, u) -> np.ndarray:
        """``(len(u), L)`` matrix of every arm's function values."""
        return self.basis.evaluate(u) @ self.theta - self.offset[None, :]


@dataclass(frozen=True)
class CfamFit:
    functional: tuple  # of (IndexCoefficient, ComponentFit)
    scalar: tuple      # of ComponentFit
    lam: float
    pi: np.ndarray
    grids: tuple
    options: FitOptions
    outer_iterations: int = 0
    converged: bool = True
    inner_converged: bool = True
    history: tuple = ()

    @property
    def p(self) -> int:
        return len(self.functional)

    @property
    def q(self) -> int:
        return len(self.scalar)

    @property
    def L(self) -> int:
        return self.pi.size

    @property
    def linear_mode(self) -> bool:
        return self.options.linear_mode

    @property
    def betas(self) -> list[IndexCoefficient]:
        return [b for b, _ in self.functional]

    @property
    def components(self) -> list[ComponentFit]:
        return [c for _, c in self.functional] + list(self.scalar)

    @property
    def component_names(self) -> list[str]:
        return [f"X{j + 1}" for j in range(self.p)] + [f"Z{k + 1}" for k in range(self.q)]

    @property
    def active(self) -> np.ndarray:
        return np.array([c.active for c in self.components], dtype=bool)

    @property
    def active_functional(self) -> list[int]:
        return [j for j, (_, c) in enumerate(self.functional) if c.active]

    @property
    def active_scalar(self) -> list[int]:
        return [k for k, c in enumerate(self.scalar) if c.active]

    def indices(self, x_new) -> list[np.ndarray]:
        """Single indices ``<x_j, beta_j>`` of new curves, one array per covariate."""
        if len(x_new) != self.p:
            raise DataError(f"expected {self.p} functional covariates, got {len(x_new)}")
        out = []
        for j, (beta, _) in enumerate(self.functional):
            grid = self.grids[j]
            xj = x_new[j].values if isinstance(x_new[j], FunctionalCovariate) else np.asarray(x_new[j], float)
            if xj.ndim == 1:
                xj = xj[None, :]
            if xj.shape[1] != len(grid):
                raise DataError(f"covariate X{j + 1} has {xj.shape[1]} grid points, model expects {len(grid)}")
            out.append((xj * grid.weights) @ beta.values(grid.points))
        return out


# ---------------------------------------------------------------------------
# single-component update


def soft_threshold_update(D_tilde, R, lam: float, rcond: float = 1e-10):
    """Block soft-thresholded projection of a partial residual.

    Returns ``(g, theta_tilde, shrinkage)`` where ``f`` is the least-squares
    projection of ``R`` onto the columns of ``D_tilde``,
    ``shrinkage = [1 - lam sqrt(n) / ||f||]_+``, ``g = shrinkage * f`` and
    ``theta_tilde`` the matching (minimum-norm) coefficients.
    """
    D_tilde = np.asarray(D_tilde, dtype=float)
    R = np.asarray(R, dtype=float)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if D_tilde.shape[0] != R.size:
        raise DataError(f"design has {D_tilde.shape[0]} rows, residual has {R.size}")
    proj = Projector.of(D_tilde, rcond)
    f, coef = proj.project(R)
    s = _shrinkage(np.linalg.norm(f), lam, R.size)
    return s * f, s * coef, s


def _shrinkage(norm_f: float, lam: float, n: int) -> float:
    if norm_f <= 0.0:
        return 0.0
    return max(0.0, 1.0 - lam * np.sqrt(n) / norm_f)


# ---------------------------------------------------------------------------
# engine


@dataclass
class _State:
    gammas: list
    anchors: list
    G: np.ndarray  # (p + q, n) fitted component vectors


@dataclass
class _Step1Result:
    G: np.ndarray
    coefs: list
    shrink: np.ndarray
    sweeps: int
    converged: bool
    objective: list


class _Engine:
    """Data-dependent precomputation shared by all fits on one sample."""

    def __init__(self, data: TrialData, options: FitOptions | None = None):
        self.data = data
        self.opts = (options or FitOptions()).resolved(data.n)
        self.n, self.L, self.p, self.q = data.n, data.L, data.p, data.q
        self.N = null_space_basis(data.pi, self.opts.dim) if self.L >= 2 else None
        if self.L >= 2:
            # arm-level shifts c_a with sum_a pi_a c_a = 0, as n-vectors
            self._shift_null = null_space_basis(data.pi, 1).n_mat
            self._shift = self._shift_null[data.a - 1]
            self._shift_pinv = np.linalg.pinv(self._shift)
        self.beta_basis = OrthonormalSplineBasis(self.opts.beta_dim)
        # rows of xwb hold quadrature weights * curve projected on beta's basis,
        # so the index of subject i is xwb[i] @ gamma
        self.xwb = [xj.weighted() @ self.beta_basis.evaluate(xj.grid.points) for xj in data.x]
        self._scalar = [self.component_space(data.z[:, k]) for k in range(self.q)]
        self._functional_cache: dict = {}

    # -- component spaces -------------------------------------------------

    def make_basis(self, u):
        if self.opts.linear_mode:
            return LinearBasis.over(u)
        return SplineBasis.over(u, self.opts.dim)

    def design(self, basis, u):
        """Reparametrized design with arm-level shifts projected out.

        Returns ``(D, off_map)``: ``D @ c`` are the component's fitted values
        and ``off_map @ c`` its per-arm constants.
        """
        if self.L >= 2:
            Dt = build_design(u, self.data.a, basis, self.L) @ self.N.n_mat
            w = self._shift_pinv @ Dt
            return Dt - self._shift @ w, self._shift_null @ w
        Psi = basis.evaluate(u)
        off = Psi.mean(axis=0)
        return Psi - off, off[None, :]

    def component_space(self, u):
        basis = self.make_basis(u)
        D, off_map = self.design(basis, u)
        return basis, Projector.of(D, self.opts.rcond), u, off_map

    def functional_space(self, j: int, gamma: np.ndarray):
        key = (j, gamma.tobytes())
        hit = self._functional_cache.get(key)
        if hit is None:
            hit = self.component_space(self.xwb[j] @ gamma)
            if len(self._functional_cache) > 4 * (self.p + 1):
                self._functional_cache.clear()
            self._functional_cache[key] = hit
        return hit

    def spaces(self, gammas):
        return [self.functional_space(j, g) for j, g in enumerate(gammas)] + self._scalar

    def component_fit(self, space, coef, shrink) -> ComponentFit:
        basis, _, _, off_map = space
        d = basis.dim
        if shrink <= 0:
            return ComponentFit(np.zeros((d, self.L)), 0.0, basis)
        offset = off_map @ coef
        if self.L >= 2:
            theta = (self.N.n_mat @ coef).reshape(self.L, d).T
        else:
            theta = coef[:, None]
        return ComponentFit(theta, float(shrink), basis, offset)

    def initial_gamma(self) -> np.ndarray:
        g = self.beta_basis.coefficients_of_constant()
        return g / np.linalg.norm(g)

    def initial_state(self) -> _State:
        return _State([self.initial_gamma() for _ in range(self.p)], [None] * self.p,
                      np.zeros((self.p + self.q, self.n)))

    # -- objective ----------------------------------------------------------

    def objective(self, G: np.ndarray, lam: float) -> float:
        r = self.data.y - G.sum(axis=0)
        norms = np.sqrt((G ** 2).sum(axis=1) / self.n)
        return float(r @ r / self.n + 2.0 * lam * norms.sum())

    # -- Step 1 -------------------------------------------------------------

    def step1(self, lam: float, spaces, G0: np.ndarray, trace: bool = False) -> _Step1Result:
        """Block coordinate descent over all components.

        Works in the coordinates of each component's orthonormal column basis
        ``U_k``: ``g_k = U_k alpha_k``, so ``||g_k|| = ||alpha_k||`` and the
        projection of a partial residual is ``U_k^T r + alpha_k``.  Warm
        starts project ``G0`` onto the current spaces.
        """
        n = self.n
        K = len(spaces)
        Us = [sp[1].U for sp in spaces]
        offs = np.concatenate([[0], np.cumsum([U.shape[1] for U in Us])]).astype(np.int64)
        UT = np.ascontiguousarray(np.vstack([U.T for U in Us])) if K else np.zeros((0, n))
        alpha = np.concatenate([Us[k].T @ G0[k] for k in range(K)]) if K else np.zeros(0)
        shrink, sweeps, converged, hist = block_coordinate_descent(
            UT, offs, np.ascontiguousarray(self.data.y), alpha, float(lam),
            self.opts.inner_tol, self.opts.max_inner, trace)
        G = np.zeros((K, n))
        coefs = [np.zeros(0)] * K
        for k in range(K):
            blk = alpha[offs[k]:offs[k + 1]]
            if shrink[k] > 0 and np.any(blk):
                G[k] = Us[k] @ blk
                coefs[k] = spaces[k][1].coef_map @ blk
            else:
                shrink[k] = 0.0
        if not np.all(np.isfinite(G)):
            bad = int(np.argmax(~np.all(np.isfinite(G), axis=1)))
            raise NumericalError(f"non-finite fitted values in component {self._name(bad)} during Step 1")
        return _Step1Result(G, coefs, shrink, int(sweeps), bool(converged), list(hist))

    def _name(self, k: int) -> str:
        return f"X{k + 1}" if k < self.p else f"Z{k - self.p + 1}"

    # -- Step 2 -------------------------------------------------------------

    def step2(self, j: int, gamma: np.ndarray, anchor, comp: ComponentFit, R: np.ndarray, u: np.ndarray,
              gval: np.ndarray | None = None):
        """One linearized update of coefficient function ``j``.

        ``gval`` optionally supplies the component's values at ``u``.
        Returns ``(gamma, anchor, g_at_new_index, flat)``.
        """
        a = self.data.a
        if gval is None:
            gval = comp.evaluate(u, a)
        gdot = comp.derivative(u, a)
        lo, hi = comp.index_range
        # flat up to rounding: slope times index range negligible next to the coefficients
        if np.max(np.abs(gdot), initial=0.0) * (hi - lo) <= 1e-10 * max(1.0, float(np.abs(comp.theta).max())):
            return gamma, anchor, gval, True
        r_star = R - gval + gdot * u
        U_star = gdot[:, None] * self.xwb[j]
        gram = U_star.T @ U_star
        rank = np.linalg.matrix_rank(gram)
        if rank < gram.shape[0]:
            scale = max(np.trace(gram) / gram.shape[0], 1.0)
            gram = gram + self.opts.ridge * scale * np.eye(gram.shape[0])
        sol = np.linalg.solve(gram, U_star.T @ r_star)
        norm = np.linalg.norm(sol)
        if not np.isfinite(norm) or norm == 0.0:
            if not np.isfinite(norm):
                raise NumericalError(f"non-finite coefficient update for component X{j + 1}")
            return gamma, anchor, gval, True
        g_new = comp.evaluate(self.xwb[j] @ sol, a)
        new = sol / norm
        if anchor is None:
            anchor = int(np.argmax(np.abs(new)))
        if new[anchor] < 0:
            new = -new
        return new, anchor, g_new, False

    # -- driver -------------------------------------------------------------

    def criterion(self, old, new) -> float:
        worst = 0.0
        for g0, g1 in zip(old, new):
            mask = np.abs(g1) >= self.opts.gamma_floor
            if mask.any():
                worst = max(worst, float(np.max(np.abs((g1[mask] - g0[mask]) / g1[mask]))))
        return worst

    def run(self, lam: float, state: _State | None = None) -> tuple[CfamFit, _State]:
        state = state or self.initial_state()
        gammas = [g.copy() for g in state.gammas]
        anchors = list(state.anchors)
        G = state.G.copy()
        flats = [False] * self.p
        history = []
        crit = np.inf
        outer = 0
        inner_ok = True
        while True:
            spaces = self.spaces(gammas)
            res = self.step1(lam, spaces, G)
            G = res.G
            inner_ok = inner_ok and res.converged
            if not res.converged:
                log.debug("Step 1 hit max_inner=%d at outer iteration %d", self.opts.max_inner, outer)
            comps = [self.component_fit(sp, c, s) for sp, c, s in zip(spaces, res.coefs, res.shrink)]
            active = [j for j in range(self.p) if res.shrink[j] > 0]
            if crit < self.opts.tol or outer >= self.opts.max_outer or not active:
                break
            old = [g.copy() for g in gammas]
            for j in active:
                R = self.data.y - G.sum(axis=0) + G[j]
                u = spaces[j][2]
                gammas[j], anchors[j], G[j], flats[j] = self.step2(j, gammas[j], anchors[j], comps[j], R, u, G[j])
                if not np.all(np.isfinite(gammas[j])):
                    raise NumericalError(f"non-finite coefficient function for X{j + 1} at outer iteration {outer + 1}")
            outer += 1
            crit = self.criterion(old, gammas)
            history.append(crit)
            if all(flats[j] for j in active):
                crit = 0.0
        converged = crit < self.opts.tol or not active
        functional = tuple(
            (IndexCoefficient(gammas[j], self.beta_basis, anchors[j], flats[j]), comps[j])
            for j in range(self.p)
        )
        fit = CfamFit(
            functional=functional,
            scalar=tuple(comps[self.p:]),
            lam=float(lam),
            pi=self.data.pi.copy(),
            grids=tuple(xj.grid for xj in self.data.x),
            options=self.opts,
            outer_iterations=outer,
            converged=bool(converged),
            inner_converged=bool(inner_ok),
            history=tuple(history),
        )
        return fit, _State(gammas, anchors, G)


# ---------------------------------------------------------------------------
# public API


def fit(data: TrialData, lam: float, options: FitOptions | None = None) -> CfamFit:
    """Fit a CFAM at sparsity level ``lam`` starting from ``beta_j(s) = 1``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    fitted, _ = _Engine(data, options).run(lam)
    return fitted


def fit_path(data: TrialData, lambdas: Sequence[float], options: FitOptions | None = None,
             warm_start: bool = True) -> list[CfamFit]:
    """Fits along ``lambdas`` (in the given order), warm-starting each from the previous."""
    engine = _Engine(data, options)
    fits = []
    state = None
    for lam in lambdas:
        fitted, new_state = engine.run(float(lam), state if warm_start else None)
        fits.append(fitted)
        state = new_state
    return fits


def _state_from_fit(engine: _Engine, state: CfamFit | None, betas) -> _State:
    gammas = [np.asarray(b.gamma, float).copy() for b in betas]
    anchors = [b.sign_anchor for b in betas]
    G = np.zeros((engine.p + engine.q, engine.n))
    if state is not None:
        G = component_values(state, engine.data).T.copy()
    return _State(gammas, anchors, G)


def step1_backfit(data: TrialData, betas: Sequence[IndexCoefficient], lam: float,
                  state: CfamFit | None = None, options: FitOptions | None = None,
                  trace: bool = False):
    """Constrained sparse backfitting with the coefficient functions held fixed.

    ``state`` (optional) supplies warm-start component values.  With
    ``trace=True`` the penalized objective after every sweep is returned
    alongside the fit.
    """
    engine = _Engine(data, options)
    if len(betas) != engine.p:
        raise DataError(f"expected {engine.p} coefficient functions, got {len(betas)}")
    st = _state_from_fit(engine, state, betas)
    spaces = engine.spaces(st.gammas)
    res = engine.step1(lam, spaces, st.G, trace=trace)
    comps = [engine.component_fit(sp, c, s) for sp, c, s in zip(spaces, res.coefs, res.shrink)]
    fitted = CfamFit(
        functional=tuple((replace(betas[j], basis=engine.beta_basis), comps[j]) for j in range(engine.p)),
        scalar=tuple(comps[engine.p:]),
        lam=float(lam),
        pi=data.pi.copy(),
        grids=tuple(xj.grid for xj in data.x),
        options=engine.opts,
        converged=res.converged,
        inner_converged=res.converged,
    )
    if trace:
        return fitted, res.objective
    return fitted


def step2_update_beta(data: TrialData, j: int, fitted: CfamFit,
                      options: FitOptions | None = None) -> IndexCoefficient:
    """Linearized update of coefficient function ``j`` given the fitted components.

    Inactive components are returned unchanged; so are flat ones (zero
    derivative everywhere), with ``flat=True``.
    """
    beta, comp = fitted.functional[j]
    if not comp.active:
        return beta
    engine = _Engine(data, options or fitted.options)
    G = component_values(fitted, data).T
    R = data.y - G.sum(axis=0) + G[j]
    u = engine.xwb[j] @ beta.gamma
    gamma, anchor, _, flat = engine.step2(j, beta.gamma, beta.sign_anchor, comp, R, u)
    return IndexCoefficient(gamma, engine.beta_basis, anchor, flat)


def component_values(fitted: CfamFit, data: TrialData) -> np.ndarray:
    """``(n, p + q)`` matrix of fitted component values at the observed data."""
    cols = []
    for u, (_, comp) in zip(fitted.indices(data.x), fitted.functional):
        cols.append(comp.evaluate(u, data.a))
    for k, comp in enumerate(fitted.scalar):
        cols.append(comp.evaluate(data.z[:, k], data.a))
    return np.column_stack(cols) if cols else np.zeros((data.n, 0))


def constraint_violation(fitted: CfamFit, data: TrialData) -> float:
    """Largest ``|sum_a pi_a g(u_i, a)|`` over components and observed index values."""
    worst = 0.0
    args = fitted.indices(data.x) + [data.z[:, k] for k in range(fitted.q)]
    for u, comp in zip(args, fitted.components):
        worst = max(worst, float(np.max(np.abs(comp.arm_functions(u) @ fitted.pi), initial=0.0)))
    return worst


def penalized_objective(fitted: CfamFit, data: TrialData) -> float:
    """``(1/n)||y - sum g||^2 + 2 lam sum sqrt((1/n)||g||^2)`` at the fitted components."""
    G = component_values(fitted, data)
    r = data.y - G.sum(axis=1)
    n = data.n
    return float(r @ r / n + 2.0 * fitted.lam * np.sqrt((G ** 2).sum(axis=0) / n).sum())


def interaction_scores(fitted: CfamFit, x_new, z_new=None) -> np.ndarray:
    """``(m, L)`` matrix of the fitted interaction effect for every arm."""
    idx = fitted.indices(x_new)
    if z_new is None:
        z_new = np.zeros((idx[0].size if idx else 0, 0))
    z_new = np.asarray(z_new, dtype=float)
    if z_new.ndim == 1:
        z_new = z_new[None, :] if fitted.q > 1 or z_new.size == fitted.q else z_new[:, None]
    if z_new.shape[1] != fitted.q:
        raise DataError(f"expected {fitted.q} scalar covariates, got {z_new.shape[1]}")
    m = idx[0].size if idx else z_new.shape[0]
    out = np.zeros((m, fitted.L))
    for u, (_, comp) in zip(idx, fitted.functional):
        if comp.active:
            out += comp.arm_functions(u)
    for k, comp in enumerate(fitted.scalar):
        if comp.active:
            out += comp.arm_functions(z_new[:, k])
    return out


def predict_interaction(fitted: CfamFit, x_new, z_new, arm: int) -> np.ndarray:
    """Fitted interaction effect of arm ``arm`` (1-based) at new covariates."""
    if not (1 <= int(arm) <= fitted.L):
        raise DataError(f"arm must lie in 1..{fitted.L}, got {arm}")
    return interaction_scores(fitted, x_new, z_new)[:, int(arm) - 1]
