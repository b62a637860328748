"""Sparsity-level selection by cross-validation and main-effect residualization.

Cross-validation scores each candidate ``lam`` by the held-out mean squared
error of ``y - (training arm mean + fitted interaction)``.  Residualization
("efficiency augmentation") removes a separately fitted main effect
``mu(X, Z)`` from the outcome before the interaction model is fitted.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import lasso_covariance_cd
from .design import FunctionalCovariate, TrialData
from .errors import ConfigError, DataError
from .solver import CfamFit, FitOptions, _Engine, component_values, fit_path, interaction_scores

log = logging.getLogger(__name__)

RESIDUAL_KINDS = ("none", "lasso_scalar_summary", "functional_additive")
PATH_RATIO = 1e-3


# ---------------------------------------------------------------------------
# lambda path


def lambda_max(data: TrialData, options: FitOptions | None = None) -> float:
    """Smallest ``lam`` at which the first sweep from zero leaves every component inactive.

    With all components at zero the partial residual of every component is
    ``y`` itself, so this is ``max_k ||P_k y|| / sqrt(n)`` over the component
    smoothers at the initial coefficient functions.
    """
    engine = _Engine(data, options)
    spaces = engine.spaces([engine.initial_gamma() for _ in range(engine.p)])
    best = 0.0
    for _, proj, _, _ in spaces:
        c = proj.U.T @ data.y
        best = max(best, float(np.sqrt(c @ c)))
    return best / np.sqrt(data.n)


def lambda_path(data: TrialData, n_lambda: int = 20, options: FitOptions | None = None) -> np.ndarray:
    """Decreasing log-spaced grid from ``lambda_max`` down to ``1e-3 * lambda_max``."""
    if n_lambda < 2:
        raise ConfigError("n_lambda must be at least 2")
    top = lambda_max(data, options)
    if top <= 1e-12 * max(1.0, float(np.abs(data.raw_y).max())):
        return np.zeros(1)
    return np.geomspace(top, PATH_RATIO * top, n_lambda)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class CvReport:
    """Cross-validation summary.

    ``fold_error[k, i]`` is the held-out MSE of fold ``k`` at ``lambdas[i]``.
    When early stopping is on, the path is truncated after the last
    evaluated ``lam``.
    """

    lambdas: np.ndarray
    cv_error: np.ndarray
    cv_se: np.ndarray
    chosen: int
    fold_error: np.ndarray = field(repr=False)
    folds: np.ndarray = field(repr=False)

    @property
    def best_lambda(self) -> float:
        return float(self.lambdas[self.chosen])

    def rows(self) -> list[dict]:
        return [
            {"lambda": float(l), "cv_error": float(e), "cv_se": float(s), "chosen": int(i == self.chosen)}
            for i, (l, e, s) in enumerate(zip(self.lambdas, self.cv_error, self.cv_se))
        ]


def fold_ids(a: np.ndarray, folds: int, seed: int = 0) -> np.ndarray:
    """Fold label (0..folds-1) per subject, dealt out round-robin within each arm."""
    a = np.asarray(a, dtype=int)
    if folds < 2:
        raise ConfigError("cross-validation needs at least 2 folds")
    if folds > a.size:
        raise ConfigError(f"{folds} folds requested for {a.size} subjects")
    rng = np.random.default_rng(seed)
    out = np.empty(a.size, dtype=int)
    start = 0
    for arm in np.unique(a):
        idx = np.flatnonzero(a == arm)
        idx = idx[rng.permutation(idx.size)]
        out[idx] = (start + np.arange(idx.size)) % folds
        start = (start + idx.size) % folds
    return out


def _check_folds(data: TrialData, ids: np.ndarray, folds: int):
    for k in range(folds):
        train_arms = np.unique(data.a[ids != k])
        missing = sorted(set(range(1, data.L + 1)) - set(train_arms.tolist()))
        if missing:
            raise DataError(f"training set of fold {k + 1} has no subjects in arm(s) {missing}")


class _FoldRun:
    """Warm-started path fits on one training fold, scored on its held-out rows."""

    def __init__(self, data: TrialData, train: np.ndarray, test: np.ndarray, options):
        self.train = data.subset(train)
        self.engine = _Engine(self.train, options)
        self.state = None
        self.x_test = [FunctionalCovariate(xj.values[test], xj.grid) for xj in data.x]
        self.z_test = data.z[test]
        self.a_test = data.a[test]
        self.y_test = data.raw_y[test] - self.train.center[self.a_test - 1]

    def score(self, lam: float) -> float:
        fitted, self.state = self.engine.run(lam, self.state)
        scores = interaction_scores(fitted, self.x_test, self.z_test)
        pred = scores[np.arange(self.a_test.size), self.a_test - 1]
        r = self.y_test - pred
        return float(r @ r / r.size)


def cross_validate(data: TrialData, folds: int = 10, path=None, options: FitOptions | None = None,
                   seed: int = 0, n_lambda: int = 20, patience: int | None = None,
                   threads: int = 1, max_outer: int | None = None) -> CvReport:
    """K-fold cross-validation over a decreasing ``lam`` path.

    Folds are stratified by arm.  Each fold fits the path in order with warm
    starts; ``max_outer`` (if given) caps the alternations of these fold
    fits.  With ``patience`` set, the path stops once the mean held-out
    error has failed to improve on its minimum for that many consecutive
    values.  Folds are evaluated concurrently on ``threads`` threads; the
    result does not depend on the thread count.
    """
    path = lambda_path(data, n_lambda, options) if path is None else np.asarray(path, dtype=float).ravel()
    if max_outer is not None:
        options = replace(options or FitOptions(), max_outer=int(max_outer))
    if path.size == 0:
        raise ConfigError("empty lambda path")
    if np.any(np.diff(path) > 0):
        raise ConfigError("lambda path must be non-increasing")
    ids = fold_ids(data.a, folds, seed)
    _check_folds(data, ids, folds)
    runs = [_FoldRun(data, np.flatnonzero(ids != k), np.flatnonzero(ids == k), options) for k in range(folds)]
    errors = []
    best, since = np.inf, 0
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for lam in path:
            if pool is None:
                col = [r.score(float(lam)) for r in runs]
            else:
                col = list(pool.map(lambda r: r.score(float(lam)), runs))
            errors.append(col)
            mean = float(np.mean(col))
            if mean < best:
                best, since = mean, 0
            else:
                since += 1
            log.debug("cv lam=%.4g error=%.5f", lam, mean)
            if patience is not None and since >= patience:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    fold_error = np.array(errors).T
    cv_error = fold_error.mean(axis=0)
    cv_se = fold_error.std(axis=0, ddof=1) / np.sqrt(folds)
    return CvReport(path[:cv_error.size].copy(), cv_error, cv_se, int(np.argmin(cv_error)), fold_error, ids)


CV_MAX_OUTER = 5
CV_PATIENCE = 3


def fit_cv(data: TrialData, folds: int = 10, options: FitOptions | None = None, seed: int = 0,
           n_lambda: int = 20, patience: int | None = CV_PATIENCE, threads: int = 1,
           cv_max_outer: int | None = CV_MAX_OUTER) -> tuple[CfamFit, CvReport]:
    """Cross-validate ``lam``, then refit on all of ``data`` along the path down to the chosen value.

    Fold fits are capped at ``cv_max_outer`` alternations (warm starts carry
    them along the path); the final fit uses ``options`` unchanged.
    """
    report = cross_validate(data, folds, None, options, seed, n_lambda, patience, threads, cv_max_outer)
    fits = fit_path(data, report.lambdas[:report.chosen + 1], options)
    return fits[-1], report


# ---------------------------------------------------------------------------
# lasso


@dataclass(frozen=True)
class LassoFit:
    """Linear predictor ``intercept + X @ coef`` on the original covariate scale."""

    intercept: float
    coef: np.ndarray
    lam: float

    def predict(self, X) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=float) @ self.coef


def _standardize(X):
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale <= 1e-12] = 1.0
    return (X - mean) / scale, mean, scale


def lasso_cd(Xs, y, lam: float, beta0=None, tol: float = 1e-9, max_iter: int = 10000,
             gram=None) -> np.ndarray:
    """Cyclic coordinate descent for ``(1/2n)||y - Xs b||^2 + lam ||b||_1``.

    ``Xs`` should have centered columns and ``y`` should be centered; no
    intercept is fitted.  Works on the covariance ``Xs^T Xs / n`` (pass it
    as ``gram`` to reuse it along a path).  After each full sweep the
    nonzero coefficients are cycled until they settle; the run stops when a
    full sweep moves no coefficient by more than ``tol``.
    """
    Xs = np.asarray(Xs, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = Xs.shape
    C = Xs.T @ Xs / n if gram is None else gram
    b = np.zeros(m) if beta0 is None else np.array(beta0, dtype=float)
    lasso_covariance_cd(np.ascontiguousarray(C), Xs.T @ y / n, b, float(lam), tol, max_iter)
    return b


def lasso_lambda_max(Xs, y) -> float:
    return float(np.max(np.abs(np.asarray(Xs).T @ np.asarray(y))) / len(y)) if np.size(Xs) else 0.0


def lasso_cv(X, y, folds: int = 10, n_lambda: int = 100, seed: int = 0, ratio: float = 1e-3) -> LassoFit:
    """Lasso with the penalty chosen by K-fold CV on standardized covariates.

    Coefficients are returned on the original scale.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = X.shape
    if not 2 <= folds <= n:
        raise ConfigError(f"lasso cross-validation needs 2..{n} folds, got {folds}")
    if m == 0:
        return LassoFit(float(y.mean()), np.zeros(0), 0.0)
    Xs, mean, scale = _standardize(X)
    yc = y - y.mean()
    top = lasso_lambda_max(Xs, yc)
    if top <= 0:
        return LassoFit(float(y.mean()), np.zeros(m), 0.0)
    lams = np.geomspace(top, ratio * top, n_lambda)
    ids = np.random.default_rng(seed).permutation(n) % folds
    err = np.zeros((folds, n_lambda))
    for k in range(folds):
        tr, te = ids != k, ids == k
        Xt, mt, st = _standardize(X[tr])
        yt_mean = y[tr].mean()
        C = Xt.T @ Xt / Xt.shape[0]
        b = np.zeros(m)
        for i, lam in enumerate(lams):
            b = lasso_cd(Xt, y[tr] - yt_mean, lam, b, gram=C)
            pred = yt_mean + ((X[te] - mt) / st) @ b
            err[k, i] = np.mean((y[te] - pred) ** 2)
    best = int(np.argmin(err.mean(axis=0)))
    C = Xs.T @ Xs / n
    b = np.zeros(m)
    for lam in lams[:best + 1]:
        b = lasso_cd(Xs, yc, lam, b, gram=C)
    coef = b / scale
    return LassoFit(float(y.mean() - mean @ coef), coef, float(lams[best]))


# ---------------------------------------------------------------------------
# residualization


def scalar_summaries(data_x, z) -> np.ndarray:
    """Design ``(Xbar_1, ..., Xbar_p, Z_1, ..., Z_q)`` with ``Xbar_j`` the curve integrals."""
    cols = [xj.means() for xj in data_x]
    z = np.asarray(z, dtype=float)
    parts = ([np.column_stack(cols)] if cols else []) + [z]
    return np.hstack(parts) if parts else np.zeros((z.shape[0], 0))


@dataclass(frozen=True)
class MainEffectFit:
    """Fitted main effect ``mu(X, Z)`` used to residualize the outcome.

    ``parameters`` is a :class:`LassoFit` or a single-arm :class:`CfamFit`.
    """

    kind: str
    parameters: object
    training_mse: float

    def predict(self, x, z) -> np.ndarray:
        if self.kind == "lasso_scalar_summary":
            return self.parameters.predict(scalar_summaries(x, z))
        if self.kind == "functional_additive":
            return interaction_scores(self.parameters, x, z)[:, 0]
        raise ConfigError(f"cannot predict with main-effect kind {self.kind!r}")


def single_arm(data: TrialData) -> TrialData:
    """The same covariates and outcome with treatment ignored (one arm, centered y)."""
    return TrialData.create(data.y, np.ones(data.n, dtype=int), data.x, data.z, pi=[1.0])


def residualize(data: TrialData, kind: str = "lasso_scalar_summary", options: FitOptions | None = None,
                seed: int = 0, folds: int = 10, threads: int = 1) -> tuple[TrialData, MainEffectFit | None]:
    """Replace ``y`` by ``y - mu_hat(X, Z)``, re-centered within arms.

    ``lasso_scalar_summary`` regresses ``y`` on curve integrals and scalar
    covariates with a cross-validated lasso.  ``functional_additive`` fits
    an additive single-index model with one arm by the CFAM solver, its
    sparsity level chosen by cross-validation.
    """
    if kind not in RESIDUAL_KINDS:
        raise ConfigError(f"unknown residualization kind {kind!r}; expected one of {RESIDUAL_KINDS}")
    if kind == "none":
        return data, None
    if kind == "lasso_scalar_summary":
        F = scalar_summaries(data.x, data.z)
        lf = lasso_cv(F, data.y, folds=folds, seed=seed)
        mu = lf.predict(F)
        params = lf
    else:
        base = single_arm(data)
        opts = FitOptions() if options is None else options
        fitted, _ = fit_cv(base, folds=folds, options=opts, seed=seed, threads=threads)
        mu = component_values(fitted, base).sum(axis=1)
        params = fitted
    resid = data.y - mu
    mse = float(resid @ resid / data.n)
    return data.with_outcome(resid), MainEffectFit(kind, params, mse)


# ---------------------------------------------------------------------------
# end-to-end pipeline

AUGMENT_KINDS = {"none": "none", "lasso": "lasso_scalar_summary", "fam": "functional_additive"}


@dataclass(frozen=True)
class PipelineResult:
    """Fitted interaction model with the pieces needed to reproduce it."""

    fit: CfamFit
    report: CvReport | None
    main_effect: MainEffectFit | None
    data: TrialData  # the (possibly residualized) data the model was fitted to


def fit_pipeline(data: TrialData, augment: str = "lasso", linear_mode: bool = False, lam: float | None = None,
                 folds: int = 10, seed: int = 0, options: FitOptions | None = None, n_lambda: int = 20,
                 patience: int | None = CV_PATIENCE, cv_max_outer: int | None = CV_MAX_OUTER,
                 threads: int = 1) -> PipelineResult:
    """Residualize (``augment`` in none / lasso / fam), choose ``lam`` by CV unless given, and fit."""
    kind = AUGMENT_KINDS.get(augment, augment)
    opts = replace(options or FitOptions(), linear_mode=bool(linear_mode or (options and options.linear_mode)))
    work, main = residualize(data, kind, replace(opts, linear_mode=False), seed=seed, folds=folds, threads=threads)
    if lam is None:
        fitted, report = fit_cv(work, folds, opts, seed, n_lambda, patience, threads, cv_max_outer)
    else:
        if lam < 0:
            raise ConfigError("lambda must be nonnegative")
        fitted, report = fit_path(work, [float(lam)], opts)[0], None
    return PipelineResult(fitted, report, main, work)
