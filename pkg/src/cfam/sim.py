"""Simulation scenarios, ground truth and accuracy metrics.

Two generators are provided.  ``nonlinear_25`` draws

    Y = eps + delta * {sum_{j<=8} sin<eta_j, X_j> + sum_{k<=8} sin Z_k}
        + 4 (A - 1.5) [sin<b1, X1> - sin<b2, X2> + cos Z1 - cos Z2
                       + xi {cos<X1, X2> + sin(Z1 Z2)}]

and ``linear_s12`` replaces the bracket by its linear analogue (every term
divided by 1.5, sines/cosines dropped).  Curves are ``Phi(s) @ x_tilde`` with
a four-term Fourier system ``Phi`` and standard normal ``x_tilde``.
"""
from __future__ import annotations

import csv
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import fourier4
from .design import FunctionalCovariate, Grid, TrialData
from .errors import ConfigError

log = logging.getLogger(__name__)

BETA1 = np.array([0.5, 0.5, 0.5, 0.5])
BETA2 = np.array([0.5, -0.5, 0.5, -0.5])
N_MAIN = 8
TRUE_MODIFIERS = frozenset({"X1", "X2", "Z1", "Z2"})
KINDS = ("nonlinear_25", "linear_s12")


@dataclass(frozen=True)
class Scenario:
    n: int = 500
    p: int = 20
    q: int = 20
    delta: float = 1.0
    xi: float = 0.0
    interaction_kind: str = "nonlinear_25"
    grid_size: int = 50
    noise_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.interaction_kind not in KINDS:
            raise ConfigError(f"unknown interaction kind {self.interaction_kind!r}")
        if self.n < 2 or self.grid_size < 2:
            raise ConfigError("scenario needs n >= 2 and grid_size >= 2")
        if self.p < 2 or self.q < 2:
            raise ConfigError("the generators use X1, X2, Z1, Z2: need p >= 2 and q >= 2")
        if self.delta < 0 or self.noise_sd < 0:
            raise ConfigError("delta and noise_sd must be nonnegative")

    @property
    def scenario_id(self) -> str:
        return (f"{self.interaction_kind}_n{self.n}_p{self.p}_q{self.q}"
                f"_d{self.delta:g}_xi{self.xi:g}")


@dataclass(frozen=True)
class TruthBundle:
    """Fourier coefficients of the true coefficient functions."""

    beta1: np.ndarray = field(default_factory=lambda: BETA1.copy())
    beta2: np.ndarray = field(default_factory=lambda: BETA2.copy())
    eta: np.ndarray = None  # (8, 4), unit rows
    true_modifiers: frozenset = TRUE_MODIFIERS

    def beta1_on(self, s) -> np.ndarray:
        return fourier4(s) @ self.beta1

    def beta2_on(self, s) -> np.ndarray:
        return fourier4(s) @ self.beta2


class ScenarioOracle:
    """Covariate sampler and exact conditional mean for one scenario and truth."""

    def __init__(self, scenario: Scenario, truth: TruthBundle):
        self.scenario = scenario
        self.truth = truth
        self.grid = Grid.uniform(scenario.grid_size)
        self._phi = fourier4(self.grid.points)  # (r, 4)
        w = self.grid.weights
        self._beta1 = self._phi @ truth.beta1
        self._beta2 = self._phi @ truth.beta2
        self._eta = truth.eta @ self._phi.T   # (8, r)
        self._w = w
        cov = 0.5 ** np.abs(np.subtract.outer(np.arange(scenario.q), np.arange(scenario.q)))
        self._chol = np.linalg.cholesky(cov)

    @property
    def L(self) -> int:
        return 2

    def draw_covariates(self, rng: np.random.Generator, n: int):
        sc = self.scenario
        coefs = rng.standard_normal((sc.p, n, 4))
        x = [coefs[j] @ self._phi.T for j in range(sc.p)]
        z = rng.standard_normal((n, sc.q)) @ self._chol.T
        return x, z

    def _ip(self, x, f):
        return (x * self._w) @ f

    def main_effect(self, x, z) -> np.ndarray:
        total = np.zeros(z.shape[0])
        for j in range(min(N_MAIN, len(x))):
            total += np.sin(self._ip(x[j], self._eta[j]))
        total += np.sin(z[:, :N_MAIN]).sum(axis=1)
        return self.scenario.delta * total

    def contrast(self, x, z) -> np.ndarray:
        """Bracketed term multiplying ``4 (A - 1.5)``."""
        sc = self.scenario
        u1 = self._ip(x[0], self._beta1)
        u2 = self._ip(x[1], self._beta2)
        x12 = np.einsum("ij,ij->i", x[0] * self._w, x[1])
        z1, z2 = z[:, 0], z[:, 1]
        if sc.interaction_kind == "nonlinear_25":
            out = np.sin(u1) - np.sin(u2) + np.cos(z1) - np.cos(z2)
            if sc.xi:
                out = out + sc.xi * (np.cos(x12) + np.sin(z1 * z2))
            return out
        out = (u1 - u2 + z1 - z2) / 1.5
        if sc.xi:
            out = out + sc.xi * (x12 + z1 * z2) / 1.5
        return out

    def interaction(self, x, z, a) -> np.ndarray:
        return 4.0 * (np.asarray(a, float) - 1.5) * self.contrast(x, z)

    def mean(self, x, z, a) -> np.ndarray:
        """E[Y | x, z, a]."""
        a = np.broadcast_to(np.asarray(a), (z.shape[0],))
        return self.main_effect(x, z) + self.interaction(x, z, a)

    def optimal_arm(self, x, z) -> np.ndarray:
        # arm 2 iff the contrast is positive; ties go to arm 1
        return np.where(self.contrast(x, z) > 0, 2, 1)

    __call__ = mean


@dataclass
class SimulatedTrial:
    data: TrialData
    truth: TruthBundle
    oracle: ScenarioOracle


def draw_truth(rng: np.random.Generator) -> TruthBundle:
    eta = rng.standard_normal((N_MAIN, 4))
    eta /= np.linalg.norm(eta, axis=1, keepdims=True)
    return TruthBundle(eta=eta)


def generate(scenario: Scenario, rng: np.random.Generator | None = None) -> SimulatedTrial:
    """Draw one training sample with its truth and conditional-mean oracle.

    Randomness comes from ``rng`` when given, otherwise from
    ``scenario.seed``.  Main-effect coefficient functions are drawn first,
    then covariates, arms and noise.
    """
    rng = rng if rng is not None else np.random.default_rng(scenario.seed)
    truth = draw_truth(rng)
    oracle = ScenarioOracle(scenario, truth)
    x, z = oracle.draw_covariates(rng, scenario.n)
    a = rng.integers(1, 3, size=scenario.n)
    eps = scenario.noise_sd * rng.standard_normal(scenario.n)
    y = oracle.mean(x, z, a) + eps
    covs = [FunctionalCovariate(xj, oracle.grid) for xj in x]
    data = TrialData.create(y, a, covs, z, pi=[0.5, 0.5])
    return SimulatedTrial(data, truth, oracle)


def rse(beta_hat, beta_true, grid=None) -> float:
    """Root squared L2 distance, minimized over the sign of the estimate.

    ``beta_hat`` is an object with ``values(s)``, a callable or an array of
    values on ``grid``; ``beta_true`` is a callable or an array of values on ``grid``
    (default: trapezoidal rule on 201 uniform points of [0, 1]).
    """
    grid = grid if grid is not None else Grid.trapezoid(np.linspace(0.0, 1.0, 201))
    s = grid.points
    if hasattr(beta_hat, "values"):
        bh = beta_hat.values(s)
    else:
        bh = beta_hat(s) if callable(beta_hat) else np.asarray(beta_hat, float)
    bt = beta_true(s) if callable(beta_true) else np.asarray(beta_true, float)
    w = grid.weights
    plus = np.sqrt(np.sum(w * (bh - bt) ** 2))
    minus = np.sqrt(np.sum(w * (bh + bt) ** 2))
    return float(min(plus, minus))


def selection_metrics(fitted, truth: TruthBundle | None = None) -> tuple[float, float]:
    """True- and false-positive rates of the active component set."""
    modifiers = truth.true_modifiers if truth is not None else TRUE_MODIFIERS
    names = fitted.component_names
    active = {nm for nm, on in zip(names, fitted.active) if on}
    n_true = len([nm for nm in names if nm in modifiers])
    n_noise = len(names) - n_true
    tpr = len(active & modifiers) / n_true if n_true else 0.0
    fpr = len(active - modifiers) / n_noise if n_noise else 0.0
    return tpr, fpr


# ---------------------------------------------------------------------------
# experiments

# method name -> (augmentation, linear_mode)
METHODS = {
    "cfam": ("lasso", False),
    "cfam_mu": ("fam", False),
    "cfam_lin": ("lasso", True),
    "cfam_none": ("none", False),
}
N_TEST = 1000
COLUMNS = ("scenario_id", "method", "rep", "n", "delta", "xi", "metric", "value")


def _grid(kind="nonlinear_25", ns=(500,), deltas=(1.0,), xis=(0.0,)) -> list[Scenario]:
    return [Scenario(n=n, delta=d, xi=x, interaction_kind=kind) for x in xis for d in deltas for n in ns]


PRESETS = {
    "table1": dict(grid=_grid(ns=(250, 500, 1000), deltas=(1.0, 2.0)), methods=("cfam",), reps=20, full_reps=200),
    "table_s2": dict(grid=_grid(ns=(250, 500, 1000), deltas=(1.0, 2.0)), methods=("cfam", "cfam_mu"),
                     reps=20, full_reps=200),
    "figure1": dict(grid=_grid(ns=(250, 500), deltas=(1.0, 2.0), xis=(0.0, 1.0)), methods=("cfam", "cfam_lin"),
                    reps=20, full_reps=200),
    "figure3": dict(grid=_grid(ns=(50, 100, 200, 300, 400, 500, 600, 700, 800), deltas=(1.0, 2.0), xis=(0.0, 1.0)),
                    methods=("cfam", "cfam_lin"), reps=20, full_reps=200),
    "appendix_a5": dict(grid=_grid("linear_s12", ns=(250, 500), deltas=(1.0, 2.0), xis=(0.0, 1.0)),
                        methods=("cfam", "cfam_lin"), reps=20, full_reps=200),
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return dict(PRESETS[name])


def _scenario_key(scenario: Scenario) -> int:
    return zlib.crc32(scenario.scenario_id.encode())


def rep_seeds(scenario: Scenario, rep: int, master_seed: int):
    """Independent (data, test, cv) seed sequences for one replication.

    They depend only on the scenario, the replication index and the master
    seed, so every method sees the same training and test draws.
    """
    root = np.random.SeedSequence([int(master_seed), _scenario_key(scenario), int(scenario.seed), int(rep)])
    return root.spawn(3)


def _metric_rows(scenario: Scenario, method: str, rep: int, metrics: dict) -> list[tuple]:
    return [(scenario.scenario_id, method, rep, scenario.n, scenario.delta, scenario.xi, k, float(v))
            for k, v in metrics.items()]


def run_replication(scenario: Scenario, rep: int, methods, master_seed: int = 0, n_test: int = N_TEST,
                    fit_kwargs: dict | None = None) -> list[tuple]:
    """Rows for one (scenario, replication): truth draws plus every method's metrics."""
    from .itr import Rule, value_monte_carlo
    from .solver import constraint_violation
    from .tuning import fit_pipeline

    data_ss, test_ss, cv_ss = rep_seeds(scenario, rep, master_seed)
    sim = generate(scenario, np.random.default_rng(data_ss))
    cv_seed = int(cv_ss.generate_state(1)[0])
    truth = {f"eta_{j + 1}_{l + 1}": sim.truth.eta[j, l] for j in range(N_MAIN) for l in range(4)}
    rows = _metric_rows(scenario, "truth", rep, truth)
    for method in methods:
        augment, linear = METHODS[method]
        try:
            res = fit_pipeline(sim.data, augment=augment, linear_mode=linear, seed=cv_seed, **(fit_kwargs or {}))
            fitted = res.fit
            v = value_monte_carlo(Rule(fitted), sim.oracle, n_test, test_ss)
            tpr, fpr = selection_metrics(fitted, sim.truth)
            metrics = {
                "regret": v.regret,
                "regret_normalized": v.regret / v.optimal_value,
                "value": v.value,
                "optimal_value": v.optimal_value,
                "rse_beta1": rse(fitted.betas[0], sim.truth.beta1_on),
                "rse_beta2": rse(fitted.betas[1], sim.truth.beta2_on),
                "tpr": tpr,
                "fpr": fpr,
                "lambda": fitted.lam,
                "n_active": int(fitted.active.sum()),
                "converged": float(fitted.converged),
                "constraint": constraint_violation(fitted, res.data),
                "failed": 0.0,
            }
        except Exception as exc:  # one failed replication must not sink the experiment
            log.warning("%s rep %d method %s failed: %s", scenario.scenario_id, rep, method, exc)
            metrics = {"failed": 1.0}
        rows += _metric_rows(scenario, method, rep, metrics)
    return rows


def _task(args):
    return run_replication(*args)


def run_experiment(grid, reps: int = 20, methods=("cfam",), out=None, seed: int = 0, threads: int = 1,
                   n_test: int = N_TEST, fit_kwargs: dict | None = None) -> list[tuple]:
    """Run every (scenario, replication, method) and return tidy rows.

    Rows are ``(scenario_id, method, rep, n, delta, xi, metric, value)``,
    sorted, and optionally written to ``out`` as CSV.  Replications run on
    ``threads`` worker processes; the output does not depend on it.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {unknown}; expected some of {sorted(METHODS)}")
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    tasks = [(sc, r, tuple(methods), seed, n_test, fit_kwargs) for sc in grid for r in range(reps)]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_task, tasks))
    else:
        chunks = [_task(t) for t in tasks]
    rows = sorted((row for chunk in chunks for row in chunk), key=lambda r: (r[0], r[1], r[2], r[6]))
    if out is not None:
        write_rows(rows, out)
    return rows


def write_rows(rows, out) -> Path:
    out = Path(out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for row in rows:
            w.writerow(row[:7] + (repr(row[7]),))
    return out


def summarize(rows, metric: str) -> dict:
    """Mean and standard error of ``metric`` per (scenario_id, method), skipping failed reps."""
    groups: dict = {}
    for sid, method, _, _, _, _, m, v in rows:
        if m == metric and np.isfinite(v):
            groups.setdefault((sid, method), []).append(v)
    out = {}
    for key, vals in groups.items():
        vals = np.asarray(vals)
        se = vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else np.nan
        out[key] = (float(vals.mean()), float(se), int(vals.size))
    return out
