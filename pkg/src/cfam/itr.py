"""Individualized treatment rules derived from a fitted CFAM, and their values."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import TrialData
from .errors import NoOverlapError
from .solver import CfamFit, interaction_scores


@dataclass(frozen=True)
class Rule:
    """Decision map ``x, z -> argmax_a`` of the fitted interaction effect."""

    fit: CfamFit

    @property
    def L(self) -> int:
        return self.fit.L

    def scores(self, x_new, z_new=None) -> np.ndarray:
        return interaction_scores(self.fit, x_new, z_new)


@dataclass(frozen=True)
class ValueEstimate:
    """Estimated mean outcome under a rule.

    For Monte Carlo estimates ``optimal_value`` and ``regret`` compare with
    the generator's own optimal rule on the same draws, and ``se`` /
    ``regret_se`` are Monte Carlo standard errors.
    """

    value: float
    method: str
    n_effective: float | None = None
    n_mc: int | None = None
    se: float | None = None
    optimal_value: float | None = None
    regret: float | None = None
    regret_se: float | None = None


def decide(rule: Rule, x_new, z_new=None) -> np.ndarray:
    """Recommended arm (1-based) per subject; exact ties go to the lowest arm."""
    scores = rule.scores(x_new, z_new)
    # argmax returns the first maximal column, i.e. the smallest arm label
    return np.argmax(scores, axis=1) + 1


def _arms(rule, x, z) -> np.ndarray:
    return decide(rule, x, z) if isinstance(rule, Rule) else np.asarray(rule(x, z), dtype=int)


def value_ipw(rule, test: TrialData) -> ValueEstimate:
    """Ratio estimator: mean raw outcome among subjects whose arm agrees with the rule.

    ``rule`` is a :class:`Rule` or any callable ``(x, z) -> arms``.
    """
    if test.n == 0:
        raise NoOverlapError("empty test set")
    agree = _arms(rule, test.x, test.z) == test.a
    k = int(agree.sum())
    if k == 0:
        raise NoOverlapError("no test subject received the recommended arm")
    return ValueEstimate(float(test.raw_y[agree].sum() / k), "ipw", n_effective=float(k))


def mc_generator(seed) -> np.random.Generator:
    """Counter-based stream, so a draw depends only on its seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def value_monte_carlo(rule, oracle, n_mc: int = 1000, seed=0) -> ValueEstimate:
    """Value of ``rule`` under a known generator, averaged over ``n_mc`` fresh covariate draws.

    ``rule`` is a :class:`Rule` or any callable ``(x, z) -> arms``; ``oracle``
    provides ``draw_covariates``, ``mean`` and ``optimal_arm`` (see
    :class:`cfam.sim.ScenarioOracle`).
    """
    if n_mc < 2:
        raise ValueError("n_mc must be at least 2")
    x, z = oracle.draw_covariates(mc_generator(seed), n_mc)
    if isinstance(rule, Rule):
        grids = rule.fit.grids
        if len(grids) != len(x):
            raise ValueError(f"rule expects {len(grids)} functional covariates, generator has {len(x)}")
    arms = _arms(rule, x, z)
    got = oracle.mean(x, z, arms)
    best = oracle.mean(x, z, oracle.optimal_arm(x, z))
    gap = got - best
    root = np.sqrt(n_mc)
    return ValueEstimate(
        value=float(got.mean()),
        method="monte_carlo",
        n_mc=int(n_mc),
        se=float(got.std(ddof=1) / root),
        optimal_value=float(best.mean()),
        regret=float(gap.mean()),
        regret_se=float(gap.std(ddof=1) / root),
    )
