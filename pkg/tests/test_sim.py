import csv

import numpy as np
import pytest

from cfam.design import Grid
from cfam.errors import ConfigError
from cfam.sim import (
    COLUMNS, PRESETS, Scenario, TruthBundle, generate, preset, rse, run_experiment, selection_metrics, summarize,
)
from cfam.solver import fit
from cfam.tuning import lambda_max


def test_scenario_validation():
    with pytest.raises(ConfigError):
        Scenario(interaction_kind="quadratic")
    with pytest.raises(ConfigError):
        Scenario(p=1)
    assert Scenario(n=250, delta=2.0).scenario_id == "nonlinear_25_n250_p20_q20_d2_xi0"


def test_pure_interaction_outcome():
    sc = Scenario(n=4000, p=2, q=2, delta=0.0, noise_sd=0.0)
    sim = generate(sc, np.random.default_rng(0))
    d = sim.data
    x = [xj.values for xj in d.x]
    np.testing.assert_allclose(d.raw_y, sim.oracle.interaction(x, d.z, d.a), atol=1e-12)
    m1, m2 = d.raw_y[d.a == 1], d.raw_y[d.a == 2]
    se = np.sqrt(m1.var() / m1.size + m2.var() / m2.size)
    assert abs(m1.mean() - m2.mean()) < 4 * se


def test_scalar_correlation():
    sim = generate(Scenario(n=10, p=2, q=5), np.random.default_rng(1))
    _, z = sim.oracle.draw_covariates(np.random.default_rng(2), 100000)
    assert abs(np.corrcoef(z[:, 0], z[:, 2])[0, 1] - 0.25) < 0.01
    assert abs(np.corrcoef(z[:, 0], z[:, 1])[0, 1] - 0.5) < 0.01


def test_generate_deterministic():
    sc = Scenario(n=50, p=3, q=3, seed=5)
    a, b = generate(sc), generate(sc)
    np.testing.assert_array_equal(a.data.y, b.data.y)
    np.testing.assert_array_equal(a.data.z, b.data.z)
    np.testing.assert_array_equal(a.data.x[2].values, b.data.x[2].values)
    np.testing.assert_array_equal(a.truth.eta, b.truth.eta)
    assert not np.array_equal(generate(Scenario(n=50, p=3, q=3, seed=6)).data.y, a.data.y)


def test_noise_matches_oracle():
    sim = generate(Scenario(n=20000, p=2, q=2), np.random.default_rng(3))
    d = sim.data
    resid = d.raw_y - sim.oracle.mean([xj.values for xj in d.x], d.z, d.a)
    assert abs(resid.mean()) < 3 * 0.5 / np.sqrt(d.n)
    assert resid.std() == pytest.approx(0.5, abs=0.01)


def test_truth_functions_unit_norm_and_orthogonal():
    t = generate(Scenario(n=10, p=2, q=2), np.random.default_rng(0)).truth
    g = Grid.trapezoid(np.linspace(0, 1, 2001))
    b1, b2 = t.beta1_on(g.points), t.beta2_on(g.points)
    assert np.sum(g.weights * b1 * b1) == pytest.approx(1.0, abs=1e-6)
    assert abs(np.sum(g.weights * b1 * b2)) < 1e-6
    np.testing.assert_allclose(np.linalg.norm(t.eta, axis=1), 1.0)


def test_rse_examples():
    t = TruthBundle()
    assert rse(t.beta1_on, t.beta1_on) == 0.0
    s = np.linspace(0, 1, 201)
    assert rse(-t.beta1_on(s), t.beta1_on) == 0.0
    assert abs(rse(t.beta2_on(s), t.beta1_on) - np.sqrt(2)) < 1e-3


def test_rse_grid_refinement():
    t = TruthBundle()
    shifted = lambda s: t.beta1_on(s) + 0.3 * np.sin(3 * s)
    vals = [rse(shifted(np.linspace(0, 1, m)), t.beta1_on, Grid.trapezoid(np.linspace(0, 1, m)))
            for m in (201, 401, 1601)]
    assert max(vals) - min(vals) < 1e-3


def test_selection_metrics_extremes(sim_small):
    d = sim_small.data
    none = fit(d, 2 * lambda_max(d))
    assert selection_metrics(none, sim_small.truth) == (0.0, 0.0)
    every = fit(d, 0.0)
    assert every.active.all()
    assert selection_metrics(every, sim_small.truth) == (1.0, 1.0)


def test_presets():
    assert set(PRESETS) == {"table1", "table_s2", "figure1", "figure3", "appendix_a5"}
    t1 = preset("table1")
    assert [s.n for s in t1["grid"]] == [250, 500, 1000, 250, 500, 1000]
    assert t1["reps"] == 20 and t1["full_reps"] == 200
    assert all(s.p == s.q == 20 and s.grid_size == 50 for s in t1["grid"])
    with pytest.raises(ConfigError):
        preset("figure9")


def test_run_experiment_smoke_and_determinism(tmp_path):
    grid = [Scenario(n=100, p=2, q=2)]
    methods = ("cfam", "cfam_lin", "cfam_none")
    out = tmp_path / "res.csv"
    rows = run_experiment(grid, reps=1, methods=methods, out=out, seed=3, fit_kwargs={"folds": 5})
    got = {r[1] for r in rows}
    assert got == set(methods) | {"truth"}
    for m in methods:
        mets = {r[6]: r[7] for r in rows if r[1] == m}
        assert mets["failed"] == 0.0
        assert mets["constraint"] < 1e-8
        assert mets["regret"] <= 1e-12
        assert mets["regret_normalized"] == pytest.approx(mets["regret"] / mets["optimal_value"])
    with open(out) as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == COLUMNS and len(table) == len(rows) + 1
    again = run_experiment(grid, reps=1, methods=methods, seed=3, fit_kwargs={"folds": 5})
    assert again == rows
    par = run_experiment(grid, reps=1, methods=methods, seed=3, threads=2, fit_kwargs={"folds": 5})
    assert par == rows
    other = run_experiment(grid, reps=1, methods=("cfam",), seed=4, fit_kwargs={"folds": 5})
    assert other != [r for r in rows if r[1] in ("cfam", "truth")]


def test_run_experiment_records_failures():
    rows = run_experiment([Scenario(n=20, p=2, q=2)], reps=1, methods=("cfam",), fit_kwargs={"folds": 25})
    mets = {r[6]: r[7] for r in rows if r[1] == "cfam"}
    assert mets == {"failed": 1.0}


def test_run_experiment_errors():
    with pytest.raises(ConfigError):
        run_experiment([Scenario(n=50, p=2, q=2)], reps=1, methods=("owl",))
    with pytest.raises(ConfigError):
        run_experiment([Scenario(n=50, p=2, q=2)], reps=0)


def test_summarize():
    rows = [("s", "m", r, 1, 1.0, 0.0, "rse", float(r)) for r in range(4)]
    mean, se, k = summarize(rows, "rse")[("s", "m")]
    assert (mean, k) == (1.5, 4)
    assert se == pytest.approx(np.std([0, 1, 2, 3], ddof=1) / 2)
