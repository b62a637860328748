"""Fit a CFAM to one simulated two-arm trial and look at what it learned.

Run with ``python demos/simulated_trial.py``; takes a few seconds.
"""
import numpy as np

from cfam import Rule, decide, fit_pipeline, value_ipw, value_monte_carlo
from cfam.sim import Scenario, generate, rse

sc = Scenario(n=500, delta=1.0)
sim = generate(sc, np.random.default_rng(11))
test = generate(Scenario(n=2000, delta=1.0), np.random.default_rng(12)).data

res = fit_pipeline(sim.data, augment="lasso", seed=0)
f = res.fit
print(f"chosen lambda {f.lam:.4f} after {f.outer_iterations} alternations (converged={f.converged})")

names = [f"X{j + 1}" for j in range(sim.data.p)] + [f"Z{k + 1}" for k in range(sim.data.q)]
active = [nm for nm, on in zip(names, f.active) if on]
print("active components:", ", ".join(active))

beta1 = f.functional[0][0]
print(f"RSE of the first coefficient function: {rse(beta1, sim.truth.beta1_on):.3f}")

# the learned rule against the generator's optimal rule on fresh covariates
x, z = sim.oracle.draw_covariates(np.random.default_rng(13), 5000)
agree = np.mean(decide(Rule(f), x, z) == sim.oracle.optimal_arm(x, z))
mc = value_monte_carlo(Rule(f), sim.oracle, 5000, seed=14)
print(f"agreement with optimal rule {agree:.3f}; regret {mc.regret:.3f} (se {mc.regret_se:.3f})")

# the same rule scored on a held-out trial, as one would without an oracle
print(f"IPW value on held-out trial {value_ipw(Rule(f), test).value:.3f}")
