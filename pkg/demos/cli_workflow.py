"""Round trip through the command line: write a trial, fit, predict.

Run with ``python demos/cli_workflow.py [workdir]``.
"""
import csv
import sys
import tempfile
from pathlib import Path

import numpy as np

from cfam.cli import main
from cfam.io import table_from_trial, write_trial
from cfam.sim import Scenario, generate

root = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="cfam-demo-"))
sc = Scenario(n=300, p=4, q=4)
write_trial(root / "train", table_from_trial(generate(sc, np.random.default_rng(0)).data))
write_trial(root / "new", table_from_trial(generate(sc, np.random.default_rng(1)).data))
print("trial directories under", root)

assert main(["fit", "--data", str(root / "train"), "--out", str(root / "model"), "--seed", "3"]) == 0
assert main(["predict", "--model", str(root / "model" / "model.json"), "--data", str(root / "new"),
             "--out", str(root / "recommendations.csv")]) == 0

with open(root / "model" / "components.csv") as fh:
    for row in csv.DictReader(fh):
        print(f"{row['component']:>6}  active={row['active']}  shrinkage={float(row['shrinkage']):.3f}")
with open(root / "recommendations.csv") as fh:
    rows = list(csv.DictReader(fh))
arms = [r["recommended_arm"] for r in rows]
print({arm: arms.count(arm) for arm in sorted(set(arms))}, "recommendations for", len(rows), "new subjects")
