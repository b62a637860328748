"""CSV trial directories, run configurations and versioned model artifacts.

A trial directory holds

* ``outcome.csv`` with columns ``id, y, a`` (``y`` optional for prediction),
* ``scalars.csv`` with ``id`` followed by one column per scalar covariate,
* ``functional_<name>.csv`` per functional covariate: the first row is
  ``grid, s_1, ..., s_r`` and every further row is ``id, x(s_1), ..., x(s_r)``.

Arm labels may be any integers; they are mapped to ``1..L`` in sorted order
and the original labels are kept for output.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .basis import OrthonormalSplineBasis, basis_from_dict
from .design import FunctionalCovariate, Grid, TrialData
from .errors import ConfigError, DataError
from .solver import CfamFit, ComponentFit, FitOptions, IndexCoefficient
from .tuning import CvReport, LassoFit, MainEffectFit, PipelineResult

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FORMAT_NAME = "cfam-model"


# ---------------------------------------------------------------------------
# trial directories


@dataclass(frozen=True)
class TrialTable:
    """Covariates (and possibly outcomes) read from a trial directory."""

    ids: list
    x: list                 # FunctionalCovariate per functional name
    z: np.ndarray
    functional_names: list
    scalar_names: list
    y: np.ndarray | None = None
    arms: np.ndarray | None = None  # original labels

    @property
    def n(self) -> int:
        return len(self.ids)

    def arm_labels(self) -> list[int]:
        return sorted(set(int(v) for v in self.arms))

    def to_trial(self, pi="uniform", arm_labels=None) -> TrialData:
        """Trial data with arms mapped to ``1..L`` through ``arm_labels`` (default: sorted labels)."""
        if self.y is None or self.arms is None:
            raise DataError("outcome.csv: outcomes and arms are required for fitting")
        labels = self.arm_labels() if arm_labels is None else list(arm_labels)
        if len(labels) < 2:
            raise DataError(f"outcome.csv: column a: need at least 2 treatment arms, found {labels}")
        lookup = {lab: i + 1 for i, lab in enumerate(labels)}
        unknown = sorted(set(int(v) for v in self.arms) - set(lookup))
        if unknown:
            raise DataError(f"outcome.csv: column a: arm labels {unknown} not in {labels}")
        a = np.array([lookup[int(v)] for v in self.arms])
        if isinstance(pi, str):
            return TrialData.create(self.y, a, self.x, self.z, pi=pi)
        pi = np.asarray(pi, dtype=float)
        if pi.size != len(labels):
            raise ConfigError(f"pi has {pi.size} entries but the data have {len(labels)} arms")
        return TrialData.create(self.y, a, self.x, self.z, pi=pi)


def _read_rows(path: Path) -> list[list[str]]:
    try:
        with open(path, newline="") as fh:
            return [row for row in csv.reader(fh) if any(cell.strip() for cell in row)]
    except OSError as exc:
        raise DataError(f"{path.name}: cannot read ({exc.strerror})") from None


def _number(text: str, problems: list, where: str) -> float:
    try:
        v = float(text)
    except ValueError:
        problems.append(f"{where}: not a number: {text.strip()!r}")
        return math.nan
    if not math.isfinite(v):
        problems.append(f"{where}: non-finite value {text.strip()!r}")
    return v


def _table(path: Path, problems: list, first_label: str | None = "id"):
    """Header and ``{id: (row number, values)}`` of a numeric CSV keyed by its first column."""
    rows = _read_rows(path)
    if not rows:
        problems.append(f"{path.name}: empty file")
        return [], {}
    header = [h.strip() for h in rows[0]]
    if first_label is not None and header[0].lower() != first_label:
        problems.append(f"{path.name}: row 1: first column must be {first_label!r}, found {header[0]!r}")
    body = {}
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            problems.append(f"{path.name}: row {i}: expected {len(header)} columns, found {len(row)}")
            continue
        key = row[0].strip()
        if key in body:
            problems.append(f"{path.name}: row {i}: duplicate id {key!r}")
            continue
        vals = [_number(c, problems, f"{path.name}: row {i}, column {header[c_i + 1]!r}")
                for c_i, c in enumerate(row[1:])]
        body[key] = (i, vals)
    return header, body


def _raise(problems: list):
    if problems:
        shown = problems[:20]
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        raise DataError(f"{len(problems)} input problem(s): " + "; ".join(shown) + more)


def read_trial(directory, require_outcome: bool = True) -> TrialTable:
    """Read a trial directory; every problem found is reported in one :class:`DataError`."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    problems: list[str] = []
    out_path = directory / "outcome.csv"
    ids = None
    y = arms = None
    if out_path.exists():
        header, body = _table(out_path, problems)
        cols = [h.lower() for h in header]
        if "a" not in cols or (require_outcome and "y" not in cols):
            problems.append(f"outcome.csv: row 1: columns must be id, y, a; found {header}")
        else:
            ids = list(body)
            ai = cols.index("a") - 1
            a_vals = np.array([body[k][1][ai] for k in ids])
            for k in ids:
                v = body[k][1][ai]
                if math.isfinite(v) and v != int(v):
                    problems.append(f"outcome.csv: row {body[k][0]}, column 'a': arm label {v} is not an integer")
            arms = np.where(np.isfinite(a_vals), a_vals, 0).astype(int)
            if "y" in cols:
                y = np.array([body[k][1][cols.index("y") - 1] for k in ids])
    elif require_outcome:
        problems.append("outcome.csv: file not found")

    x, fnames = [], []
    for path in sorted(directory.glob("functional_*.csv")):
        name = path.stem[len("functional_"):]
        rows = _read_rows(path)
        if len(rows) < 2:
            problems.append(f"{path.name}: needs a grid row and at least one subject row")
            continue
        header, body = _table(path, problems, first_label=None)
        grid_pts = [_number(c, problems, f"{path.name}: row 1, column {j + 2}") for j, c in enumerate(header[1:])]
        try:
            grid = Grid(np.array(grid_pts))
        except (ConfigError, DataError, ValueError) as exc:
            problems.append(f"{path.name}: row 1: invalid grid ({exc})")
            continue
        if ids is None:
            ids = list(body)
        missing = [k for k in ids if k not in body]
        extra = [k for k in body if k not in set(ids)]
        if missing:
            problems.append(f"{path.name}: missing id(s) {missing[:5]}")
        if extra:
            problems.append(f"{path.name}: row {body[extra[0]][0]}: id {extra[0]!r} not in outcome.csv")
        if missing or extra:
            continue
        x.append(FunctionalCovariate(np.array([body[k][1] for k in ids]), grid) if not problems else None)
        fnames.append(name)

    z_path = directory / "scalars.csv"
    z, snames = None, []
    if z_path.exists():
        header, body = _table(z_path, problems)
        snames = header[1:]
        if ids is None:
            ids = list(body)
        missing = [k for k in ids if k not in body]
        extra = [k for k in body if k not in set(ids)]
        if missing:
            problems.append(f"scalars.csv: missing id(s) {missing[:5]}")
        if extra:
            problems.append(f"scalars.csv: row {body[extra[0]][0]}: id {extra[0]!r} not in the other files")
        if not (missing or extra):
            z = np.array([body[k][1] for k in ids], dtype=float).reshape(len(ids), len(snames))
    if ids is None:
        problems.append(f"{directory}: no outcome.csv, functional_*.csv or scalars.csv found")
    _raise(problems)
    n = len(ids)
    if n == 0:
        raise DataError(f"{directory}: no subjects")
    return TrialTable(ids, x, np.zeros((n, 0)) if z is None else z, fnames, snames, y, arms)


def _fmt(v) -> str:
    return repr(float(v))


def write_trial(directory, table: TrialTable):
    """Write a :class:`TrialTable` in the trial-directory layout (floats round-trip exactly)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if table.arms is not None:
        with open(directory / "outcome.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "y", "a"] if table.y is not None else ["id", "a"])
            for i, key in enumerate(table.ids):
                row = [key] + ([_fmt(table.y[i])] if table.y is not None else []) + [int(table.arms[i])]
                w.writerow(row)
    for name, xj in zip(table.functional_names, table.x):
        with open(directory / f"functional_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid"] + [_fmt(s) for s in xj.grid.points])
            for key, row in zip(table.ids, xj.values):
                w.writerow([key] + [_fmt(v) for v in row])
    if table.scalar_names:
        with open(directory / "scalars.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + list(table.scalar_names))
            for key, row in zip(table.ids, table.z):
                w.writerow([key] + [_fmt(v) for v in row])


def table_from_trial(data: TrialData, ids=None, arm_labels=None) -> TrialTable:
    """Wrap in-memory trial data (raw outcomes) for :func:`write_trial`."""
    ids = [str(i + 1) for i in range(data.n)] if ids is None else list(ids)
    labels = list(range(1, data.L + 1)) if arm_labels is None else list(arm_labels)
    arms = np.array([labels[a - 1] for a in data.a])
    return TrialTable(ids, list(data.x), data.z, [f"x{j + 1}" for j in range(data.p)],
                      [f"z{k + 1}" for k in range(data.q)], data.raw_y, arms)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Settings shared by the command-line subcommands; ``None`` means "choose automatically"."""

    lam: float | None = None
    folds: int = 10
    n_lambda: int = 20
    seed: int = 0
    threads: int = 1
    augment: str = "lasso"
    linear_mode: bool = False
    pi: str | list = "uniform"
    dim: int | None = None
    beta_dim: int | None = None
    tol: float = 1e-4
    max_outer: int = 50
    inner_tol: float = 1e-6
    max_inner: int = 100
    cv_max_outer: int | None = 5
    patience: int | None = 3
    preset: str | None = None
    reps: int | None = None
    methods: list | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lam is not None and not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError(f"lambda must be a nonnegative number, got {self.lam}")
        if self.folds < 2:
            raise ConfigError(f"folds must be at least 2, got {self.folds}")
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")
        if self.augment not in ("none", "lasso", "fam"):
            raise ConfigError(f"augment must be none, lasso or fam, got {self.augment!r}")
        if self.n_lambda < 2:
            raise ConfigError("n_lambda must be at least 2")
        if isinstance(self.pi, str) and self.pi not in ("uniform", "empirical"):
            raise ConfigError(f"pi must be 'uniform', 'empirical' or a list of probabilities, got {self.pi!r}")
        if self.reps is not None and self.reps < 1:
            raise ConfigError("reps must be at least 1")

    def fit_options(self) -> FitOptions:
        return FitOptions(dim=self.dim, beta_dim=self.beta_dim, tol=self.tol, max_outer=self.max_outer,
                          inner_tol=self.inner_tol, max_inner=self.max_inner, linear_mode=self.linear_mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read configuration ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: configuration must be a JSON object")
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# model artifacts


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _component_dict(c: ComponentFit) -> dict:
    return {"theta": _arr(c.theta), "shrinkage": float(c.shrinkage), "offset": _arr(c.offset),
            "basis": c.basis.to_dict()}


def _component_from(d: dict) -> ComponentFit:
    return ComponentFit(np.array(d["theta"], dtype=float), float(d["shrinkage"]), basis_from_dict(d["basis"]),
                        np.array(d["offset"], dtype=float))


def fit_to_dict(f: CfamFit) -> dict:
    return {
        "lam": float(f.lam),
        "pi": _arr(f.pi),
        "grids": [{"points": _arr(g.points), "weights": _arr(g.weights)} for g in f.grids],
        "options": asdict(f.options),
        "functional": [{"gamma": _arr(b.gamma), "beta_dim": int(b.basis.dim), "sign_anchor": b.sign_anchor,
                        "flat": bool(b.flat), "component": _component_dict(c)} for b, c in f.functional],
        "scalar": [_component_dict(c) for c in f.scalar],
        "outer_iterations": int(f.outer_iterations),
        "converged": bool(f.converged),
        "inner_converged": bool(f.inner_converged),
    }


def fit_from_dict(d: dict) -> CfamFit:
    bases = {}
    functional = []
    for item in d["functional"]:
        dim = int(item["beta_dim"])
        if dim not in bases:
            bases[dim] = OrthonormalSplineBasis(dim)
        anchor = item["sign_anchor"]
        beta = IndexCoefficient(np.array(item["gamma"], dtype=float), bases[dim],
                                None if anchor is None else int(anchor), bool(item["flat"]))
        functional.append((beta, _component_from(item["component"])))
    grids = tuple(Grid(np.array(g["points"], dtype=float), np.array(g["weights"], dtype=float)) for g in d["grids"])
    return CfamFit(tuple(functional), tuple(_component_from(c) for c in d["scalar"]), float(d["lam"]),
                   np.array(d["pi"], dtype=float), grids, FitOptions(**d["options"]),
                   int(d["outer_iterations"]), bool(d["converged"]), bool(d["inner_converged"]))


def _main_to_dict(m: MainEffectFit | None):
    if m is None:
        return None
    if m.kind == "lasso_scalar_summary":
        p = m.parameters
        params = {"intercept": float(p.intercept), "coef": _arr(p.coef), "lam": float(p.lam)}
    else:
        params = fit_to_dict(m.parameters)
    return {"kind": m.kind, "training_mse": float(m.training_mse), "parameters": params}


def _main_from_dict(d):
    if d is None:
        return None
    p = d["parameters"]
    if d["kind"] == "lasso_scalar_summary":
        params = LassoFit(float(p["intercept"]), np.array(p["coef"], dtype=float), float(p["lam"]))
    elif d["kind"] == "functional_additive":
        params = fit_from_dict(p)
    else:
        raise DataError(f"model artifact: unknown main-effect kind {d['kind']!r}")
    return MainEffectFit(d["kind"], params, float(d["training_mse"]))


@dataclass(frozen=True)
class ModelArtifact:
    """Everything needed to score new subjects with a fitted model."""

    fit: CfamFit
    arm_labels: list
    functional_names: list
    scalar_names: list
    main_effect: MainEffectFit | None = None
    report: CvReport | None = None
    config: dict | None = None

    @classmethod
    def from_pipeline(cls, result: PipelineResult, table: TrialTable, config: RunConfig | None = None):
        return cls(result.fit, table.arm_labels(), list(table.functional_names), list(table.scalar_names),
                   result.main_effect, result.report, None if config is None else config.to_dict())

    def to_dict(self) -> dict:
        rep = None
        if self.report is not None:
            r = self.report
            rep = {"lambdas": _arr(r.lambdas), "cv_error": _arr(r.cv_error), "cv_se": _arr(r.cv_se),
                   "chosen": int(r.chosen), "fold_error": _arr(r.fold_error), "folds": np.asarray(r.folds).tolist()}
        return {
            "format": FORMAT_NAME,
            "schema_version": SCHEMA_VERSION,
            "arm_labels": [int(v) for v in self.arm_labels],
            "functional_names": list(self.functional_names),
            "scalar_names": list(self.scalar_names),
            "fit": fit_to_dict(self.fit),
            "main_effect": _main_to_dict(self.main_effect),
            "cv": rep,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArtifact":
        if not isinstance(d, dict) or d.get("format") != FORMAT_NAME:
            raise DataError("model artifact: not a cfam model file")
        version = d.get("schema_version")
        if not isinstance(version, int):
            raise DataError("model artifact: missing schema_version")
        if version > SCHEMA_VERSION:
            raise DataError(f"model artifact: schema_version {version} is newer than supported ({SCHEMA_VERSION}); "
                            "upgrade the package to read it")
        if version < 1:
            raise DataError(f"model artifact: invalid schema_version {version}")
        try:
            rep = None
            if d.get("cv") is not None:
                c = d["cv"]
                rep = CvReport(np.array(c["lambdas"]), np.array(c["cv_error"]), np.array(c["cv_se"]),
                               int(c["chosen"]), np.array(c["fold_error"]), np.array(c["folds"], dtype=int))
            return cls(fit_from_dict(d["fit"]), list(d["arm_labels"]), list(d["functional_names"]),
                       list(d["scalar_names"]), _main_from_dict(d.get("main_effect")), rep, d.get("config"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"model artifact: malformed content ({type(exc).__name__}: {exc})") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "ModelArtifact":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise DataError(f"{path}: cannot read model ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(d)

    def align(self, table: TrialTable) -> tuple[list, np.ndarray]:
        """Covariates of ``table`` ordered as in the model; names must match."""
        missing = [nm for nm in self.functional_names if nm not in table.functional_names]
        if missing:
            raise DataError(f"functional_{missing[0]}.csv: required by the model but not found")
        zmiss = [nm for nm in self.scalar_names if nm not in table.scalar_names]
        if zmiss:
            raise DataError(f"scalars.csv: column {zmiss[0]!r} required by the model but not found")
        x = [table.x[table.functional_names.index(nm)] for nm in self.functional_names]
        for nm, xj, g in zip(self.functional_names, x, self.fit.grids):
            if len(xj.grid) != len(g) or not np.allclose(xj.grid.points, g.points, rtol=0, atol=1e-12):
                raise DataError(f"functional_{nm}.csv: row 1: grid differs from the one the model was fitted on")
        cols = [table.scalar_names.index(nm) for nm in self.scalar_names]
        return x, table.z[:, cols]
