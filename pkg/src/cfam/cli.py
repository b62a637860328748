"""Command-line entry point: ``cfam {fit,cv,predict,simulate}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  On failure one line ``error=<kind> code=<n> message=<json string>``
is printed to stderr; logging also goes to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import CfamError, ConfigError
from .io import ModelArtifact, RunConfig, read_trial
from .itr import Rule, decide

log = logging.getLogger("cfam")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run configuration; command-line flags override it")
    p.add_argument("--seed", type=int, help="seed for fold assignment and simulation")
    p.add_argument("--threads", type=int, help="worker threads (cv folds) or processes (simulate)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def _model_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="trial directory (outcome.csv, scalars.csv, functional_*.csv)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--folds", type=int, help="cross-validation folds (default 10)")
    p.add_argument("--augment", choices=("none", "lasso", "fam"), help="main-effect residualization")
    p.add_argument("--linear-mode", action="store_true", default=None, help="linear component functions")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfam", description="Constrained functional additive models for treatment rules")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a model (lambda by cross-validation unless --lambda is given)")
    _common(p)
    _model_flags(p)
    p.add_argument("--lambda", dest="lam", type=float, help="sparsity level; skips cross-validation")

    p = sub.add_parser("cv", help="cross-validation curve only")
    _common(p)
    _model_flags(p)

    p = sub.add_parser("predict", help="recommended arms for new subjects")
    _common(p)
    p.add_argument("--model", required=True, help="model.json written by 'cfam fit'")
    p.add_argument("--data", required=True, help="trial directory with covariates")
    p.add_argument("--out", required=True, help="output CSV of recommendations")

    p = sub.add_parser("simulate", help="run a simulation preset")
    _common(p)
    p.add_argument("--preset", help="preset name (table1, table_s2, figure1, figure3, appendix_a5)")
    p.add_argument("--reps", type=int, help="replications per scenario (default: the preset's)")
    p.add_argument("--methods", help="comma-separated methods (default: the preset's)")
    p.add_argument("--out", required=True, help="output CSV of tidy results")
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    over = {}
    for key in ("seed", "threads", "folds", "augment", "lam", "preset", "reps"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "linear_mode", None):
        over["linear_mode"] = True
    if getattr(args, "methods", None):
        over["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    cfg = replace(cfg, **over)
    return cfg


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _cv_rows(report):
    return [(repr(r["lambda"]), repr(r["cv_error"]), repr(r["cv_se"]), r["chosen"]) for r in report.rows()]


def _load_trial(args, cfg: RunConfig):
    table = read_trial(args.data)
    data = table.to_trial(pi=cfg.pi)
    log.info("read %d subjects, %d arms, %d functional and %d scalar covariates",
             data.n, data.L, data.p, data.q)
    return table, data


def cmd_fit(args, cfg: RunConfig) -> dict:
    from .tuning import fit_pipeline

    table, data = _load_trial(args, cfg)
    res = fit_pipeline(data, augment=cfg.augment, linear_mode=cfg.linear_mode, lam=cfg.lam, folds=cfg.folds,
                       seed=cfg.seed, options=cfg.fit_options(), n_lambda=cfg.n_lambda, patience=cfg.patience,
                       cv_max_outer=cfg.cv_max_outer, threads=cfg.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    art = ModelArtifact.from_pipeline(res, table, cfg)
    art.save(out / "model.json")
    names = [f"X:{nm}" for nm in table.functional_names] + [f"Z:{nm}" for nm in table.scalar_names]
    _write_csv(out / "components.csv", ("component", "active", "shrinkage"),
               [(nm, int(c.active), repr(float(c.shrinkage))) for nm, c in zip(names, res.fit.components)])
    if res.report is not None:
        _write_csv(out / "cv.csv", ("lambda", "cv_error", "cv_se", "chosen"), _cv_rows(res.report))
    if not res.fit.converged:
        log.warning("outer iterations hit max_outer=%d without converging", res.fit.options.max_outer)
    return {"lambda": res.fit.lam, "active": [nm for nm, a in zip(names, res.fit.active) if a],
            "converged": res.fit.converged, "model": str(out / "model.json")}


def cmd_cv(args, cfg: RunConfig) -> dict:
    from .tuning import AUGMENT_KINDS, cross_validate, residualize

    _, data = _load_trial(args, cfg)
    opts = cfg.fit_options()
    work, _ = residualize(data, AUGMENT_KINDS[cfg.augment], replace(opts, linear_mode=False), seed=cfg.seed,
                          folds=cfg.folds, threads=cfg.threads)
    report = cross_validate(work, cfg.folds, None, opts, cfg.seed, cfg.n_lambda, cfg.patience, cfg.threads,
                            cfg.cv_max_outer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "cv.csv", ("lambda", "cv_error", "cv_se", "chosen"), _cv_rows(report))
    return {"best_lambda": report.best_lambda, "cv": str(out / "cv.csv")}


def cmd_predict(args, cfg: RunConfig) -> dict:
    from .solver import interaction_scores

    art = ModelArtifact.load(args.model)
    table = read_trial(args.data, require_outcome=False)
    x, z = art.align(table)
    scores = interaction_scores(art.fit, x, z)
    arms = decide(Rule(art.fit), x, z)
    labels = art.arm_labels
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    header = ["id", "recommended_arm"] + [f"score_{lab}" for lab in labels]
    rows = [[key, labels[arm - 1]] + [repr(float(v)) for v in s] for key, arm, s in zip(table.ids, arms, scores)]
    _write_csv(out, header, rows)
    counts = {str(lab): int(np.sum(arms == i + 1)) for i, lab in enumerate(labels)}
    return {"n": table.n, "recommended": counts, "predictions": str(out)}


def cmd_simulate(args, cfg: RunConfig) -> dict:
    from .sim import preset, run_experiment, summarize

    if not cfg.preset:
        raise ConfigError("simulate needs --preset (or 'preset' in the configuration)")
    setup = preset(cfg.preset)
    reps = cfg.reps or setup["reps"]
    methods = tuple(cfg.methods or setup["methods"])
    log.info("preset %s: %d scenarios x %d reps, methods %s", cfg.preset, len(setup["grid"]), reps, methods)
    rows = run_experiment(setup["grid"], reps=reps, methods=methods, out=args.out, seed=cfg.seed,
                          threads=cfg.threads)
    for (sid, method), (mean, se, k) in sorted(summarize(rows, "regret").items()):
        log.info("%s %s regret %.4f (se %.4f, %d reps)", sid, method, mean, se, k)
    failed = sum(1 for r in rows if r[6] == "failed" and r[7] > 0)
    return {"rows": len(rows), "failed_fits": failed, "results": str(args.out)}


COMMANDS = {"fit": cmd_fit, "cv": cmd_cv, "predict": cmd_predict, "simulate": cmd_simulate}


def _reason(kind: str, code: int, message: str) -> str:
    return f"error={kind} code={code} message={json.dumps(' '.join(str(message).split()))}"


def main(argv=None) -> int:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("cfam")
    root.handlers[:] = [handler]
    root.propagate = False
    try:
        args = build_parser().parse_args(argv)
        root.setLevel(logging.WARNING - 10 * min(args.verbose, 2))
        cfg = _config(args)
        summary = COMMANDS[args.command](args, cfg)
    except CfamError as exc:
        print(_reason(type(exc).__name__, exc.exit_code, exc), file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(_reason("NumericalError", 4, exc), file=sys.stderr)
        return 4
    print(json.dumps(summary, default=float))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
